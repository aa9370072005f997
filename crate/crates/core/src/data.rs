//! Datasets, non-IID client partitioning and client heterogeneity.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compute::ComputeProfile;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub type ClientId = usize;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::param(
                "features",
                format!(
                    "{} feature values do not form {} rows of dimension {dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::param(
                "labels",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Concatenation; all parts must share dimension and class count.
    pub fn concat<'a>(
        parts: impl IntoIterator<Item = &'a LabeledDataset>,
    ) -> Result<LabeledDataset> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or(Error::Empty("datasets to concatenate"))?;
        let mut out = first.clone();
        for p in iter {
            if p.dim != out.dim || p.classes != out.classes {
                return Err(Error::param(
                    "datasets",
                    "cannot concatenate mismatched datasets",
                ));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Gaussian class clusters with unit variance per coordinate.
///
/// Class centres sit at `separation / sqrt(2)` along distinct coordinate axes,
/// so every pair of centres is exactly `separation` apart. When there are more
/// classes than dimensions the centres are random directions of the same
/// radius instead.
pub fn generate_synthetic(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::param(
            "classes",
            format!("need at least 2 classes, got {classes}"),
        ));
    }
    if dim == 0 {
        return Err(Error::param("dim", "feature dimension must be positive"));
    }
    if n < classes {
        return Err(Error::param(
            "n",
            format!("need at least one sample per class ({n} < {classes})"),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::param("separation", "must be positive"));
    }
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let radius = separation / 2f64.sqrt();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                let mut v = vec![0.0; dim];
                v[c] = radius;
                v
            } else {
                let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &l in &labels {
        for &c in &centers[l] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(c + z);
        }
    }
    LabeledDataset::new(features, labels, dim, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image/label file pair (the MNIST distribution format).
/// Pixels are scaled to `[0, 1]`; the class count is `max(label) + 1`.
pub fn ingest_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let img = read(images)?;
    let lab = read(labels)?;

    let idx_err = |path: &Path, offset: usize, reason: String| Error::Idx {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let be_u32 = |buf: &[u8], path: &Path, offset: usize| -> Result<u32> {
        buf.get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| idx_err(path, offset, "truncated header".into()))
    };

    let magic = be_u32(&img, images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(
            images,
            0,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, images, 4)? as usize;
    let rows = be_u32(&img, images, 8)? as usize;
    let cols = be_u32(&img, images, 12)? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(idx_err(images, 8, "zero image dimension".into()));
    }
    let needed = 16 + n * dim;
    if img.len() < needed {
        return Err(idx_err(
            images,
            img.len(),
            format!("truncated pixel data: expected {needed} bytes for {n} images"),
        ));
    }

    let magic = be_u32(&lab, labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(
            labels,
            0,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&lab, labels, 4)? as usize;
    if n_labels != n {
        return Err(idx_err(
            labels,
            4,
            format!("label count {n_labels} does not match image count {n}"),
        ));
    }
    if lab.len() < 8 + n {
        return Err(idx_err(
            labels,
            lab.len(),
            format!("truncated label data: expected {} bytes", 8 + n),
        ));
    }

    let label_vec: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = label_vec.iter().max().map_or(0, |m| m + 1).max(2);
    let features = img[16..needed].iter().map(|&p| p as f64 / 255.0).collect();
    LabeledDataset::new(features, label_vec, dim, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub straggler_fraction: f64,
    /// Largest per-client noise level.
    pub sigma: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::param("clients", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(
                "alpha",
                format!("must be positive, got {}", self.alpha),
            ));
        }
        if !(0.0..=1.0).contains(&self.straggler_fraction) {
            return Err(Error::param(
                "straggler_fraction",
                format!("must lie in [0, 1], got {}", self.straggler_fraction),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(
                "sigma",
                format!("must be nonnegative, got {}", self.sigma),
            ));
        }
        Ok(())
    }
}

const PARTITION_RETRIES: usize = 100;

/// Label-skew split: for every class, client shares are drawn from a
/// symmetric Dirichlet(alpha) and the class's shuffled samples are cut at
/// the cumulative shares. The draw is repeated until no client is empty.
pub fn dirichlet_partition(
    data: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Vec<LabeledDataset>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset to partition"));
    }
    let k = spec.clients;
    if k > data.len() {
        return Err(Error::param(
            "clients",
            format!("{k} clients exceed {} samples", data.len()),
        ));
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::param("alpha", e.to_string()))?;
    let by_class = data.indices_by_class();

    for attempt in 0..PARTITION_RETRIES {
        let mut rng = rng::stream(spec.seed, &[tag::PARTITION, attempt as u64]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cum = 0.0;
            let mut lo = 0;
            for (client, d) in draws.iter().enumerate() {
                cum += d;
                let hi = if client + 1 == k || total <= 0.0 {
                    members.len()
                } else {
                    ((cum / total) * members.len() as f64).round() as usize
                };
                let hi = hi.clamp(lo, members.len());
                assigned[client].extend_from_slice(&members[lo..hi]);
                lo = hi;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .map(|mut idx| {
                    idx.sort_unstable();
                    data.subset(&idx)
                })
                .collect());
        }
    }
    Err(Error::PartitionRetries {
        retries: PARTITION_RETRIES,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// 1-based client index `k`.
    pub id: ClientId,
    pub dataset: LabeledDataset,
    pub num_samples: usize,
    pub is_straggler: bool,
    pub noise_std: f64,
    pub compute: ComputeProfile,
}

/// Per-client noise level `(k - 1) * sigma / K` for 1-based `k`.
pub fn noise_level(k: ClientId, clients: usize, sigma: f64) -> f64 {
    (k.saturating_sub(1)) as f64 * sigma / clients as f64
}

/// Flags exactly `floor(straggler_fraction * K)` stragglers uniformly at
/// random and assigns the linear noise ramp. `compute` builds each client's
/// compute profile from its sample count.
pub fn assign_heterogeneity(
    clients: Vec<LabeledDataset>,
    spec: &PartitionSpec,
    compute: impl Fn(ClientId, usize) -> ComputeProfile,
) -> Result<Vec<ClientProfile>> {
    spec.validate()?;
    if clients.is_empty() {
        return Err(Error::Empty("client datasets"));
    }
    let k = clients.len();
    let stragglers = (spec.straggler_fraction * k as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[tag::HETEROGENEITY]));
    let mut flagged = vec![false; k];
    for &i in order.iter().take(stragglers) {
        flagged[i] = true;
    }
    Ok(clients
        .into_iter()
        .enumerate()
        .map(|(i, dataset)| {
            let id = i + 1;
            let num_samples = dataset.len();
            ClientProfile {
                id,
                num_samples,
                is_straggler: flagged[i],
                noise_std: noise_level(id, k, spec.sigma),
                compute: compute(id, num_samples),
                dataset,
            }
        })
        .collect())
}

/// Stratified split: each class contributes `round(fraction * n_c)` samples
/// to the second (validation) part.
pub fn validation_split(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(
            "fraction",
            format!("must lie in (0, 1), got {fraction}"),
        ));
    }
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut members in data.indices_by_class() {
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::param(
            "fraction",
            format!(
                "split of {} samples at {fraction} leaves an empty part",
                data.len()
            ),
        ));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}
