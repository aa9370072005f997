use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::compute::ComputeProfile;
use crate::data::{
    assign_heterogeneity, dirichlet_partition, generate_synthetic, ingest_idx, validation_split,
    ClientProfile, LabeledDataset, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::learn::Arch;
use crate::mac::FrameConfig;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        samples: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeSpec {
    pub shape: f64,
    pub scale: f64,
    /// Local accuracy target `eps`.
    pub eps: f64,
    /// Iteration constant `p` in `I_l = ceil(p ln(1/eps))`.
    pub p_scale: f64,
    pub bits_per_sample: f64,
    /// Cycles per second. `None` calibrates it so that a client of average
    /// size has median latency `T_Q`.
    pub frequency: Option<f64>,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        ComputeSpec {
            shape: 2.0,
            scale: 1.0,
            eps: 0.5,
            p_scale: 1.0,
            bits_per_sample: 1024.0,
            frequency: None,
        }
    }
}

/// Approximate Gamma median, `k theta (3k - 0.8)/(3k + 0.2)`.
fn gamma_median(shape: f64, scale: f64) -> f64 {
    shape * scale * (3.0 * shape - 0.8) / (3.0 * shape + 0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub dataset: DatasetSource,
    pub clients: usize,
    pub alpha: f64,
    pub straggler_fraction: f64,
    pub sigma: f64,
    /// Held-out test fraction, used for reported accuracy.
    pub test_fraction: f64,
    /// Server-side validation fraction, used by the utility.
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub compute: ComputeSpec,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            dataset: DatasetSource::Synthetic {
                samples: 5000,
                dim: 20,
                classes: 4,
                separation: 3.0,
            },
            clients: 50,
            alpha: 1.0,
            straggler_fraction: 0.5,
            sigma: 0.1,
            test_fraction: 0.2,
            val_fraction: 0.1,
            hidden: Vec::new(),
            compute: ComputeSpec::default(),
        }
    }
}

/// Everything a run needs that does not change between frames.
#[derive(Debug, Clone)]
pub struct Environment {
    pub arch: Arch,
    pub clients: Vec<ClientProfile>,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub compute: ComputeSpec,
}

impl Environment {
    /// Builds data, partition and heterogeneity from `seed`.
    pub fn build(spec: &EnvSpec, frame: &FrameConfig, seed: u64) -> Result<Environment> {
        frame.validate()?;
        let full = match &spec.dataset {
            DatasetSource::Synthetic {
                samples,
                dim,
                classes,
                separation,
            } => generate_synthetic(
                *samples,
                *dim,
                *classes,
                *separation,
                rng::derive_seed(seed, &[tag::DATA]),
            )?,
            DatasetSource::Idx { images, labels } => ingest_idx(images, labels)?,
        };
        let (rest, test) = validation_split(
            &full,
            spec.test_fraction,
            rng::derive_seed(seed, &[tag::SPLIT, 0]),
        )?;
        let (train, validation) = validation_split(
            &rest,
            spec.val_fraction,
            rng::derive_seed(seed, &[tag::SPLIT, 1]),
        )?;

        let pspec = PartitionSpec {
            clients: spec.clients,
            alpha: spec.alpha,
            straggler_fraction: spec.straggler_fraction,
            sigma: spec.sigma,
            seed: rng::derive_seed(seed, &[tag::PARTITION]),
        };
        let parts = dirichlet_partition(&train, &pspec)?;

        let c = spec.compute;
        let mean_samples = train.len() as f64 / spec.clients as f64;
        let iters = crate::compute::local_iterations(c.eps, c.p_scale)? as f64;
        let frequency = match c.frequency {
            Some(f) => f,
            None => {
                let target = frame.pull_time().max(frame.slot_len);
                iters * mean_samples * c.bits_per_sample * gamma_median(c.shape, c.scale) / target
            }
        };
        let template = ComputeProfile::new(
            c.bits_per_sample,
            frequency,
            c.shape * c.scale,
            c.shape,
            c.scale,
        )?;
        let clients = assign_heterogeneity(parts, &pspec, |_, n| ComputeProfile {
            data_bits: n as f64 * c.bits_per_sample,
            ..template
        })?;

        let arch = Arch {
            input: full.dim,
            hidden: spec.hidden.clone(),
            classes: full.classes,
        };
        arch.validate()?;
        Ok(Environment {
            arch,
            clients,
            validation,
            test,
            compute: c,
        })
    }

    pub fn client(&self, id: usize) -> Result<&ClientProfile> {
        id.checked_sub(1)
            .and_then(|i| self.clients.get(i))
            .ok_or(Error::UnknownClient(id))
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}
