//! Local computation latency.
//!
//! A UE needs `I_l(eps) = ceil(p * ln(1/eps))` local iterations, each costing
//! `D_k * c_k / f_k` seconds, where the cycles-per-bit `c_k` is Gamma
//! distributed. The Hoeffding-style latency bound for the average local
//! latency is evaluated in [`hoeffding_bound`].

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    /// `D_k`, bits.
    pub data_bits: f64,
    /// `f_k`, cycles per second.
    pub frequency: f64,
    /// `c_k`, cycles per bit (current draw).
    pub cycles_per_bit: f64,
    /// Gamma shape `kappa`.
    pub shape: f64,
    /// Gamma scale `beta`.
    pub scale: f64,
}

impl ComputeProfile {
    pub fn new(
        data_bits: f64,
        frequency: f64,
        cycles_per_bit: f64,
        shape: f64,
        scale: f64,
    ) -> Result<Self> {
        let p = ComputeProfile {
            data_bits,
            frequency,
            cycles_per_bit,
            shape,
            scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data_bits", self.data_bits),
            ("frequency", self.frequency),
            ("cycles_per_bit", self.cycles_per_bit),
            ("shape", self.shape),
            ("scale", self.scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The same device with a fresh `c_k` draw.
    pub fn resample(&self, seed: u64) -> Result<Self> {
        Ok(ComputeProfile {
            cycles_per_bit: sample_cycles(self.shape, self.scale, seed)?,
            ..*self
        })
    }
}

fn gamma(shape: f64, scale: f64) -> Result<Gamma<f64>> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::param(
            "shape",
            format!("must be positive, got {shape}"),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param(
            "scale",
            format!("must be positive, got {scale}"),
        ));
    }
    Gamma::new(shape, scale).map_err(|e| Error::param("shape", e.to_string()))
}

/// One `Gamma(shape, scale)` draw of cycles per bit.
pub fn sample_cycles(shape: f64, scale: f64, seed: u64) -> Result<f64> {
    let g = gamma(shape, scale)?;
    Ok(g.sample(&mut rng::stream(seed, &[tag::COMPUTE])))
}

/// `n` independent draws from one stream; used for moment checks and
/// Monte-Carlo latency studies.
pub fn sample_cycles_many(shape: f64, scale: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let g = gamma(shape, scale)?;
    let mut r = rng::stream(seed, &[tag::COMPUTE, n as u64]);
    Ok((0..n).map(|_| g.sample(&mut r)).collect())
}

/// `ceil(x)` that ignores floating-point dust just above an integer.
fn ceil_exact(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `I_l(eps) = ceil(p_scale * ln(1/eps))`, at least one iteration.
pub fn local_iterations(eps: f64, p_scale: f64) -> Result<u64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param(
            "eps",
            format!("local accuracy must lie in (0, 1), got {eps}"),
        ));
    }
    if !(p_scale > 0.0 && p_scale.is_finite()) {
        return Err(Error::param(
            "p_scale",
            format!("must be positive, got {p_scale}"),
        ));
    }
    Ok((ceil_exact(-p_scale * eps.ln()) as u64).max(1))
}

/// `T_comp = I_l(eps) * D_k * c_k / f_k`, seconds.
pub fn local_latency(profile: &ComputeProfile, eps: f64, p_scale: f64) -> Result<f64> {
    profile.validate()?;
    let iters = local_iterations(eps, p_scale)? as f64;
    Ok(iters * profile.data_bits * profile.cycles_per_bit / profile.frequency)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBoundInputs {
    pub latencies: Vec<f64>,
    /// Local accuracy target, in (0, 1).
    pub eps: f64,
    /// Global accuracy target, in (0, 1).
    pub theta: f64,
    pub p: f64,
    pub q: f64,
    /// Frame time, seconds.
    pub frame_time: f64,
}

impl LatencyBoundInputs {
    fn validate(&self) -> Result<()> {
        if self.latencies.is_empty() {
            return Err(Error::Empty("latencies"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::param(
                "eps",
                format!("must lie in (0, 1), got {}", self.eps),
            ));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::param(
                "theta",
                format!("must lie in (0, 1), got {}", self.theta),
            ));
        }
        for (name, v) in [
            ("p", self.p),
            ("q", self.q),
            ("frame_time", self.frame_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Admissible latency interval `[p ln(1/eps), 2 T_F]`.
    pub fn interval(&self) -> (f64, f64) {
        (-self.p * self.eps.ln(), 2.0 * self.frame_time)
    }

    /// Clamps every latency into [`interval`](Self::interval), warning about
    /// each value that had to move. Idempotent.
    pub fn clamped(&self) -> LatencyBoundInputs {
        let (lo, hi) = self.interval();
        let latencies = self
            .latencies
            .iter()
            .map(|&t| {
                let c = t.clamp(lo, hi.max(lo));
                if c != t {
                    warn!("latency {t} outside [{lo}, {hi}], clamped to {c}");
                }
                c
            })
            .collect();
        LatencyBoundInputs {
            latencies,
            ..self.clone()
        }
    }
}

/// Right-hand side of the local-latency bound
///
/// `mean(T_k) + ln(1/eps^2) (2q - p(1-theta)) sqrt(ln(1/h) / 2)`,
/// `h = exp(-2 T_max^2 / (K (2 T_F - p ln(1/eps))^2))`.
///
/// Latencies are clamped first. `ln(1/h)` is formed directly so that tiny
/// `h` does not underflow.
pub fn hoeffding_bound(inputs: &LatencyBoundInputs, t_max: f64) -> Result<f64> {
    inputs.validate()?;
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::param(
            "t_max",
            format!("must be positive, got {t_max}"),
        ));
    }
    let inputs = inputs.clamped();
    let k = inputs.latencies.len() as f64;
    let log_inv_eps = -inputs.eps.ln();
    let spread = 2.0 * inputs.frame_time - inputs.p * log_inv_eps;
    if spread.abs() < 1e-12 {
        return Err(Error::param(
            "frame_time",
            "2 T_F equals p ln(1/eps); the latency interval is degenerate",
        ));
    }
    let coeff = 2.0 * inputs.q - inputs.p * (1.0 - inputs.theta);
    if coeff <= 0.0 {
        warn!("2q <= p(1 - theta): bound correction is nonpositive ({coeff})");
    }
    let log_inv_h = 2.0 * t_max * t_max / (k * spread * spread);
    let mean = inputs.latencies.iter().sum::<f64>() / k;
    Ok(mean + 2.0 * log_inv_eps * coeff * (log_inv_h / 2.0).sqrt())
}

/// Draws one latency per profile: fresh `c_k`, then [`local_latency`].
pub fn sample_latencies(
    profiles: &[ComputeProfile],
    eps: f64,
    p_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, &[tag::COMPUTE]);
    profiles
        .iter()
        .map(|p| {
            let fresh = p.resample(r.random())?;
            local_latency(&fresh, eps, p_scale)
        })
        .collect()
}
