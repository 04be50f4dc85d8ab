//! Shared statistical utilities: streaming moments, standard errors, z-scores,
//! delta-method propagation through exp/ln, and weighted means with effective
//! sample size.
//!
//! All estimators are single-pass and mergeable so that replica aggregation
//! can be sharded across workers and folded back in a fixed order; merging is
//! associative up to floating-point reassociation.

use crate::{Error, Result};
use serde::Serialize;

/// A Monte Carlo estimate: sample mean, standard error of the mean, and the
/// number of samples that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
}

impl MCEstimate {
    /// z-score of this estimate against a target value.
    ///
    /// A degenerate sample (stderr = 0) scores 0 when the mean hits the target
    /// exactly and ±∞ otherwise, so downstream |z| ≤ threshold checks treat
    /// exact agreement as a pass and exact disagreement as a hard fail.
    pub fn z_score(&self, target: f64) -> f64 {
        let dev = self.mean - target;
        if self.stderr == 0.0 {
            if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(dev)
            }
        } else {
            dev / self.stderr
        }
    }
}

/// Welford-style streaming mean and variance accumulator.
///
/// `merge` uses the parallel update of Chan et al., so a set of per-worker
/// accumulators folded in any grouping agrees with the sequential pass up to
/// ~1e-12 relative reassociation error.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamingMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl StreamingMoments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate all values of an iterator.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut sm = Self::new();
        for x in values {
            sm.push(x);
        }
        sm
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &StreamingMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let delta = other.mean - self.mean;
        let total = n1 + n2;
        self.mean += delta * n2 / total;
        self.m2 += other.m2 + delta * delta * n1 * n2 / total;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; requires at least two samples.
    pub fn variance(&self) -> Result<f64> {
        if self.count < 2 {
            return Err(Error::invalid(format!(
                "variance needs at least 2 samples, got {}",
                self.count
            )));
        }
        // m2 is a sum of squares up to rounding; clamp tiny negative residue.
        Ok((self.m2 / (self.count - 1) as f64).max(0.0))
    }

    pub fn estimate(&self) -> Result<MCEstimate> {
        let var = self.variance()?;
        Ok(MCEstimate {
            mean: self.mean,
            stderr: (var / self.count as f64).sqrt(),
            n: self.count,
        })
    }
}

/// Propagate an estimate through x ↦ exp(x): stderr scales by |f′(mean)|.
pub fn delta_method_exp(est: MCEstimate) -> MCEstimate {
    let mean = est.mean.exp();
    MCEstimate {
        mean,
        stderr: mean * est.stderr,
        n: est.n,
    }
}

/// Propagate an estimate through x ↦ ln(x); requires a positive mean.
pub fn delta_method_log(est: MCEstimate) -> Result<MCEstimate> {
    if est.mean <= 0.0 {
        return Err(Error::invalid(format!(
            "delta_method_log needs a positive mean, got {}",
            est.mean
        )));
    }
    Ok(MCEstimate {
        mean: est.mean.ln(),
        stderr: est.stderr / est.mean,
        n: est.n,
    })
}

/// Self-normalized weighted mean with a ratio-estimator standard error and the
/// effective sample size (Σw)²/Σw².
///
/// The stderr linearizes the ratio Σwx/Σw around its value: se² =
/// Σ(wᵢ(xᵢ−ρ̂))² / (Σw)². Equal weights reproduce the plain sample-mean
/// stderr up to the n/(n−1) variance convention.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<(MCEstimate, f64)> {
    if values.len() != weights.len() {
        return Err(Error::invalid("values/weights length mismatch"));
    }
    if values.len() < 2 {
        return Err(Error::invalid("weighted_mean needs at least 2 samples"));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let w_sum: f64 = weights.iter().sum();
    if w_sum <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    let w_sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = w_sum * w_sum / w_sq;
    let mean = values
        .iter()
        .zip(weights)
        .map(|(x, w)| w * x)
        .sum::<f64>()
        / w_sum;
    let resid_sq: f64 = values
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let r = w * (x - mean);
            r * r
        })
        .sum();
    let est = MCEstimate {
        mean,
        stderr: resid_sq.sqrt() / w_sum,
        n: values.len() as u64,
    };
    Ok((est, ess))
}
