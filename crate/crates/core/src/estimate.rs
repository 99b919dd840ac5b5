//! Monte Carlo summaries and the ordered parallel path runner shared by both simulators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub n_paths: usize,
    pub mean: f64,
    pub std_error: f64,
    pub ci_half_width: f64,
    pub tail_bound: f64,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64], tail_bound: f64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::param("n_paths", format!("need at least 2 samples, got {n}")));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_error = (var / n as f64).sqrt();
        Ok(Self {
            n_paths: n,
            mean,
            std_error,
            ci_half_width: Z95 * std_error,
            tail_bound,
        })
    }

    /// `sqrt(SE_a^2 + SE_b^2)`, the standard error of a difference of independent means.
    pub fn joint_std_error(&self, other: &CostEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// Whether two estimates agree within `k` joint standard errors.
    pub fn agrees_with(&self, other: &CostEstimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.joint_std_error(other)
    }
}

/// Truncation bound `e^{-alpha T} (C(0)/alpha + p * local_time_bound)`.
pub fn tail_bound(alpha: f64, horizon: f64, cost_at_zero: f64, p: f64, local_time_bound: f64) -> f64 {
    (-alpha * horizon).exp() * (cost_at_zero / alpha + p * local_time_bound)
}

/// Local refinement of the reflected scheme near the boundary.
///
/// A step of size `h` that starts below `layer * sigma * sqrt(h)` is replaced
/// by four projected steps of size `h / 4`, recursively up to `levels` times.
/// Plain projection underestimates the local time by roughly `sigma sqrt(dt)`
/// per unit of boundary contact; each level roughly halves that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRefinement {
    pub levels: u32,
    pub layer: f64,
}

impl BoundaryRefinement {
    /// Plain projected Euler.
    pub const NONE: Self = Self { levels: 0, layer: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if self.levels > 8 {
            return Err(Error::param("boundary_levels", format!("must be at most 8, got {}", self.levels)));
        }
        if !(self.layer >= 0.0 && self.layer.is_finite()) {
            return Err(Error::param("boundary_layer", format!("must be finite and >= 0, got {}", self.layer)));
        }
        Ok(())
    }
}

impl Default for BoundaryRefinement {
    fn default() -> Self {
        Self { levels: default_boundary_levels(), layer: default_boundary_layer() }
    }
}

fn default_boundary_levels() -> u32 {
    1
}

fn default_boundary_layer() -> f64 {
    1.0
}

/// Shared Monte Carlo controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub base_seed: u64,
    /// `None` uses the global rayon pool.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Bound on the expected discounted local time accrued after the horizon.
    #[serde(default = "default_local_time_bound")]
    pub local_time_bound: f64,
    #[serde(default = "default_boundary_levels")]
    pub boundary_levels: u32,
    /// Width of the refined layer in units of `sigma * sqrt(step)`.
    #[serde(default = "default_boundary_layer")]
    pub boundary_layer: f64,
}

fn default_local_time_bound() -> f64 {
    10.0
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 40.0,
            n_paths: 100_000,
            base_seed: 20_240_601,
            workers: None,
            local_time_bound: default_local_time_bound(),
            boundary_levels: default_boundary_levels(),
            boundary_layer: default_boundary_layer(),
        }
    }
}

impl MonteCarloConfig {
    pub fn refinement(&self) -> BoundaryRefinement {
        BoundaryRefinement { levels: self.boundary_levels, layer: self.boundary_layer }
    }

    pub fn validate(&self) -> Result<()> {
        self.refinement().validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::param("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if self.n_paths < 2 {
            return Err(Error::param("n_paths", "must be at least 2"));
        }
        if self.workers == Some(0) {
            return Err(Error::param("workers", "must be at least 1"));
        }
        if !(self.local_time_bound >= 0.0) {
            return Err(Error::param("local_time_bound", "must be non-negative"));
        }
        Ok(())
    }
}

/// Runs `path(i)` for `i in 0..n_paths` and returns results in index order.
///
/// Results do not depend on the worker count because each path owns its seed
/// and callers reduce the ordered vector sequentially.
pub fn run_paths<T, F>(n_paths: usize, workers: Option<usize>, path: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let run = || -> Vec<Result<T>> { (0..n_paths).into_par_iter().map(&path).collect() };
    let results = match workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::param("workers", e.to_string()))?
            .install(run),
        None => run(),
    };
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures > 0 {
        let (index, first) = results
            .into_iter()
            .enumerate()
            .find_map(|(i, r)| r.err().map(|e| (i, e)))
            .expect("at least one failure");
        return Err(match first {
            Error::Simulation { step, reason } => Error::Simulation {
                step,
                reason: format!("{failures} of {n_paths} paths failed; first was path {index}: {reason}"),
            },
            other => other,
        });
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_known_samples() {
        let est = CostEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0], 0.0).unwrap();
        assert_eq!(est.mean, 2.5);
        let se = (5.0_f64 / 3.0 / 4.0).sqrt();
        assert!((est.std_error - se).abs() < 1e-15);
        assert_eq!(est.ci_half_width, Z95 * est.std_error);
        assert!(CostEstimate::from_samples(&[1.0], 0.0).is_err());
    }

    #[test]
    fn tail_bound_decreases_in_horizon() {
        let a = tail_bound(0.5, 10.0, 1.0, 1.0, 10.0);
        let b = tail_bound(0.5, 20.0, 1.0, 1.0, 10.0);
        assert!(b < a && b > 0.0);
    }

    #[test]
    fn runner_preserves_order_for_any_worker_count() {
        let one = run_paths(1000, Some(1), |i| Ok(i * i)).unwrap();
        let three = run_paths(1000, Some(3), |i| Ok(i * i)).unwrap();
        assert_eq!(one, three);
        assert_eq!(one[31], 961);
    }

    #[test]
    fn runner_reports_failure_count() {
        let err = run_paths(10, None, |i| {
            if i % 5 == 4 {
                Err(Error::Simulation {
                    step: 7,
                    reason: "nan".into(),
                })
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        match err {
            Error::Simulation { step, reason } => {
                assert_eq!(step, 7);
                assert!(reason.starts_with("2 of 10 paths failed; first was path 4"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }
}
