//! Analysis helpers, run configuration and metric persistence.

pub mod config;
pub mod metrics;

use ndarray::Array2;

use serde::{Deserialize, Serialize};

use crate::disc::DiscState;
use crate::envs::{evaluate_episodes, value_iteration_expert, Env, EnvError, UniformPolicy};
use crate::neural::NeuralError;
use crate::rng::seeded;

pub use config::{load_llm_config, ConfigError, RunConfig, PRESETS};
pub use metrics::{emit, read_frame, Format, MetricsError, MetricsFrame};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KdeError {
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("samples have zero variance")]
    ZeroVariance,
    #[error("non-finite sample")]
    NonFinite,
}

/// Scott's rule: `sigma * n^(-1/5)` with the unbiased sample deviation.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64, KdeError> {
    let n = samples.len();
    if n < 2 {
        return Err(KdeError::TooFew(n));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(KdeError::NonFinite);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(KdeError::ZeroVariance);
    }
    Ok(var.sqrt() * (n as f64).powf(-0.2))
}

/// Gaussian kernel density estimate evaluated at each grid point.
pub fn kde_gaussian(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>, KdeError> {
    // Working on sorted samples keeps the result independent of input order.
    let s = sorted(samples);
    let h = scott_bandwidth(&s)?;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            norm * s
                .iter()
                .map(|&s| (-0.5 * ((g - s) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Trapezoidal integral of `values` over `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// `lo, lo + step, ..., hi` (inclusive, up to rounding).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Probability that a score drawn from `a` beats one drawn from `b`, ties
/// counting half.
pub fn prob_improvement(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.5;
    }
    let mut wins = 0u64;
    let mut ties = 0u64;
    for x in a {
        for y in b {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Greater) => wins += 1,
                Some(std::cmp::Ordering::Equal) => ties += 1,
                _ => {}
            }
        }
    }
    // Integer counts keep pi(a, b) + pi(b, a) == 1 exact.
    (2 * wins + ties) as f64 / (2 * a.len() * b.len()) as f64
}

/// Discriminator logits (log density-ratio estimates) on visited pairs.
pub fn log_ratio_snapshot(disc: &DiscState, pairs: &[Vec<f64>]) -> Result<Vec<f64>, NeuralError> {
    let m: Array2<f64> = crate::disc::to_matrix(pairs, disc.input_dim());
    disc.logits(&m)
}

/// Fraction of samples inside `[lo, hi]`.
pub fn mass_in(samples: &[f64], lo: f64, hi: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / samples.len() as f64
}

/// KDE mass on `[lo, hi]`, integrated with the trapezoid rule on `n` points.
pub fn kde_mass(samples: &[f64], lo: f64, hi: f64, n: usize) -> Result<f64, KdeError> {
    let grid = linspace(lo, hi, n);
    Ok(trapezoid(&grid, &kde_gaussian(samples, &grid)?))
}

/// Returns of the optimal and the uniformly random policy: the endpoints of
/// the normalized-return scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub expert: f64,
    pub random: f64,
}

/// Value-iteration tolerance for the reference expert.
pub const EXPERT_TOL: f64 = 1e-10;

impl ReferenceReturns {
    pub fn measure(env: &Env, episodes: usize, seed: u64) -> Result<Self, EnvError> {
        let expert = value_iteration_expert(env, EXPERT_TOL);
        let mut rng = seeded(seed);
        let e = evaluate_episodes(env, &expert.policy, episodes, &mut rng)?;
        let uniform = UniformPolicy {
            n_actions: env.n_actions(),
        };
        let r = evaluate_episodes(env, &uniform, episodes, &mut rng)?;
        Ok(ReferenceReturns {
            expert: e.mean_return(),
            random: r.mean_return(),
        })
    }

    pub fn normalize(&self, ret: f64) -> Result<f64, crate::ail::AilError> {
        crate::ail::normalized_return(ret, self.random, self.expert)
    }
}
