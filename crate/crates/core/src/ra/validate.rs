use serde::{Deserialize, Serialize};

use super::expr::{GuardStats, RaExpr};

pub const GRID_MIN: f64 = -10.0;
pub const GRID_MAX: f64 = 10.0;
pub const GRID_STEP: f64 = 0.01;

/// Magnitude above which an expression counts as unbounded.
pub const BOUNDED_LIMIT: f64 = 100.0;
/// Probes beyond the grid used for the boundedness flag.
pub const TAIL_PROBES: [f64; 8] = [-1e3, -100.0, -50.0, -20.0, 20.0, 50.0, 100.0, 1e3];
/// Largest grid magnitude an expression may reach and still be accepted as a candidate.
pub const ACCEPT_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Largest |r(x)| over the grid.
    pub max_abs: f64,
    /// Guard substitutions over the grid.
    pub guard_count: u64,
    /// |r| stays below [`BOUNDED_LIMIT`] on the grid and at the tail probes.
    pub bounded: bool,
    /// Weakly monotone (either direction) on the grid.
    pub monotone: bool,
}

impl ValidationReport {
    /// Whether the expression is usable as a search candidate.
    pub fn is_acceptable(&self) -> bool {
        self.max_abs.is_finite() && self.max_abs <= ACCEPT_LIMIT
    }
}

/// Grid points `-10, -9.99, ..., 10` (2001 points).
pub fn validation_grid() -> Vec<f64> {
    let n = ((GRID_MAX - GRID_MIN) / GRID_STEP).round() as usize;
    (0..=n).map(|i| GRID_MIN + GRID_STEP * i as f64).collect()
}

pub fn validate(expr: &RaExpr) -> ValidationReport {
    let mut guards = GuardStats::default();
    let values: Vec<f64> = validation_grid()
        .into_iter()
        .map(|x| expr.eval_guarded(x, &mut guards))
        .collect();
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tail_max = TAIL_PROBES
        .iter()
        .map(|&x| expr.eval(x).abs())
        .fold(0.0f64, f64::max);
    let nondecreasing = values.windows(2).all(|w| w[1] >= w[0]);
    let nonincreasing = values.windows(2).all(|w| w[1] <= w[0]);
    ValidationReport {
        max_abs,
        guard_count: guards.total(),
        bounded: max_abs.max(tail_max) <= BOUNDED_LIMIT,
        monotone: nondecreasing || nonincreasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ra::{named_ra, parse};

    #[test]
    fn grid_shape() {
        let g = validation_grid();
        assert_eq!(g.len(), 2001);
        assert_eq!(g[0], -10.0);
        assert!((g[2000] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dail_is_bounded_without_guards() {
        let r = validate(&named_ra("dail").unwrap().expr);
        assert!(r.bounded);
        assert_eq!(r.guard_count, 0);
        assert!(r.monotone);
        assert!(r.max_abs <= 1.0);
    }

    #[test]
    fn fairl_is_unbounded() {
        let r = validate(&named_ra("fairl").unwrap().expr);
        assert!(!r.bounded);
        assert!(!r.monotone);
        assert!(r.is_acceptable());
    }

    #[test]
    fn constant_is_weakly_monotone() {
        let r = validate(&RaExpr::Const(3.0));
        assert!(r.monotone);
        assert!(r.bounded);
        assert_eq!(r.max_abs, 3.0);
    }

    #[test]
    fn log_of_negative_counts_guards() {
        let r = validate(&parse("log(x)").unwrap());
        // x <= 0 on the first 1001 grid points
        assert_eq!(r.guard_count, 1001);
        assert!(r.max_abs.is_finite());
    }

    #[test]
    fn huge_outputs_are_rejected() {
        let r = validate(&parse("exp(exp(x))").unwrap());
        assert!(!r.is_acceptable());
    }
}
