//! Wasserstein-2 distances between uniform empirical point clouds.
//!
//! `emd_exact` solves the transportation problem as a min-cost flow with
//! integer supplies (each source ships `m` units, each sink receives `n`),
//! so it is exact for any `n`, `m`. `sinkhorn` is the entropic solver in the
//! log domain and is used when the exact problem would be too large.

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Largest `n * m` accepted by the exact solver.
pub const EXACT_LIMIT: usize = 65_536;
/// Sinkhorn regularization relative to the largest cost entry.
pub const EPS_REL: f64 = 0.005;
pub const SINKHORN_MAX_ITERS: usize = 20_000;
pub const SINKHORN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OtError {
    #[error("empty point set")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("exact solver limit exceeded: {n}x{m} > {limit}")]
    TooLarge { n: usize, m: usize, limit: usize },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

/// `n` points in R^d, each with weight `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDist {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl EmpiricalDist {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, OtError> {
        let dim = points.first().ok_or(OtError::Empty)?.len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(OtError::DimMismatch(dim, p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(OtError::NonFinite(i));
            }
        }
        Ok(EmpiricalDist { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.points.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| p.iter().map(|v| v * s).collect())
            .collect();
        EmpiricalDist {
            points,
            dim: self.dim,
        }
    }

    /// Uniform subsample without replacement; returns a clone when `k >= n`.
    pub fn subsample(&self, k: usize, rng: &mut Rng) -> Self {
        if k >= self.len() {
            return self.clone();
        }
        let mut idx = sample(rng, self.len(), k).into_vec();
        idx.sort_unstable();
        let points = idx.into_iter().map(|i| self.points[i].clone()).collect();
        EmpiricalDist {
            points,
            dim: self.dim,
        }
    }
}

/// Subsamples both sets to `min(cap, |a|, |b|)` points.
pub fn equalize(
    a: &EmpiricalDist,
    b: &EmpiricalDist,
    cap: usize,
    rng: &mut Rng,
) -> (EmpiricalDist, EmpiricalDist) {
    let k = cap.min(a.len()).min(b.len());
    (a.subsample(k, rng), b.subsample(k, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// L1 deviation of row and column sums from the uniform weights.
    pub marginal_error: f64,
}

impl TransportPlan {
    fn new(plan: Array2<f64>) -> Self {
        let (n, m) = plan.dim();
        let (wa, wb) = (1.0 / n as f64, 1.0 / m as f64);
        let rows: f64 = plan.rows().into_iter().map(|r| (r.sum() - wa).abs()).sum();
        let cols: f64 = plan
            .columns()
            .into_iter()
            .map(|c| (c.sum() - wb).abs())
            .sum();
        TransportPlan {
            plan,
            marginal_error: rows + cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    pub distance: f64,
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
}

/// Squared Euclidean ground costs.
pub fn cost_matrix(a: &EmpiricalDist, b: &EmpiricalDist) -> Result<Array2<f64>, OtError> {
    if a.dim != b.dim {
        return Err(OtError::DimMismatch(a.dim, b.dim));
    }
    Ok(Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
        a.points[i]
            .iter()
            .zip(&b.points[j])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }))
}

fn w2_of(plan: &Array2<f64>, cost: &Array2<f64>) -> f64 {
    let total: f64 = plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
    total.max(0.0).sqrt()
}

/// Exact W2 by successive shortest paths on the bipartite transportation graph.
pub fn emd_exact(a: &EmpiricalDist, b: &EmpiricalDist) -> Result<OtResult, OtError> {
    let cost = cost_matrix(a, b)?;
    let (n, m) = cost.dim();
    if n * m > EXACT_LIMIT {
        return Err(OtError::TooLarge {
            n,
            m,
            limit: EXACT_LIMIT,
        });
    }
    let flow = min_cost_flow(&cost);
    let total = (n * m) as f64;
    let plan = flow.mapv(|f| f as f64 / total);
    let distance = w2_of(&plan, &cost);
    Ok(OtResult {
        distance,
        plan: TransportPlan::new(plan),
        converged: true,
        iterations: 0,
    })
}

/// Sources ship `m` units each, sinks take `n` units each. Dijkstra with
/// potentials over the dense residual graph; node `i < n` is a source,
/// node `n + j` a sink.
fn min_cost_flow(cost: &Array2<f64>) -> Array2<u64> {
    let (n, m) = cost.dim();
    let nodes = n + m;
    let mut flow = Array2::<u64>::zeros((n, m));
    let mut supply = vec![m as u64; n];
    let mut demand = vec![n as u64; m];
    let mut pot = vec![0.0f64; nodes];
    // Initial sink potentials: cheapest incoming edge keeps reduced costs >= 0.
    for j in 0..m {
        pot[n + j] = (0..n).map(|i| cost[[i, j]]).fold(f64::INFINITY, f64::min);
    }
    let mut remaining = (n * m) as u64;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    while remaining > 0 {
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, &d) in dist.iter().enumerate() {
                if !done[v] && d < best {
                    best = d;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && demand[u - n] > 0 {
                target = u;
                break;
            }
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cost[[u, j]] + pot[u] - pot[v]).max(0.0);
                    if best + rc < dist[v] {
                        dist[v] = best + rc;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[[i, j]] == 0 {
                        continue;
                    }
                    let rc = (-cost[[i, j]] + pot[u] - pot[i]).max(0.0);
                    if best + rc < dist[i] {
                        dist[i] = best + rc;
                        prev[i] = u;
                    }
                }
            }
        }
        debug_assert!(
            target != usize::MAX,
            "transportation problem is always feasible"
        );
        let dt = dist[target];
        for v in 0..nodes {
            if dist[v] < dt {
                pot[v] += dist[v];
            } else {
                pot[v] += dt;
            }
        }
        // Bottleneck along the path back to a source with spare supply.
        let mut amount = demand[target - n];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                amount = amount.min(flow[[v, u - n]]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let source = v;
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[[u, v - n]] += amount;
            } else {
                flow[[v, u - n]] -= amount;
            }
            v = u;
        }
        supply[source] -= amount;
        demand[target - n] -= amount;
        remaining -= amount;
    }
    flow
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + it.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn. Returns the transport cost of the entropic plan
/// (square-rooted) and flags non-convergence instead of failing.
pub fn sinkhorn(
    a: &EmpiricalDist,
    b: &EmpiricalDist,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OtResult, OtError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(OtError::BadEpsilon(eps));
    }
    let cost = cost_matrix(a, b)?;
    let (n, m) = cost.dim();
    let (log_a, log_b) = ((1.0 / n as f64).ln(), (1.0 / m as f64).ln());
    let scaled = cost.mapv(|c| -c / eps);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut err = f64::INFINITY;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        for i in 0..n {
            let row = scaled.row(i);
            f[i] = eps * (log_a - logsumexp(row.iter().zip(&g).map(|(s, gj)| s + gj / eps)));
        }
        for j in 0..m {
            let col = scaled.column(j);
            g[j] = eps * (log_b - logsumexp(col.iter().zip(&f).map(|(s, fi)| s + fi / eps)));
        }
        // Columns are exact after the g-update; check the rows.
        err = (0..n)
            .map(|i| {
                let r: f64 = (0..m)
                    .map(|j| (scaled[[i, j]] + (f[i] + g[j]) / eps).exp())
                    .sum();
                (r - 1.0 / n as f64).abs()
            })
            .sum();
        if err < tol {
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| {
        (scaled[[i, j]] + (f[i] + g[j]) / eps).exp()
    });
    let distance = w2_of(&plan, &cost);
    Ok(OtResult {
        distance,
        plan: TransportPlan::new(plan),
        converged: err < tol,
        iterations: iters,
    })
}

/// Sinkhorn with the default relative epsilon schedule.
pub fn sinkhorn_default(a: &EmpiricalDist, b: &EmpiricalDist) -> Result<OtResult, OtError> {
    let cost = cost_matrix(a, b)?;
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    if max_cost == 0.0 {
        let (n, m) = cost.dim();
        let plan = Array2::from_elem((n, m), 1.0 / (n * m) as f64);
        return Ok(OtResult {
            distance: 0.0,
            plan: TransportPlan::new(plan),
            converged: true,
            iterations: 0,
        });
    }
    sinkhorn(a, b, EPS_REL * max_cost, SINKHORN_MAX_ITERS, SINKHORN_TOL)
}

/// Exact when small enough, entropic otherwise.
pub fn wasserstein(a: &EmpiricalDist, b: &EmpiricalDist) -> Result<OtResult, OtError> {
    if a.len() * b.len() <= EXACT_LIMIT {
        emd_exact(a, b)
    } else {
        sinkhorn_default(a, b)
    }
}

/// Negative W2; higher is better.
pub fn fitness(policy: &EmpiricalDist, demos: &EmpiricalDist) -> Result<f64, OtError> {
    Ok(-wasserstein(policy, demos)?.distance)
}
