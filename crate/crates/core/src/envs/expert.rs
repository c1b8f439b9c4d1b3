use ndarray::Array2;

use super::rollout::{ActionChoice, Policy};
use super::{Env, EnvState};
use crate::rng::Rng;

/// Ties closer than this go to the lowest action index.
const TIE_TOL: f64 = 1e-9;

/// Deterministic policy indexed by tabular state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub actions: Vec<usize>,
}

impl Policy for TabularPolicy {
    fn act_batch(
        &self,
        _obs: &Array2<f64>,
        states: &[EnvState],
        _rng: &mut Rng,
    ) -> Vec<ActionChoice> {
        states
            .iter()
            .map(|s| ActionChoice {
                action: self.actions[s.index],
                log_prob: 0.0,
                value: 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExpertSolution {
    pub policy: TabularPolicy,
    pub values: Vec<f64>,
    /// Sup-norm Bellman residual at termination.
    pub residual: f64,
    pub sweeps: usize,
}

impl ExpertSolution {
    /// Optimal discounted value of the start state.
    pub fn start_value(&self, env: &Env) -> f64 {
        self.values[env.start_index()]
    }
}

fn q_value(env: &Env, values: &[f64], s: usize, a: usize) -> f64 {
    let gamma = env.gamma();
    env.transitions(s, a)
        .iter()
        .map(|&(p, next, r, terminal)| p * (r + if terminal { 0.0 } else { gamma * values[next] }))
        .sum()
}

fn is_absorbing_goal(env: &Env, s: usize) -> bool {
    match &env.kind {
        super::EnvKind::Grid(g) => !env.fixed_length && s == g.goal_index(),
        super::EnvKind::Chain(_) => false,
    }
}

/// Value iteration until the sup-norm residual drops below `tol`, then a
/// greedy policy with ties broken toward the lowest action index.
pub fn value_iteration_expert(env: &Env, tol: f64) -> ExpertSolution {
    let n = env.n_states();
    let n_actions = env.n_actions();
    let mut values = vec![0.0; n];
    let mut sweeps = 0;
    let residual = loop {
        sweeps += 1;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if is_absorbing_goal(env, s) {
                    return 0.0;
                }
                (0..n_actions)
                    .map(|a| q_value(env, &values, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let residual = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if residual < tol {
            // residual of the returned values
            let r = (0..n)
                .filter(|&s| !is_absorbing_goal(env, s))
                .map(|s| {
                    let best = (0..n_actions)
                        .map(|a| q_value(env, &values, s, a))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (best - values[s]).abs()
                })
                .fold(0.0, f64::max);
            break r;
        }
    };
    let actions = (0..n)
        .map(|s| {
            let qs: Vec<f64> = (0..n_actions)
                .map(|a| q_value(env, &values, s, a))
                .collect();
            let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            qs.iter().position(|&q| q >= best - TIE_TOL).unwrap_or(0)
        })
        .collect();
    ExpertSolution {
        policy: TabularPolicy { actions },
        values,
        residual,
        sweeps,
    }
}
