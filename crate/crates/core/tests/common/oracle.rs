//! Independent reference computations shared by the oracle tests and the
//! acceptance suite.

use dail_core::neural::{DenseNet, GradBundle};
use dail_core::ot::{cost_matrix, EmpiricalDist};
use dail_core::policy::{minibatch_grads, PolicyState, PpoConfig};
use dail_core::rng::seeded;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sp(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Builtin reward assignments written out directly, without the expression tree.
pub fn ra_reference(name: &str, l: f64) -> f64 {
    match name {
        "gail" => sp(l),
        "airl" => l,
        "fairl" => -l * l.exp(),
        "gail_heuristic" => -sp(-l),
        "dail" => 0.5 * sig(l) * (l.tanh() + 1.0),
        "sigmoid_only" => sig(l),
        "half_tanh" => 0.5 * (l.tanh() + 1.0),
        "top2" => {
            let core = if l <= -0.8 {
                0.5 + 0.8 * l - sp(1.5 * (-l - 0.8)) / 1.5
            } else if l < 0.8 {
                0.5 + 0.8 * l
            } else {
                0.5 + 0.8 * 0.8 + sp(1.5 * (l - 0.8)) / 1.5
            };
            core.max(0.0).min(1.5)
        }
        "top3" => sp(l) * sig(1.5 * l) + 0.5 * gelu(l),
        "top4" => softsign(l) * sig(3.0 * l) * 0.5 * (l.tanh() + 1.0),
        "top5" => 0.5 * (softsign(l) + 1.0) * sig(3.0 * l),
        _ => unreachable!("{name}"),
    }
}

/// W2 between two uniform 3-point clouds by enumerating all matchings.
pub fn brute_force_w2(a: &EmpiricalDist, b: &EmpiricalDist) -> f64 {
    let c = cost_matrix(a, b).unwrap();
    assert_eq!((a.len(), b.len()), (3, 3));
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    perms
        .iter()
        .map(|p| (0..3).map(|i| c[[i, p[i]]]).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

pub fn random_cloud(n: usize, d: usize, rng: &mut impl rand::Rng) -> EmpiricalDist {
    EmpiricalDist::new(
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
            .collect(),
    )
    .unwrap()
}

/// Advantages as explicit sums of discounted TD residuals.
pub fn brute_gae(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |j: usize| if j + 1 < n { v[j + 1] } else { boot };
    let delta = |j: usize| r[j] + gamma * if d[j] { 0.0 } else { next_v(j) } - v[j];
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut coef = 1.0;
            for j in t..n {
                total += coef * delta(j);
                if d[j] {
                    break;
                }
                coef *= gamma * lambda;
            }
            total
        })
        .collect()
}

pub fn flat(g: &GradBundle) -> Vec<f64> {
    g.layers
        .iter()
        .flat_map(|l| {
            l.weight
                .iter()
                .chain(l.bias.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = seeded(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

/// Central differences of `f` over the parameters of `net`.
pub fn fd_grad(net: &DenseNet, f: impl Fn(&DenseNet) -> f64) -> Vec<f64> {
    let p0 = net.flat_params();
    let mut probe = net.clone();
    (0..p0.len())
        .map(|i| {
            let mut p = p0.clone();
            p[i] = p0[i] + H;
            probe.set_flat_params(&p).unwrap();
            let up = f(&probe);
            p[i] = p0[i] - H;
            probe.set_flat_params(&p).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

pub struct PolicyCase {
    pub policy: PolicyState,
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub old: Vec<f64>,
    pub adv: Vec<f64>,
    pub ret: Vec<f64>,
}

/// A random batch whose old log-probabilities sit `offset(i)` below the
/// current ones, which places each ratio inside or outside the clip range.
pub fn policy_case(seed: u64, offset: impl Fn(usize) -> f64) -> PolicyCase {
    let cfg = PpoConfig {
        hidden: vec![12, 12],
        ..PpoConfig::default()
    };
    let policy = PolicyState::new(4, 3, &cfg, seed).unwrap();
    let b = 10;
    let obs = randn(b, 4, 40 + seed);
    let mut r = seeded(50 + seed);
    let actions: Vec<usize> = (0..b).map(|_| r.gen_range(0..3)).collect();
    let logp = policy.log_probs(&obs).unwrap();
    let old = (0..b).map(|i| logp[[i, actions[i]]] - offset(i)).collect();
    let adv = (0..b).map(|_| r.sample(StandardNormal)).collect();
    let ret = (0..b).map(|_| r.sample(StandardNormal)).collect();
    PolicyCase {
        policy,
        obs,
        actions,
        old,
        adv,
        ret,
    }
}

fn total_loss(c: &PolicyCase, p: &PolicyState, clip: Option<f64>, vf: f64, ent: f64) -> f64 {
    let g = minibatch_grads(p, &c.obs, &c.actions, &c.old, &c.adv, &c.ret, clip, vf, ent).unwrap();
    g.policy_loss + vf * g.value_loss - ent * g.entropy
}

/// Worst relative error of the (actor, critic) gradients against finite differences.
pub fn policy_grad_errors(c: &PolicyCase, clip: Option<f64>, vf: f64, ent: f64) -> (f64, f64) {
    let g = minibatch_grads(
        &c.policy, &c.obs, &c.actions, &c.old, &c.adv, &c.ret, clip, vf, ent,
    )
    .unwrap();
    let num_actor = fd_grad(&c.policy.actor, |n| {
        let mut p = c.policy.clone();
        p.actor = n.clone();
        total_loss(c, &p, clip, vf, ent)
    });
    let num_critic = fd_grad(&c.policy.critic, |n| {
        let mut p = c.policy.clone();
        p.critic = n.clone();
        total_loss(c, &p, clip, vf, ent)
    });
    (
        max_rel_err(&flat(&g.actor), &num_actor),
        max_rel_err(&flat(&g.critic), &num_critic),
    )
}

/// Mixed clipped/unclipped ratios for the PPO surrogate.
pub fn clip_pattern(i: usize) -> f64 {
    match i % 3 {
        0 => 0.05,
        1 => 0.6,
        _ => -0.6,
    }
}
