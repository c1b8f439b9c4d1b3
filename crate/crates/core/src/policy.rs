//! Actor-critic policy optimization: PPO with a clipped surrogate, and A2C.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{ActionChoice, EnvState, Policy, RolloutBatch};
use crate::neural::{clip_global_norm, AdamState, DenseNet, GradBundle, NeuralError};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("non-finite {quantity} during policy update")]
    NonFinite { quantity: &'static str },
    #[error("batch of {batch} transitions cannot be split into {minibatches} minibatches")]
    Minibatch { batch: usize, minibatches: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ppo,
    A2c,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub algo: Algo,
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub anneal_lr: bool,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            algo: Algo::Ppo,
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            vf_coef: 0.5,
            ent_coef: 0.01,
            epochs: 4,
            minibatches: 8,
            lr: 5e-3,
            anneal_lr: true,
            max_grad_norm: 0.5,
            n_envs: 8,
            steps_per_env: 128,
            hidden: vec![64, 64],
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn a2c() -> Self {
        PpoConfig {
            algo: Algo::A2c,
            vf_coef: 5.0,
            epochs: 1,
            max_grad_norm: 10.0,
            steps_per_env: 16,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0) {
            return Err("clip epsilon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and lambda must lie in [0, 1]".into());
        }
        if self.minibatches == 0 || self.n_envs == 0 || self.steps_per_env == 0 {
            return Err("minibatches, env count and steps per env must be positive".into());
        }
        if (self.n_envs * self.steps_per_env) % self.minibatches != 0 {
            return Err(format!(
                "batch of {} does not split into {} minibatches",
                self.n_envs * self.steps_per_env,
                self.minibatches
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.steps_per_env
    }
}

/// Actor (action logits) and critic (state value) networks with their optimizers.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(hidden);
    w.push(output);
    w
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Entropy of a categorical distribution given its log-probabilities.
fn entropy_of(logp: ndarray::ArrayView1<f64>) -> f64 {
    -logp
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                l.exp() * l
            }
        })
        .sum::<f64>()
}

impl PolicyState {
    pub fn new(
        obs_dim: usize,
        n_actions: usize,
        cfg: &PpoConfig,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        let actor = DenseNet::init(
            &widths(obs_dim, &cfg.hidden, n_actions),
            crate::rng::derive_seed(seed, 0),
        )?;
        let critic = DenseNet::init(
            &widths(obs_dim, &cfg.hidden, 1),
            crate::rng::derive_seed(seed, 1),
        )?;
        let actor_adam = AdamState::new(&actor, cfg.lr);
        let critic_adam = AdamState::new(&critic, cfg.lr);
        Ok(PolicyState {
            actor,
            critic,
            actor_adam,
            critic_adam,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn log_probs(&self, obs: &Array2<f64>) -> Result<Array2<f64>, NeuralError> {
        Ok(log_softmax(&self.actor.predict(obs)?))
    }

    pub fn values(&self, obs: &Array2<f64>) -> Result<Vec<f64>, NeuralError> {
        Ok(self.critic.predict(obs)?.column(0).to_vec())
    }

    pub fn params_finite(&self) -> bool {
        self.actor.params_finite() && self.critic.params_finite()
    }

    /// Actor then critic parameters, flattened.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.actor.flat_params();
        p.extend(self.critic.flat_params());
        p
    }
}

impl Policy for PolicyState {
    fn act_batch(
        &self,
        obs: &Array2<f64>,
        _states: &[EnvState],
        rng: &mut Rng,
    ) -> Vec<ActionChoice> {
        let logp = self
            .log_probs(obs)
            .expect("observation width matches the actor");
        let values = self
            .values(obs)
            .expect("observation width matches the critic");
        logp.rows()
            .into_iter()
            .zip(values)
            .map(|(row, value)| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut action = row.len() - 1;
                for (a, &l) in row.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        action = a;
                        break;
                    }
                }
                ActionChoice {
                    action,
                    log_prob: row[action],
                    value,
                }
            })
            .collect()
    }
}

/// Acts by the most probable action (lowest index on ties).
pub struct GreedyPolicy<'a>(pub &'a PolicyState);

impl Policy for GreedyPolicy<'_> {
    fn act_batch(
        &self,
        obs: &Array2<f64>,
        _states: &[EnvState],
        _rng: &mut Rng,
    ) -> Vec<ActionChoice> {
        let logp = self
            .0
            .log_probs(obs)
            .expect("observation width matches the actor");
        logp.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (a, &l) in row.iter().enumerate() {
                    if l > row[best] {
                        best = a;
                    }
                }
                ActionChoice {
                    action: best,
                    log_prob: row[best],
                    value: 0.0,
                }
            })
            .collect()
    }
}

/// Generalized advantage estimates and value targets (`advantages + values`).
///
/// `dones[t]` marks that the episode ended after step `t`, cutting both the
/// bootstrap and the advantage recursion.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(
        values.len() == n && dones.len() == n,
        "gae inputs differ in length"
    );
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Flattened training data for one policy update.
#[derive(Debug, Clone)]
pub struct UpdateBatch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl UpdateBatch {
    /// Runs GAE on each segment of `batch` using its assigned rewards.
    pub fn from_rollout(
        batch: &RolloutBatch,
        policy: &PolicyState,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self, PolicyError> {
        let bootstrap = policy.values(&batch.last_obs)?;
        let n = batch.len();
        let d = batch.last_obs.ncols();
        let mut obs = Array2::zeros((n, d));
        let mut actions = Vec::with_capacity(n);
        let mut old_log_probs = Vec::with_capacity(n);
        let mut advantages = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);
        let mut row = 0;
        for (seg, boot) in batch.segments.iter().zip(bootstrap) {
            let rewards: Vec<f64> = seg.iter().map(|t| t.assigned_reward).collect();
            let values: Vec<f64> = seg.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = seg.iter().map(|t| t.done).collect();
            let (a, r) = gae(&rewards, &values, &dones, boot, gamma, lambda);
            for t in seg {
                obs.row_mut(row)
                    .assign(&ndarray::ArrayView1::from(&t.obs[..]));
                actions.push(t.action);
                old_log_probs.push(t.log_prob);
                row += 1;
            }
            advantages.extend(a);
            returns.extend(r);
        }
        Ok(UpdateBatch {
            obs,
            actions,
            old_log_probs,
            advantages,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Standardizes advantages; an all-zero batch stays all-zero.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.iter().all(|&a| a == 0.0) {
        return vec![0.0; adv.len()];
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub steps: usize,
}

/// Loss and gradients of one minibatch.
pub struct MinibatchGrads {
    pub actor: GradBundle,
    pub critic: GradBundle,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Surrogate, value and entropy terms for a minibatch.
///
/// With `clip_eps = None` the policy term is the plain advantage-weighted
/// log-likelihood (A2C); otherwise the PPO clipped surrogate.
pub fn minibatch_grads(
    policy: &PolicyState,
    obs: &Array2<f64>,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    clip_eps: Option<f64>,
    vf_coef: f64,
    ent_coef: f64,
) -> Result<MinibatchGrads, PolicyError> {
    let b = actions.len();
    let bf = b as f64;
    let (logits, actor_cache) = policy.actor.forward(obs)?;
    let (vout, critic_cache) = policy.critic.forward(obs)?;
    let logp = log_softmax(&logits);
    let mut g_logits = Array2::zeros(logits.raw_dim());
    let mut g_values = Array2::zeros((b, 1));
    let (mut pl, mut vl, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for i in 0..b {
        let row = logp.row(i);
        let a = actions[i];
        let adv = advantages[i];
        // d loss / d logp(a)
        let coef = match clip_eps {
            Some(eps) => {
                let log_ratio = row[a] - old_log_probs[i];
                let ratio = log_ratio.exp();
                let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                if (ratio - 1.0).abs() > eps {
                    clipped += 1;
                }
                kl += (ratio - 1.0) - log_ratio;
                let unclipped = ratio * adv;
                let surrogate = clipped_ratio * adv;
                pl -= unclipped.min(surrogate);
                if unclipped <= surrogate {
                    -ratio * adv / bf
                } else {
                    0.0
                }
            }
            None => {
                pl -= row[a] * adv;
                -adv / bf
            }
        };
        let h = entropy_of(row);
        ent += h;
        for (j, &l) in row.iter().enumerate() {
            let p = l.exp();
            let onehot = if j == a { 1.0 } else { 0.0 };
            // policy term plus entropy bonus: d(-c H)/dz_j = c p_j (log p_j + H)
            g_logits[[i, j]] = coef * (onehot - p) + ent_coef / bf * p * (l + h);
        }
        let v = vout[[i, 0]];
        vl += (v - returns[i]).powi(2);
        g_values[[i, 0]] = 2.0 * vf_coef * (v - returns[i]) / bf;
    }
    let (pl, vl, ent) = (pl / bf, vl / bf, ent / bf);
    if !(pl.is_finite() && vl.is_finite() && ent.is_finite()) {
        let quantity = if !pl.is_finite() {
            "policy loss"
        } else if !vl.is_finite() {
            "value loss"
        } else {
            "entropy"
        };
        return Err(PolicyError::NonFinite { quantity });
    }
    Ok(MinibatchGrads {
        actor: policy.actor.backward(&actor_cache, &g_logits)?,
        critic: policy.critic.backward(&critic_cache, &g_values)?,
        policy_loss: pl,
        value_loss: vl,
        entropy: ent,
        clip_fraction: clipped as f64 / bf,
        approx_kl: kl / bf,
    })
}

fn run_update(
    policy: &mut PolicyState,
    batch: &UpdateBatch,
    cfg: &PpoConfig,
    lr_frac: f64,
    epochs: usize,
    clip_eps: Option<f64>,
    rng: &mut Rng,
) -> Result<UpdateStats, PolicyError> {
    let n = batch.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    if cfg.minibatches == 0 || n % cfg.minibatches != 0 {
        return Err(PolicyError::Minibatch {
            batch: n,
            minibatches: cfg.minibatches,
        });
    }
    let lr = if cfg.anneal_lr {
        cfg.lr * lr_frac
    } else {
        cfg.lr
    };
    policy.actor_adam.lr = lr;
    policy.critic_adam.lr = lr;
    let advantages = if cfg.normalize_advantages {
        normalize_advantages(&batch.advantages)
    } else {
        batch.advantages.clone()
    };
    let mb = n / cfg.minibatches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        for k in 0..cfg.minibatches {
            let idx = &order[k * mb..(k + 1) * mb];
            let obs = batch.obs.select(Axis(0), idx);
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
            let mut g = minibatch_grads(
                policy,
                &obs,
                &actions,
                &pick(&batch.old_log_probs),
                &pick(&advantages),
                &pick(&batch.returns),
                clip_eps,
                cfg.vf_coef,
                cfg.ent_coef,
            )?;
            clip_global_norm(&mut [&mut g.actor, &mut g.critic], cfg.max_grad_norm);
            if !(g.actor.params_finite() && g.critic.params_finite()) {
                return Err(PolicyError::NonFinite {
                    quantity: "gradient",
                });
            }
            policy.actor_adam.apply(&mut policy.actor, &g.actor);
            policy.critic_adam.apply(&mut policy.critic, &g.critic);
            stats.policy_loss += g.policy_loss;
            stats.value_loss += g.value_loss;
            stats.entropy += g.entropy;
            stats.clip_fraction += g.clip_fraction;
            stats.approx_kl += g.approx_kl;
            stats.steps += 1;
        }
    }
    if stats.steps > 0 {
        let s = stats.steps as f64;
        stats.policy_loss /= s;
        stats.value_loss /= s;
        stats.entropy /= s;
        stats.clip_fraction /= s;
        stats.approx_kl /= s;
    }
    Ok(stats)
}

/// `epochs x minibatches` Adam steps on the clipped surrogate, value and entropy terms.
///
/// `lr_frac` scales the learning rate when annealing is on (1 at the start of
/// training, approaching 0 at the end).
pub fn ppo_update(
    policy: &mut PolicyState,
    batch: &UpdateBatch,
    cfg: &PpoConfig,
    lr_frac: f64,
    rng: &mut Rng,
) -> Result<UpdateStats, PolicyError> {
    run_update(
        policy,
        batch,
        cfg,
        lr_frac,
        cfg.epochs,
        Some(cfg.clip_eps),
        rng,
    )
}

/// One pass over the batch with the unclipped advantage-weighted log-likelihood.
pub fn a2c_update(
    policy: &mut PolicyState,
    batch: &UpdateBatch,
    cfg: &PpoConfig,
    lr_frac: f64,
    rng: &mut Rng,
) -> Result<UpdateStats, PolicyError> {
    run_update(policy, batch, cfg, lr_frac, 1, None, rng)
}

/// Dispatches on `cfg.algo`.
pub fn policy_update(
    policy: &mut PolicyState,
    batch: &UpdateBatch,
    cfg: &PpoConfig,
    lr_frac: f64,
    rng: &mut Rng,
) -> Result<UpdateStats, PolicyError> {
    match cfg.algo {
        Algo::Ppo => ppo_update(policy, batch, cfg, lr_frac, rng),
        Algo::A2c => a2c_update(policy, batch, cfg, lr_frac, rng),
    }
}

/// Mean categorical entropy of the policy over `states`, in nats.
pub fn policy_entropy(policy: &PolicyState, states: &Array2<f64>) -> Result<f64, NeuralError> {
    let logp = policy.log_probs(states)?;
    Ok(mean_entropy(&logp))
}

pub fn mean_entropy(logp: &Array2<f64>) -> f64 {
    let n = logp.nrows();
    if n == 0 {
        return 0.0;
    }
    logp.rows().into_iter().map(entropy_of).sum::<f64>() / n as f64
}
