//! The f-divergence adversarial imitation loop.
//!
//! Each iteration: roll out the current policy, update the discriminator on
//! demos versus the fresh rollout, turn the updated discriminator's logits
//! into rewards with the reward-assignment function, run GAE on those
//! rewards, and take a policy step. Environment rewards are recorded for
//! reporting only and never reach the learner.

use serde::{Deserialize, Serialize};

use crate::disc::{to_matrix, DiscConfig, DiscState};
use crate::envs::DemoSet;
use crate::envs::{
    evaluate_episodes, Env, EnvError, EpisodeStats, RolloutBatch, UniformPolicy, VecEnv,
};
use crate::neural::NeuralError;
use crate::ot::{equalize, wasserstein, EmpiricalDist, OtError};
use crate::policy::{
    mean_entropy, policy_update, PolicyError, PolicyState, PpoConfig, UpdateBatch,
};
use crate::ra::{eval_ra, GuardStats, RaFunction};
use crate::rng::{child, derive_seed};

/// Finished episodes averaged into the per-iteration return metric.
pub const RETURN_WINDOW: usize = 16;

/// Largest sample size handed to the OT solver.
pub const OT_SAMPLE_CAP: usize = 512;

mod stream {
    pub const ACTOR: u64 = 1;
    pub const DISC: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const DISC_TRAIN: u64 = 4;
    pub const UPDATE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
}

#[derive(Debug, thiserror::Error)]
pub enum AilError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {quantity} at iteration {iteration}")]
    NonFinite { iteration: usize, quantity: String },
    #[error("degenerate baselines: random return equals expert return ({0})")]
    DegenerateBaselines(f64),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ot(#[from] OtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AilConfig {
    pub env_id: String,
    pub ra: RaFunction,
    pub policy: PpoConfig,
    pub disc: DiscConfig,
    pub iterations: usize,
    pub eval_episodes: usize,
    pub fixed_length: bool,
}

impl AilConfig {
    pub fn env(&self) -> Result<Env, AilError> {
        Ok(Env::from_id(&self.env_id)?.with_fixed_length(self.fixed_length))
    }

    pub fn validate(&self) -> Result<(), AilError> {
        if self.iterations == 0 {
            return Err(AilError::Config(
                "at least one iteration is required".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(AilError::Config(
                "at least one evaluation episode is required".into(),
            ));
        }
        self.policy.validate().map_err(AilError::Config)?;
        self.env()?.validate()?;
        Ok(())
    }

    /// Environment steps consumed by training.
    pub fn total_steps(&self) -> usize {
        self.iterations * self.policy.batch_size()
    }
}

/// Five-number summary plus mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Summary {
            min: v[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iteration: usize,
    /// Mean env return of the last [`RETURN_WINDOW`] finished episodes; before
    /// any episode has finished, the mean partial return of the running ones.
    pub env_return: f64,
    pub entropy: f64,
    pub disc_loss: f64,
    pub disc_penalty: f64,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub logits: Summary,
    pub guard_count: u64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AilResult {
    pub policy: PolicyState,
    pub disc: DiscState,
    pub wasserstein: f64,
    pub metrics: Vec<IterMetrics>,
    /// Mean env return over the evaluation episodes.
    pub eval_return: f64,
    pub eval_success: f64,
    /// Mean action entropy over the evaluation states.
    pub eval_entropy: f64,
    /// Discriminator logits (estimated log density ratios) on the evaluation pairs.
    pub eval_logits: Vec<f64>,
    pub eval_pairs: Vec<Vec<f64>>,
}

/// Rewards for a batch of logits.
pub fn assign_rewards(ra: &RaFunction, logits: &[f64]) -> (Vec<f64>, GuardStats) {
    eval_ra(ra, logits)
}

/// Min-max scaling between random and expert performance.
pub fn normalized_return(ret: f64, random_ret: f64, expert_ret: f64) -> Result<f64, AilError> {
    if expert_ret == random_ret {
        return Err(AilError::DegenerateBaselines(expert_ret));
    }
    Ok((ret - random_ret) / (expert_ret - random_ret))
}

fn check_finite(values: &[f64], iteration: usize, quantity: &str) -> Result<(), AilError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AilError::NonFinite {
            iteration,
            quantity: quantity.to_string(),
        })
    }
}

fn write_rewards(batch: &mut RolloutBatch, rewards: &[f64]) {
    for (t, &r) in batch.segments.iter_mut().flatten().zip(rewards) {
        t.assigned_reward = r;
    }
}

/// Runs the imitation loop and scores the final policy by W2 to the demos.
pub fn run_fail(cfg: &AilConfig, demos: &DemoSet, seed: u64) -> Result<AilResult, AilError> {
    cfg.validate()?;
    run_fail_in(cfg, &cfg.env()?, demos, seed)
}

/// [`run_fail`] on an explicitly constructed environment, which replaces the
/// one named by `cfg.env_id`.
pub fn run_fail_in(
    cfg: &AilConfig,
    env: &Env,
    demos: &DemoSet,
    seed: u64,
) -> Result<AilResult, AilError> {
    cfg.validate()?;
    env.validate()?;
    if demos.is_empty() {
        return Err(AilError::Config("demo set is empty".into()));
    }
    let env = env.clone();
    demos.check_env(&env)?;
    let n_actions = env.n_actions();
    let fdim = env.feature_dim();
    let expert = to_matrix(&demos.sa_features(n_actions), fdim);

    let mut policy = PolicyState::new(
        env.obs_dim(),
        n_actions,
        &cfg.policy,
        derive_seed(seed, stream::ACTOR),
    )?;
    let mut disc = DiscState::new(fdim, cfg.disc.clone(), derive_seed(seed, stream::DISC))?;
    let mut env_rng = child(seed, stream::ROLLOUT);
    let mut disc_rng = child(seed, stream::DISC_TRAIN);
    let mut update_rng = child(seed, stream::UPDATE);
    let mut venv = VecEnv::new(env.clone(), cfg.policy.n_envs, &mut env_rng);

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut recent = std::collections::VecDeque::with_capacity(RETURN_WINDOW);
    for it in 0..cfg.iterations {
        let mut batch = venv.run(&policy, cfg.policy.steps_per_env, &mut env_rng)?;
        let pairs = to_matrix(&batch.sa_features(n_actions), fdim);

        let dstats = disc.train(&expert, &pairs, &mut disc_rng)?;
        if !disc.net.params_finite() {
            return Err(AilError::NonFinite {
                iteration: it,
                quantity: "discriminator parameters".into(),
            });
        }
        let logits = disc.logits(&pairs)?;
        check_finite(&logits, it, "discriminator logits")?;
        let (rewards, guards) = assign_rewards(&cfg.ra, &logits);
        check_finite(&rewards, it, "assigned rewards")?;
        write_rewards(&mut batch, &rewards);

        let update =
            UpdateBatch::from_rollout(&batch, &policy, cfg.policy.gamma, cfg.policy.gae_lambda)?;
        check_finite(&update.advantages, it, "advantages")?;
        let lr_frac = 1.0 - it as f64 / cfg.iterations as f64;
        let ustats = policy_update(&mut policy, &update, &cfg.policy, lr_frac, &mut update_rng)?;
        if !policy.params_finite() {
            return Err(AilError::NonFinite {
                iteration: it,
                quantity: "policy parameters".into(),
            });
        }

        let entropy = mean_entropy(&policy.log_probs(&update.obs)?);
        for &r in &batch.episode_returns {
            if recent.len() == RETURN_WINDOW {
                recent.pop_front();
            }
            recent.push_back(r);
        }
        let env_return = if recent.is_empty() {
            let running = venv.running_returns();
            running.iter().sum::<f64>() / running.len() as f64
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        let rs = Summary::of(&rewards);
        let m = IterMetrics {
            iteration: it,
            env_return,
            entropy,
            disc_loss: dstats.mean_bce,
            disc_penalty: dstats.mean_penalty,
            reward_mean: rs.mean,
            reward_min: rs.min,
            reward_max: rs.max,
            logits: Summary::of(&logits),
            guard_count: guards.total(),
            clip_fraction: ustats.clip_fraction,
            value_loss: ustats.value_loss,
        };
        check_finite(
            &[
                m.env_return,
                m.entropy,
                m.disc_loss,
                m.disc_penalty,
                m.clip_fraction,
                m.value_loss,
            ],
            it,
            "training statistics",
        )?;
        metrics.push(m);
    }

    let mut eval_rng = child(seed, stream::EVAL);
    let eval = evaluate_episodes(&env, &policy, cfg.eval_episodes, &mut eval_rng)?;
    let obs = to_matrix(
        &eval
            .pairs
            .iter()
            .map(|p| p[..env.obs_dim()].to_vec())
            .collect::<Vec<_>>(),
        env.obs_dim(),
    );
    let eval_entropy = mean_entropy(&policy.log_probs(&obs)?);
    let eval_logits = disc.logits(&to_matrix(&eval.pairs, fdim))?;

    let mut sub_rng = child(seed, stream::SUBSAMPLE);
    let a = EmpiricalDist::new(eval.pairs.clone())?;
    let b = EmpiricalDist::new(demos.sa_features(n_actions))?;
    let (a, b) = equalize(&a, &b, OT_SAMPLE_CAP, &mut sub_rng);
    let w = wasserstein(&a, &b)?.distance;

    Ok(AilResult {
        policy,
        disc,
        wasserstein: w,
        metrics,
        eval_return: eval.mean_return(),
        eval_success: eval.success_rate(),
        eval_entropy,
        eval_logits,
        eval_pairs: eval.pairs,
    })
}

/// W2 between uniformly random behaviour and the demos, measured the same
/// way as the final score of [`run_fail`].
pub fn random_policy_w2(cfg: &AilConfig, demos: &DemoSet, seed: u64) -> Result<f64, AilError> {
    cfg.validate()?;
    let env = cfg.env()?;
    demos.check_env(&env)?;
    let uniform = UniformPolicy {
        n_actions: env.n_actions(),
    };
    let eval = evaluate_episodes(
        &env,
        &uniform,
        cfg.eval_episodes,
        &mut child(seed, stream::EVAL),
    )?;
    let a = EmpiricalDist::new(eval.pairs)?;
    let b = EmpiricalDist::new(demos.sa_features(env.n_actions()))?;
    let (a, b) = equalize(&a, &b, OT_SAMPLE_CAP, &mut child(seed, stream::SUBSAMPLE));
    Ok(wasserstein(&a, &b)?.distance)
}

/// Plain RL on the environment's own rewards; the reference point for how
/// well the policy optimizer can do on a task, not part of imitation.
pub fn run_true_reward(
    env: &Env,
    cfg: &PpoConfig,
    iterations: usize,
    eval_episodes: usize,
    seed: u64,
) -> Result<(PolicyState, EpisodeStats), AilError> {
    cfg.validate().map_err(AilError::Config)?;
    let mut policy = PolicyState::new(
        env.obs_dim(),
        env.n_actions(),
        cfg,
        derive_seed(seed, stream::ACTOR),
    )?;
    let mut env_rng = child(seed, stream::ROLLOUT);
    let mut update_rng = child(seed, stream::UPDATE);
    let mut venv = VecEnv::new(env.clone(), cfg.n_envs, &mut env_rng);
    for it in 0..iterations {
        let mut batch = venv.run(&policy, cfg.steps_per_env, &mut env_rng)?;
        for t in batch.segments.iter_mut().flatten() {
            t.assigned_reward = t.env_reward;
        }
        let update = UpdateBatch::from_rollout(&batch, &policy, cfg.gamma, cfg.gae_lambda)?;
        let lr_frac = 1.0 - it as f64 / iterations as f64;
        policy_update(&mut policy, &update, cfg, lr_frac, &mut update_rng)?;
    }
    let eval = evaluate_episodes(env, &policy, eval_episodes, &mut child(seed, stream::EVAL))?;
    Ok((policy, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ra::{named_ra, RaExpr, RaSource};

    #[test]
    fn assign_rewards_examples() {
        let (r, g) = assign_rewards(&named_ra("dail").unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(r, vec![0.25; 3]);
        assert_eq!(g.total(), 0);
        let l = [-3.0, 0.5, 7.25];
        assert_eq!(assign_rewards(&named_ra("airl").unwrap(), &l).0, l.to_vec());
        let (r, _) = assign_rewards(&named_ra("gail").unwrap(), &[-5.0]);
        assert!((r[0] - 0.006_715_348_489_118_068).abs() < 1e-15);
    }

    #[test]
    fn normalized_return_examples() {
        assert_eq!(normalized_return(10.0, 2.0, 10.0).unwrap(), 1.0);
        assert_eq!(normalized_return(2.0, 2.0, 10.0).unwrap(), 0.0);
        assert_eq!(normalized_return(6.0, 2.0, 10.0).unwrap(), 0.5);
        assert!(normalized_return(12.0, 2.0, 10.0).unwrap() > 1.0);
        assert!(matches!(
            normalized_return(1.0, 3.0, 3.0),
            Err(AilError::DegenerateBaselines(_))
        ));
    }

    #[test]
    fn summary_quantiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(
            (s.min, s.q25, s.median, s.q75, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        assert_eq!(Summary::of(&[]), Summary::default());
    }

    #[test]
    fn config_validation() {
        let cfg = AilConfig {
            env_id: "grid4".into(),
            ra: RaFunction::new("zero", RaExpr::Const(0.0), RaSource::Builtin),
            policy: PpoConfig::default(),
            disc: DiscConfig::default(),
            iterations: 0,
            eval_episodes: 16,
            fixed_length: false,
        };
        assert!(matches!(cfg.validate(), Err(AilError::Config(_))));
        let bad_env = AilConfig {
            env_id: "maze".into(),
            iterations: 1,
            ..cfg
        };
        assert!(matches!(bad_env.validate(), Err(AilError::Env(_))));
    }
}
