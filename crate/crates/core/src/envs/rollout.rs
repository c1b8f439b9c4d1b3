use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvState};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChoice {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Anything that picks actions for a batch of observations.
pub trait Policy {
    fn act_batch(&self, obs: &Array2<f64>, states: &[EnvState], rng: &mut Rng)
        -> Vec<ActionChoice>;
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl Policy for UniformPolicy {
    fn act_batch(
        &self,
        obs: &Array2<f64>,
        _states: &[EnvState],
        rng: &mut Rng,
    ) -> Vec<ActionChoice> {
        let lp = -(self.n_actions as f64).ln();
        (0..obs.nrows())
            .map(|_| ActionChoice {
                action: rng.gen_range(0..self.n_actions),
                log_prob: lp,
                value: 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub env_reward: f64,
    /// Reward from the reward-assignment function; zero until assigned.
    pub assigned_reward: f64,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
}

/// State features concatenated with a one-hot action.
pub fn sa_features(obs: &[f64], action: usize, n_actions: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + n_actions);
    v.extend_from_slice(obs);
    v.extend((0..n_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
    v
}

/// `steps_per_env` consecutive transitions from each of several environment copies.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub segments: Vec<Vec<Transition>>,
    /// Observations after the last step, for bootstrapping.
    pub last_obs: Array2<f64>,
    /// Undiscounted env returns of episodes that finished during the batch.
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flatten()
    }

    pub fn sa_features(&self, n_actions: usize) -> Vec<Vec<f64>> {
        self.transitions()
            .map(|t| sa_features(&t.obs, t.action, n_actions))
            .collect()
    }
}

/// Parallel copies of one environment whose episodes persist across batches.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub env: Env,
    states: Vec<EnvState>,
    running_returns: Vec<f64>,
    running_success: Vec<bool>,
}

impl VecEnv {
    pub fn new(env: Env, n_envs: usize, rng: &mut Rng) -> Self {
        let states = (0..n_envs).map(|_| env.reset(rng)).collect();
        VecEnv {
            env,
            states,
            running_returns: vec![0.0; n_envs],
            running_success: vec![false; n_envs],
        }
    }

    pub fn n_envs(&self) -> usize {
        self.states.len()
    }

    /// Env return accumulated so far by each in-progress episode.
    pub fn running_returns(&self) -> &[f64] {
        &self.running_returns
    }

    pub fn observations(&self) -> Array2<f64> {
        let d = self.env.obs_dim();
        let mut obs = Array2::zeros((self.states.len(), d));
        for (i, s) in self.states.iter().enumerate() {
            let mut row = obs.row_mut(i);
            self.env
                .observe_into(s, row.as_slice_mut().expect("rows are contiguous"));
        }
        obs
    }

    pub fn run<P: Policy + ?Sized>(
        &mut self,
        policy: &P,
        steps_per_env: usize,
        rng: &mut Rng,
    ) -> Result<RolloutBatch, EnvError> {
        let n = self.states.len();
        let mut segments: Vec<Vec<Transition>> =
            (0..n).map(|_| Vec::with_capacity(steps_per_env)).collect();
        let mut episode_returns = Vec::new();
        let mut episode_successes = Vec::new();
        let mut obs = self.observations();
        for _ in 0..steps_per_env {
            let choices = policy.act_batch(&obs, &self.states, rng);
            for i in 0..n {
                let choice = choices[i];
                let out = self.env.step(&self.states[i], choice.action, rng)?;
                self.running_returns[i] += out.reward;
                self.running_success[i] |= out.success;
                segments[i].push(Transition {
                    obs: obs.row(i).to_vec(),
                    action: choice.action,
                    env_reward: out.reward,
                    assigned_reward: 0.0,
                    done: out.done,
                    log_prob: choice.log_prob,
                    value: choice.value,
                });
                if out.done {
                    episode_returns.push(self.running_returns[i]);
                    episode_successes.push(self.running_success[i]);
                    self.running_returns[i] = 0.0;
                    self.running_success[i] = false;
                    self.states[i] = self.env.reset(rng);
                } else {
                    self.states[i] = out.next;
                }
            }
            obs = self.observations();
        }
        Ok(RolloutBatch {
            segments,
            last_obs: obs,
            episode_returns,
            episode_successes,
        })
    }
}

/// Rollout over `n_envs` copies, `steps_per_env` steps each, from fresh resets.
pub fn rollout_batch<P: Policy + ?Sized>(
    env: &Env,
    policy: &P,
    n_envs: usize,
    steps_per_env: usize,
    rng: &mut Rng,
) -> Result<RolloutBatch, EnvError> {
    VecEnv::new(env.clone(), n_envs, rng).run(policy, steps_per_env, rng)
}

/// Exactly `n_steps` transitions from a single environment, resetting on `done`.
pub fn rollout<P: Policy + ?Sized>(
    env: &Env,
    policy: &P,
    n_steps: usize,
    fixed_length: bool,
    rng: &mut Rng,
) -> Result<Vec<Transition>, EnvError> {
    let env = env.clone().with_fixed_length(fixed_length);
    let mut batch = rollout_batch(&env, policy, 1, n_steps, rng)?;
    Ok(batch.segments.pop().unwrap_or_default())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub successes: Vec<bool>,
    /// State-action features of every visited step, episode by episode.
    pub pairs: Vec<Vec<f64>>,
}

impl EpisodeStats {
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.successes.is_empty() {
            return 0.0;
        }
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len() as f64
    }
}

/// Runs `n_episodes` complete episodes side by side.
pub fn evaluate_episodes<P: Policy + ?Sized>(
    env: &Env,
    policy: &P,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<EpisodeStats, EnvError> {
    let d = env.obs_dim();
    let n_actions = env.n_actions();
    let mut states: Vec<EnvState> = (0..n_episodes).map(|_| env.reset(rng)).collect();
    let mut active: Vec<usize> = (0..n_episodes).collect();
    let mut returns = vec![0.0; n_episodes];
    let mut lengths = vec![0usize; n_episodes];
    let mut successes = vec![false; n_episodes];
    let mut pairs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_episodes];
    while !active.is_empty() {
        let mut obs = Array2::zeros((active.len(), d));
        let act_states: Vec<EnvState> = active.iter().map(|&i| states[i]).collect();
        for (row, s) in act_states.iter().enumerate() {
            let mut r = obs.row_mut(row);
            env.observe_into(s, r.as_slice_mut().expect("rows are contiguous"));
        }
        let choices = policy.act_batch(&obs, &act_states, rng);
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let a = choices[row].action;
            pairs[i].push(sa_features(obs.row(row).as_slice().unwrap(), a, n_actions));
            let out = env.step(&states[i], a, rng)?;
            returns[i] += out.reward;
            lengths[i] += 1;
            successes[i] |= out.success;
            states[i] = out.next;
            if !out.done {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(EpisodeStats {
        returns,
        lengths,
        successes,
        pairs: pairs.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::value_iteration_expert;
    use crate::rng::seeded;

    #[test]
    fn zero_steps_is_empty() {
        let env = Env::from_id("grid7").unwrap();
        let p = UniformPolicy { n_actions: 4 };
        assert!(rollout(&env, &p, 0, false, &mut seeded(0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rollout_has_exact_length_and_resets() {
        let env = Env::from_id("grid5").unwrap();
        let p = UniformPolicy { n_actions: 4 };
        let tr = rollout(&env, &p, 500, false, &mut seeded(1)).unwrap();
        assert_eq!(tr.len(), 500);
        assert!(tr.iter().any(|t| t.done));
        // the step after a done starts a fresh episode at the start cell
        let start = env.observe(&env.reset(&mut seeded(0)));
        for w in tr.windows(2) {
            if w[0].done {
                assert_eq!(w[1].obs, start);
            }
        }
    }

    #[test]
    fn fixed_length_suppresses_early_termination() {
        let env = Env::from_id("grid5").unwrap();
        let sol = value_iteration_expert(&env, 1e-8);
        let tr = rollout(&env, &sol.policy, 250, true, &mut seeded(2)).unwrap();
        let done_at: Vec<usize> = tr
            .iter()
            .enumerate()
            .filter(|(_, t)| t.done)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(done_at, vec![99, 199]);
    }

    #[test]
    fn expert_beats_random() {
        let env = Env::from_id("grid7").unwrap();
        let sol = value_iteration_expert(&env, 1e-8);
        let mut rng = seeded(3);
        let expert = evaluate_episodes(&env, &sol.policy, 32, &mut rng).unwrap();
        let random =
            evaluate_episodes(&env, &UniformPolicy { n_actions: 4 }, 32, &mut rng).unwrap();
        assert!(expert.mean_return() > random.mean_return());
        assert_eq!(expert.success_rate(), 1.0);
        assert_eq!(expert.pairs.len(), expert.lengths.iter().sum::<usize>());
    }

    #[test]
    fn features_append_one_hot_action() {
        assert_eq!(
            sa_features(&[0.5, 0.25], 1, 3),
            vec![0.5, 0.25, 0.0, 1.0, 0.0]
        );
    }
}
