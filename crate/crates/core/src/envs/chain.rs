use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvState, StepOutcome, Transitions};
use crate::rng::Rng;

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

/// Positions on `[0, 1]` in steps of `1 / positions`, observed together with
/// an uninformative Gaussian noise feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyChain {
    /// Number of steps from 0 to 1; the position is `k / positions`.
    pub positions: usize,
    /// Smallest `k` that pays the reward (x >= 0.95 for the default chain).
    pub goal_k: usize,
    pub noise_std: f64,
    pub max_steps: usize,
    pub gamma: f64,
}

impl Default for NoisyChain {
    fn default() -> Self {
        NoisyChain {
            positions: 20,
            goal_k: 19,
            noise_std: 0.05,
            max_steps: 200,
            gamma: 0.99,
        }
    }
}

impl NoisyChain {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.positions == 0 || self.goal_k == 0 || self.goal_k > self.positions {
            return Err(EnvError::Config("goal position outside the chain".into()));
        }
        if !(self.noise_std >= 0.0) || self.max_steps == 0 {
            return Err(EnvError::Config("invalid noise or episode length".into()));
        }
        Ok(())
    }

    pub fn x(&self, k: usize) -> f64 {
        k as f64 / self.positions as f64
    }

    pub fn sample_noise(&self, rng: &mut Rng) -> f64 {
        if self.noise_std == 0.0 {
            0.0
        } else {
            Normal::new(0.0, self.noise_std).unwrap().sample(rng)
        }
    }

    pub fn observe(&self, state: &EnvState, out: &mut [f64]) {
        out[0] = self.x(state.index);
        out[1] = state.noise;
    }

    fn move_from(&self, k: usize, action: usize) -> usize {
        match action {
            LEFT => k.saturating_sub(1),
            RIGHT => (k + 1).min(self.positions),
            _ => k,
        }
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: usize,
        fixed_length: bool,
        rng: &mut Rng,
    ) -> Result<StepOutcome, EnvError> {
        if action >= 3 {
            return Err(EnvError::InvalidAction {
                action,
                n_actions: 3,
            });
        }
        let t = state.t + 1;
        let k = self.move_from(state.index, action);
        let reached = k >= self.goal_k;
        Ok(StepOutcome {
            next: EnvState {
                index: k,
                t,
                noise: self.sample_noise(rng),
            },
            reward: if reached { 1.0 } else { 0.0 },
            done: t >= self.max_steps || (reached && !fixed_length),
            success: reached,
        })
    }

    pub fn transitions(&self, index: usize, action: usize, fixed_length: bool) -> Transitions {
        let k = self.move_from(index, action);
        let reached = k >= self.goal_k;
        vec![(
            1.0,
            k,
            if reached { 1.0 } else { 0.0 },
            reached && !fixed_length,
        )]
    }
}
