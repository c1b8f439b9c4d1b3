//! Toy MDPs, tabular experts, rollouts and demonstration sets.

pub mod chain;
mod demos;
mod expert;
pub mod grid;
mod rollout;

pub use chain::NoisyChain;
pub use demos::{collect_demos, DemoMeta, DemoSet};
pub use expert::{value_iteration_expert, ExpertSolution, TabularPolicy};
pub use grid::GridWorld;
pub use rollout::{
    evaluate_episodes, rollout, rollout_batch, sa_features, ActionChoice, EpisodeStats, Policy,
    RolloutBatch, Transition, UniformPolicy, VecEnv,
};

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("action {action} outside 0..{n_actions}")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("unknown environment id `{0}` (expected grid<N> or chain)")]
    UnknownId(String),
    #[error("expert produced no successful episode in {attempts} consecutive attempts")]
    ExpertFailed { attempts: usize },
    #[error("demo file: {0}")]
    Demo(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimal environment state: a tabular index, the time step, and the
/// observation noise drawn for this step (zero where unused).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub index: usize,
    pub t: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The step reached the success region (goal cell / x >= 0.95).
    pub success: bool,
}

/// `(probability, next index, reward, terminal)` outcomes of a tabular action.
pub type Transitions = Vec<(f64, usize, f64, bool)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    Grid(GridWorld),
    Chain(NoisyChain),
}

/// An environment together with its episode-termination mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub kind: EnvKind,
    /// Keep episodes running until the time limit even after success.
    pub fixed_length: bool,
}

impl Env {
    pub fn grid(g: GridWorld) -> Self {
        Env {
            kind: EnvKind::Grid(g),
            fixed_length: false,
        }
    }

    pub fn chain(c: NoisyChain) -> Self {
        Env {
            kind: EnvKind::Chain(c),
            fixed_length: true,
        }
    }

    /// `grid<N>` (e.g. `grid7`) or `chain`, with the default termination mode.
    pub fn from_id(id: &str) -> Result<Self, EnvError> {
        if id == "chain" {
            return Ok(Env::chain(NoisyChain::default()));
        }
        if let Some(n) = id
            .strip_prefix("grid")
            .and_then(|n| n.parse::<usize>().ok())
        {
            if n >= 2 {
                return Ok(Env::grid(GridWorld::square(n)));
            }
        }
        Err(EnvError::UnknownId(id.to_string()))
    }

    pub fn with_fixed_length(mut self, fixed_length: bool) -> Self {
        self.fixed_length = fixed_length;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match &self.kind {
            EnvKind::Grid(g) => g.validate(),
            EnvKind::Chain(c) => c.validate(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match &self.kind {
            EnvKind::Grid(g) => g.n_cells(),
            EnvKind::Chain(_) => 2,
        }
    }

    pub fn n_actions(&self) -> usize {
        match &self.kind {
            EnvKind::Grid(_) => 4,
            EnvKind::Chain(_) => 3,
        }
    }

    /// Width of a state-action feature vector.
    pub fn feature_dim(&self) -> usize {
        self.obs_dim() + self.n_actions()
    }

    pub fn n_states(&self) -> usize {
        match &self.kind {
            EnvKind::Grid(g) => g.n_cells(),
            EnvKind::Chain(c) => c.positions + 1,
        }
    }

    pub fn max_steps(&self) -> usize {
        match &self.kind {
            EnvKind::Grid(g) => g.max_steps,
            EnvKind::Chain(c) => c.max_steps,
        }
    }

    pub fn gamma(&self) -> f64 {
        match &self.kind {
            EnvKind::Grid(g) => g.gamma,
            EnvKind::Chain(c) => c.gamma,
        }
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        match &self.kind {
            EnvKind::Grid(g) => EnvState {
                index: g.start_index(),
                t: 0,
                noise: 0.0,
            },
            EnvKind::Chain(c) => EnvState {
                index: 0,
                t: 0,
                noise: c.sample_noise(rng),
            },
        }
    }

    pub fn observe_into(&self, state: &EnvState, out: &mut [f64]) {
        match &self.kind {
            EnvKind::Grid(g) => g.observe(state, out),
            EnvKind::Chain(c) => c.observe(state, out),
        }
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        let mut v = vec![0.0; self.obs_dim()];
        self.observe_into(state, &mut v);
        v
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: usize,
        rng: &mut Rng,
    ) -> Result<StepOutcome, EnvError> {
        match &self.kind {
            EnvKind::Grid(g) => g.step(state, action, self.fixed_length, rng),
            EnvKind::Chain(c) => c.step(state, action, self.fixed_length, rng),
        }
    }

    /// Tabular dynamics, ignoring the time limit and observation noise.
    pub fn transitions(&self, index: usize, action: usize) -> Transitions {
        match &self.kind {
            EnvKind::Grid(g) => {
                if self.fixed_length && index == g.goal_index() {
                    return vec![(1.0, index, 0.0, false)];
                }
                g.transitions(index, action)
            }
            EnvKind::Chain(c) => c.transitions(index, action, self.fixed_length),
        }
    }

    pub fn start_index(&self) -> usize {
        match &self.kind {
            EnvKind::Grid(g) => g.start_index(),
            EnvKind::Chain(_) => 0,
        }
    }
}
