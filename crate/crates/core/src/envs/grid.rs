use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvState, StepOutcome, Transitions};
use crate::rng::Rng;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Slippery grid with a single goal cell. Observations are one-hot over cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub rows: usize,
    pub cols: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub p_slip: f64,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub gamma: f64,
    pub max_steps: usize,
}

impl GridWorld {
    /// `n x n` grid from the top-left corner to the bottom-right corner.
    pub fn square(n: usize) -> Self {
        GridWorld {
            rows: n,
            cols: n,
            start: (0, 0),
            goal: (n - 1, n - 1),
            p_slip: 0.1,
            step_reward: -0.01,
            goal_reward: 1.0,
            gamma: 0.99,
            max_steps: 100,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 2 {
            return Err(EnvError::Config("grid needs at least two cells".into()));
        }
        if self.start == self.goal {
            return Err(EnvError::Config("start and goal coincide".into()));
        }
        let inside = |(r, c): (usize, usize)| r < self.rows && c < self.cols;
        if !inside(self.start) || !inside(self.goal) {
            return Err(EnvError::Config("start or goal outside the grid".into()));
        }
        if !(0.0..=1.0).contains(&self.p_slip) {
            return Err(EnvError::Config(format!(
                "p_slip {} outside [0, 1]",
                self.p_slip
            )));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, (r, c): (usize, usize)) -> usize {
        r * self.cols + c
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn start_index(&self) -> usize {
        self.cell(self.start)
    }

    pub fn goal_index(&self) -> usize {
        self.cell(self.goal)
    }

    /// Cell reached by executing `action` from `index`; walls leave the agent in place.
    pub fn move_from(&self, index: usize, action: usize) -> usize {
        let (r, c) = self.coords(index);
        let (r, c) = match action {
            UP if r > 0 => (r - 1, c),
            DOWN if r + 1 < self.rows => (r + 1, c),
            LEFT if c > 0 => (r, c - 1),
            RIGHT if c + 1 < self.cols => (r, c + 1),
            _ => (r, c),
        };
        self.cell((r, c))
    }

    pub fn observe(&self, state: &EnvState, out: &mut [f64]) {
        out.fill(0.0);
        out[state.index] = 1.0;
    }

    /// Executed action: the intended one, or with probability `p_slip` a
    /// uniformly chosen different action.
    pub fn executed_action(&self, action: usize, rng: &mut Rng) -> usize {
        if self.p_slip > 0.0 && rng.gen::<f64>() < self.p_slip {
            let k = rng.gen_range(0..3);
            if k >= action {
                k + 1
            } else {
                k
            }
        } else {
            action
        }
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: usize,
        fixed_length: bool,
        rng: &mut Rng,
    ) -> Result<StepOutcome, EnvError> {
        if action >= 4 {
            return Err(EnvError::InvalidAction {
                action,
                n_actions: 4,
            });
        }
        let t = state.t + 1;
        let truncated = t >= self.max_steps;
        let goal = self.goal_index();
        if state.index == goal {
            // only reachable in fixed-length mode: the goal absorbs
            return Ok(StepOutcome {
                next: EnvState {
                    index: goal,
                    t,
                    noise: 0.0,
                },
                reward: 0.0,
                done: truncated,
                success: true,
            });
        }
        let next = self.move_from(state.index, self.executed_action(action, rng));
        let reached = next == goal;
        Ok(StepOutcome {
            next: EnvState {
                index: next,
                t,
                noise: 0.0,
            },
            reward: if reached {
                self.goal_reward
            } else {
                self.step_reward
            },
            done: truncated || (reached && !fixed_length),
            success: reached,
        })
    }

    pub fn transitions(&self, index: usize, action: usize) -> Transitions {
        let goal = self.goal_index();
        let mut out: Transitions = Vec::with_capacity(4);
        for executed in 0..4 {
            let p = if executed == action {
                1.0 - self.p_slip
            } else {
                self.p_slip / 3.0
            };
            if p == 0.0 {
                continue;
            }
            let next = self.move_from(index, executed);
            let reached = next == goal;
            let reward = if reached {
                self.goal_reward
            } else {
                self.step_reward
            };
            out.push((p, next, reward, reached));
        }
        out
    }
}
