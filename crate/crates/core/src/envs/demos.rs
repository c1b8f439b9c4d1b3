use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rollout::{evaluate_episodes, sa_features, Policy};
use super::{Env, EnvError};
use crate::rng;

/// Consecutive unsuccessful expert episodes tolerated before giving up.
pub const MAX_FAILED_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub env_id: String,
    pub n_demos: usize,
    pub stride: usize,
    /// Mean undiscounted return of the recorded episodes.
    pub source_return: f64,
    pub seed: u64,
}

/// Subsampled expert state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub meta: DemoMeta,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: DemoMeta,
}

#[derive(Serialize, Deserialize)]
struct Pair {
    state: Vec<f64>,
    action: usize,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn sa_features(&self, n_actions: usize) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .zip(&self.actions)
            .map(|(s, &a)| sa_features(s, a, n_actions))
            .collect()
    }

    /// Checks the demos against an environment's observation and action sizes.
    pub fn check_env(&self, env: &Env) -> Result<(), EnvError> {
        if self.is_empty() {
            return Err(EnvError::Demo("demo set is empty".into()));
        }
        for (s, &a) in self.states.iter().zip(&self.actions) {
            if s.len() != env.obs_dim() || a >= env.n_actions() {
                return Err(EnvError::Demo(format!(
                    "pair with state width {} / action {a} does not fit an env with {} features and {} actions",
                    s.len(),
                    env.obs_dim(),
                    env.n_actions()
                )));
            }
        }
        Ok(())
    }

    /// JSON lines: a `{"meta": ...}` header, then one `{"state": [...], "action": a}` per pair.
    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<(), EnvError> {
        let mut w = BufWriter::new(w);
        let to_io = |e: serde_json::Error| EnvError::Demo(e.to_string());
        serde_json::to_writer(
            &mut w,
            &Header {
                meta: self.meta.clone(),
            },
        )
        .map_err(to_io)?;
        writeln!(w)?;
        for (s, &a) in self.states.iter().zip(&self.actions) {
            serde_json::to_writer(
                &mut w,
                &Pair {
                    state: s.clone(),
                    action: a,
                },
            )
            .map_err(to_io)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: std::io::Read>(r: R) -> Result<Self, EnvError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| EnvError::Demo("missing header line".into()))??;
        let header: Header =
            serde_json::from_str(&header).map_err(|e| EnvError::Demo(format!("header: {e}")))?;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Pair = serde_json::from_str(&line)
                .map_err(|e| EnvError::Demo(format!("line {}: {e}", i + 2)))?;
            states.push(p.state);
            actions.push(p.action);
        }
        if states.is_empty() {
            return Err(EnvError::Demo("no state-action pairs".into()));
        }
        Ok(DemoSet {
            meta: header.meta,
            states,
            actions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

/// Rolls out `n_demos` successful expert episodes and keeps every
/// `stride`-th step, starting from a random offset below
/// `min(stride, episode length)` drawn per episode.
pub fn collect_demos<P: Policy + ?Sized>(
    env: &Env,
    env_id: &str,
    expert: &P,
    n_demos: usize,
    stride: usize,
    seed: u64,
) -> Result<DemoSet, EnvError> {
    if stride == 0 || n_demos == 0 {
        return Err(EnvError::Config(
            "stride and demo count must be positive".into(),
        ));
    }
    let mut r = rng::seeded(seed);
    let n_actions = env.n_actions();
    let obs_dim = env.obs_dim();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut returns = Vec::new();
    let mut failures = 0;
    while returns.len() < n_demos {
        let ep = evaluate_episodes(env, expert, 1, &mut r)?;
        if !ep.successes[0] {
            failures += 1;
            if failures >= MAX_FAILED_ATTEMPTS {
                return Err(EnvError::ExpertFailed { attempts: failures });
            }
            continue;
        }
        failures = 0;
        returns.push(ep.returns[0]);
        let len = ep.lengths[0];
        let offset = r.gen_range(0..stride.min(len));
        for pair in ep.pairs.iter().skip(offset).step_by(stride) {
            states.push(pair[..obs_dim].to_vec());
            let a = pair[obs_dim..]
                .iter()
                .position(|&v| v == 1.0)
                .expect("one-hot action");
            debug_assert!(a < n_actions);
            actions.push(a);
        }
    }
    Ok(DemoSet {
        meta: DemoMeta {
            env_id: env_id.to_string(),
            n_demos,
            stride,
            source_return: returns.iter().sum::<f64>() / returns.len() as f64,
            seed,
        },
        states,
        actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{value_iteration_expert, GridWorld, UniformPolicy};

    #[test]
    fn stride_one_keeps_every_step() {
        let env = Env::from_id("grid5").unwrap();
        let sol = value_iteration_expert(&env, 1e-8);
        let demos = collect_demos(&env, "grid5", &sol.policy, 4, 1, 0).unwrap();
        // replay the same episodes to get their lengths
        let mut r = rng::seeded(0);
        let mut total = 0;
        let mut kept = 0;
        while kept < 4 {
            let ep = evaluate_episodes(&env, &sol.policy, 1, &mut r).unwrap();
            if ep.successes[0] {
                total += ep.lengths[0];
                kept += 1;
                let _ = r.gen_range(0..1usize);
            }
        }
        assert_eq!(demos.len(), total);
    }

    #[test]
    fn stride_twenty_on_fixed_length_episodes() {
        let env = Env::from_id("chain").unwrap();
        let mut chain = match env.kind.clone() {
            crate::envs::EnvKind::Chain(c) => c,
            _ => unreachable!(),
        };
        chain.max_steps = 100;
        let env = Env::chain(chain);
        let sol = value_iteration_expert(&env, 1e-8);
        let demos = collect_demos(&env, "chain", &sol.policy, 3, 20, 5).unwrap();
        assert_eq!(demos.len(), 15);
    }

    #[test]
    fn demo_actions_match_expert() {
        let env = Env::from_id("grid7").unwrap();
        let sol = value_iteration_expert(&env, 1e-8);
        let demos = collect_demos(&env, "grid7", &sol.policy, 10, 20, 1).unwrap();
        assert!(demos.len() >= 10);
        for (s, &a) in demos.states.iter().zip(&demos.actions) {
            let idx = s.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(sol.policy.actions[idx], a);
        }
        assert_eq!(demos.meta.stride, 20);
        assert!(demos.meta.source_return > 0.5);
    }

    #[test]
    fn failing_expert_is_reported() {
        let mut g = GridWorld::square(7);
        g.max_steps = 3;
        let env = Env::grid(g);
        let err =
            collect_demos(&env, "grid7", &UniformPolicy { n_actions: 4 }, 1, 1, 0).unwrap_err();
        assert!(matches!(err, EnvError::ExpertFailed { attempts: 100 }));
    }

    #[test]
    fn jsonl_round_trip() {
        let env = Env::from_id("chain").unwrap();
        let sol = value_iteration_expert(&env, 1e-8);
        let demos = collect_demos(&env, "chain", &sol.policy, 2, 20, 9).unwrap();
        let mut buf = Vec::new();
        demos.write_jsonl(&mut buf).unwrap();
        let back = DemoSet::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, demos);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"meta\""));
        assert_eq!(text.lines().count(), demos.len() + 1);
    }
}
