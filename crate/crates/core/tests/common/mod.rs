#![allow(dead_code)]

pub mod oracle;

use dail_core::ail::AilConfig;
use dail_core::disc::DiscConfig;
use dail_core::envs::{collect_demos, value_iteration_expert, DemoSet, Env};
use dail_core::policy::PpoConfig;
use dail_core::ra::{named_ra, RaFunction};
use dail_core::toolkit::{RunConfig, EXPERT_TOL};

/// Expert demos with the desk protocol: 10 episodes, every 20th step.
pub fn demos(env_id: &str, fixed_length: bool) -> DemoSet {
    let env = Env::from_id(env_id)
        .unwrap()
        .with_fixed_length(fixed_length);
    let expert = value_iteration_expert(&env, EXPERT_TOL);
    collect_demos(&env, env_id, &expert.policy, 10, 20, 0).unwrap()
}

/// A few cheap iterations; enough to exercise every stage of the loop.
pub fn tiny(ra: RaFunction) -> AilConfig {
    AilConfig {
        env_id: "grid7".into(),
        ra,
        policy: PpoConfig {
            n_envs: 4,
            steps_per_env: 32,
            minibatches: 4,
            epochs: 2,
            ..PpoConfig::default()
        },
        disc: DiscConfig::default(),
        iterations: 3,
        eval_episodes: 4,
        fixed_length: true,
    }
}

pub fn tiny_named(name: &str) -> AilConfig {
    tiny(named_ra(name).unwrap())
}

/// The desk preset's imitation settings for `ra` on `env_id`.
pub fn desk(env_id: &str, ra: &str) -> AilConfig {
    let mut rc = RunConfig::preset("desk").unwrap();
    rc.env.id = env_id.into();
    rc.ail_config(Some(ra)).unwrap()
}
