//! Run configuration: one TOML tree covering every module, with presets.
//!
//! A config file may name a `preset`; its own keys are then merged over the
//! preset, table by table. `${VAR}` anywhere in the file is replaced by the
//! environment variable `VAR` before parsing, so secrets stay out of files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ail::AilConfig;
use crate::disc::{DiscConfig, PenaltyKind};
use crate::envs::Env;
use crate::evolution::{EvoConfig, LlmConfig};
use crate::ot::{EPS_REL, SINKHORN_MAX_ITERS, SINKHORN_TOL};
use crate::policy::{Algo, PpoConfig};
use crate::ra::resolve_ra;

pub const PRESETS: [&str; 3] = ["desk", "paper-minatar", "paper-brax"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}`; valid presets: desk, paper-minatar, paper-brax")]
    UnknownPreset(String),
    #[error("environment variable `{0}` referenced in the config is not set")]
    MissingVar(String),
    #[error("unterminated `${{` in config")]
    Unterminated,
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSection {
    pub id: String,
    pub fixed_length: bool,
    pub n_demos: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub total_timesteps: usize,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtSection {
    pub sample_cap: usize,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Builtin name or expression.
    pub ra: String,
    /// Which optimizer section drives training.
    pub algo: Algo,
    pub env: EnvSection,
    pub ppo: PpoConfig,
    pub a2c: PpoConfig,
    pub disc: DiscConfig,
    pub train: TrainSection,
    pub ot: OtSection,
    pub evolution: EvoConfig,
}

fn desk() -> RunConfig {
    let ppo = PpoConfig::default();
    let a2c = PpoConfig::a2c();
    RunConfig {
        seed: 0,
        ra: "dail".into(),
        algo: Algo::Ppo,
        env: EnvSection {
            id: "grid7".into(),
            fixed_length: true,
            n_demos: 10,
            stride: 20,
        },
        train: TrainSection {
            total_timesteps: 60 * ppo.batch_size(),
            eval_episodes: 16,
        },
        ppo,
        a2c,
        disc: DiscConfig {
            hidden: vec![64],
            lr: 1e-3,
            gp_weight: 0.1,
            penalty: PenaltyKind::OneCentered,
            epochs: 2,
            minibatches: 8,
            max_grad_norm: None,
        },
        ot: OtSection {
            sample_cap: crate::ail::OT_SAMPLE_CAP,
            eps_rel: EPS_REL,
            max_iters: SINKHORN_MAX_ITERS,
            tol: SINKHORN_TOL,
        },
        evolution: EvoConfig {
            generations: 3,
            pairs: 4,
            per_pair: 1,
            topk: 4,
            eval_seeds: 4,
            seed: 0,
            llm: None,
            local_fallback: true,
        },
    }
}

fn paper_minatar() -> RunConfig {
    let ppo = PpoConfig {
        algo: Algo::Ppo,
        n_envs: 64,
        steps_per_env: 128,
        minibatches: 8,
        epochs: 4,
        gamma: 0.99,
        gae_lambda: 0.95,
        clip_eps: 0.2,
        vf_coef: 0.5,
        ent_coef: 0.01,
        max_grad_norm: 0.5,
        hidden: vec![64, 64],
        lr: 0.005,
        anneal_lr: true,
        normalize_advantages: true,
    };
    let a2c = PpoConfig {
        algo: Algo::A2c,
        n_envs: 64,
        steps_per_env: 16,
        minibatches: 8,
        epochs: 1,
        gamma: 0.99,
        gae_lambda: 0.95,
        clip_eps: 0.2,
        vf_coef: 5.0,
        ent_coef: 0.01,
        max_grad_norm: 10.0,
        hidden: vec![64, 64],
        lr: 0.005,
        anneal_lr: true,
        normalize_advantages: true,
    };
    RunConfig {
        seed: 0,
        ra: "dail".into(),
        algo: Algo::Ppo,
        env: EnvSection {
            id: "minatar-space_invaders".into(),
            fixed_length: false,
            n_demos: 10,
            stride: 20,
        },
        ppo,
        a2c,
        disc: DiscConfig {
            hidden: vec![64],
            lr: 0.0003,
            gp_weight: 0.1,
            penalty: PenaltyKind::OneCentered,
            epochs: 1,
            minibatches: 8,
            max_grad_norm: None,
        },
        train: TrainSection {
            total_timesteps: 10_000_000,
            eval_episodes: 16,
        },
        ot: desk().ot,
        evolution: EvoConfig {
            generations: 10,
            pairs: 20,
            per_pair: 1,
            topk: 10,
            eval_seeds: 16,
            seed: 0,
            llm: Some(LlmConfig::default()),
            local_fallback: true,
        },
    }
}

fn paper_brax() -> RunConfig {
    let m = paper_minatar();
    RunConfig {
        env: EnvSection {
            id: "brax-ant".into(),
            fixed_length: true,
            n_demos: 10,
            stride: 20,
        },
        ppo: PpoConfig {
            n_envs: 2048,
            steps_per_env: 10,
            minibatches: 32,
            ent_coef: 0.0,
            hidden: vec![256, 256],
            lr: 0.0003,
            anneal_lr: false,
            ..m.ppo.clone()
        },
        disc: DiscConfig {
            hidden: vec![128],
            lr: 0.0003,
            gp_weight: 1.0,
            minibatches: 32,
            ..m.disc.clone()
        },
        train: TrainSection {
            total_timesteps: 50_000_000,
            eval_episodes: 16,
        },
        ..m
    }
}

/// Replaces every `${VAR}` with the value of the environment variable.
pub fn interpolate_env(text: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after.find('}').ok_or(ConfigError::Unterminated)?;
        let name = &after[..end];
        let value = std::env::var(name).map_err(|_| ConfigError::MissingVar(name.to_string()))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
        match name {
            "desk" => Ok(desk()),
            "paper-minatar" => Ok(paper_minatar()),
            "paper-brax" => Ok(paper_brax()),
            _ => Err(ConfigError::UnknownPreset(name.to_string())),
        }
    }

    /// Parses TOML text over its `preset` (default `desk`) without validating.
    pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_with_preset(text, None)
    }

    /// Like [`RunConfig::from_toml_str`], but `preset`, when given, replaces
    /// the one named in the text.
    pub fn from_toml_with_preset(
        text: &str,
        preset: Option<&str>,
    ) -> Result<RunConfig, ConfigError> {
        let text = interpolate_env(text)?;
        let mut overlay: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let named = match overlay.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => Some(s),
            Some(_) => return Err(ConfigError::Parse("`preset` must be a string".into())),
            None => None,
        };
        let preset = preset
            .map(str::to_string)
            .or(named)
            .unwrap_or_else(|| "desk".to_string());
        let mut base = toml::Value::try_from(RunConfig::preset(&preset)?)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, overlay);
        base.try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let cfg = RunConfig::from_toml_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Optimizer settings selected by `algo`.
    pub fn policy(&self) -> &PpoConfig {
        match self.algo {
            Algo::Ppo => &self.ppo,
            Algo::A2c => &self.a2c,
        }
    }

    pub fn iterations(&self) -> usize {
        (self.train.total_timesteps / self.policy().batch_size()).max(1)
    }

    pub fn make_env(&self) -> Result<Env, ConfigError> {
        Env::from_id(&self.env.id)
            .map(|e| e.with_fixed_length(self.env.fixed_length))
            .map_err(|e| {
                ConfigError::Invalid(format!(
                    "{e} (override the environment for desk-scale runs)"
                ))
            })
    }

    /// Imitation-loop settings for `ra` (or the configured function).
    pub fn ail_config(&self, ra: Option<&str>) -> Result<AilConfig, ConfigError> {
        let spec = ra.unwrap_or(&self.ra);
        let ra = resolve_ra(spec)
            .map_err(|e| ConfigError::Invalid(format!("reward assignment `{spec}`: {e}")))?;
        Ok(AilConfig {
            env_id: self.env.id.clone(),
            ra,
            policy: self.policy().clone(),
            disc: self.disc.clone(),
            iterations: self.iterations(),
            eval_episodes: self.train.eval_episodes,
            fixed_length: self.env.fixed_length,
        })
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.make_env()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env.n_demos == 0 || self.env.stride == 0 {
            return bad("env.n_demos and env.stride must be positive".into());
        }
        for (name, p) in [("ppo", &self.ppo), ("a2c", &self.a2c)] {
            p.validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.ppo.algo != Algo::Ppo || self.a2c.algo != Algo::A2c {
            return bad("ppo.algo must be \"ppo\" and a2c.algo must be \"a2c\"".into());
        }
        let d = &self.disc;
        if !(d.lr > 0.0) || !(d.gp_weight >= 0.0) || d.minibatches == 0 || d.hidden.contains(&0) {
            return bad(
                "disc: lr > 0, gp_weight >= 0, minibatches > 0 and nonzero widths required".into(),
            );
        }
        if self.train.total_timesteps < self.policy().batch_size() {
            return bad("train.total_timesteps is smaller than one batch".into());
        }
        if self.train.eval_episodes == 0 {
            return bad("train.eval_episodes must be positive".into());
        }
        let o = &self.ot;
        if o.sample_cap == 0 || !(o.eps_rel > 0.0) || o.max_iters == 0 || !(o.tol > 0.0) {
            return bad("ot: sample_cap, eps_rel, max_iters and tol must be positive".into());
        }
        self.evolution
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ail_config(None)?;
        Ok(())
    }
}

/// Reads chat-endpoint settings from a TOML file, either at top level or
/// under an `[llm]` table; missing keys take their defaults.
pub fn load_llm_config(path: &Path) -> Result<LlmConfig, ConfigError> {
    let text = interpolate_env(&std::fs::read_to_string(path)?)?;
    let mut v: toml::Value =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(inner) = v.as_table_mut().and_then(|t| t.remove("llm")) {
        v = inner;
    }
    v.try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid() {
        let d = RunConfig::preset("desk").unwrap();
        d.validate().unwrap();
        assert_eq!(d.iterations(), 60);
    }

    #[test]
    fn paper_presets_need_an_available_env() {
        for p in ["paper-minatar", "paper-brax"] {
            let mut c = RunConfig::preset(p).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
            c.env.id = "grid7".into();
            c.validate().unwrap();
        }
        assert_eq!(
            RunConfig::preset("paper-minatar").unwrap().iterations(),
            1220
        );
        assert!(matches!(
            RunConfig::preset("nope"),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn overlay_merges_over_preset() {
        let c = RunConfig::from_toml_str(
            "preset = \"paper-minatar\"\nra = \"gail\"\n[env]\nid = \"chain\"\n[ppo]\nlr = 0.001\n",
        )
        .unwrap();
        assert_eq!(c.ra, "gail");
        assert_eq!(c.env.id, "chain");
        assert_eq!(c.env.stride, 20);
        assert_eq!(c.ppo.lr, 0.001);
        assert_eq!(c.ppo.n_envs, 64);
        c.validate().unwrap();
        let d = RunConfig::from_toml_str("").unwrap();
        assert_eq!(d, RunConfig::preset("desk").unwrap());
        let b =
            RunConfig::from_toml_with_preset("preset = \"desk\"\n", Some("paper-brax")).unwrap();
        assert_eq!(b.ppo.n_envs, 2048);
    }

    #[test]
    fn toml_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            let text = format!("preset = \"{p}\"\n{}", c.to_toml_string());
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn env_interpolation() {
        std::env::set_var("DAIL_CFG_TEST_MODEL", "m-1");
        assert_eq!(
            interpolate_env("a ${DAIL_CFG_TEST_MODEL} b").unwrap(),
            "a m-1 b"
        );
        assert!(matches!(
            interpolate_env("${DAIL_CFG_TEST_UNSET_X}"),
            Err(ConfigError::MissingVar(_))
        ));
        assert!(matches!(
            interpolate_env("${oops"),
            Err(ConfigError::Unterminated)
        ));
        let c = RunConfig::from_toml_str("[evolution.llm]\nmodel = \"${DAIL_CFG_TEST_MODEL}\"\n")
            .unwrap();
        assert_eq!(c.evolution.llm.unwrap().model, "m-1");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let c = RunConfig::from_toml_str("[disc]\nlr = 0.0\n").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml_str("ra = \"sigmoid(\"\n").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml_str("ra = \"0.3*tanh(x)\"\n").unwrap();
        c.validate().unwrap();
        let c = RunConfig::from_toml_str("[train]\ntotal_timesteps = 10\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn llm_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("llm.toml");
        std::fs::write(&p, "[llm]\nmodel = \"x\"\nretries = 1\n").unwrap();
        let c = load_llm_config(&p).unwrap();
        assert_eq!((c.model.as_str(), c.retries), ("x", 1));
        assert_eq!(c.base_url, LlmConfig::default().base_url);
        std::fs::write(&p, "model = \"y\"\n").unwrap();
        assert_eq!(load_llm_config(&p).unwrap().model, "y");
    }
}
