use dail_core::policy::PpoConfig;
use dail_core::toolkit::RunConfig;
use toml::Value;

fn golden() -> Value {
    toml::from_str(include_str!("data/hyperparams.toml")).unwrap()
}

fn check_policy(p: &PpoConfig, total: usize, g: &Value) {
    let f = |k: &str| g[k].as_float().unwrap_or_else(|| panic!("{k}"));
    let u = |k: &str| g[k].as_integer().unwrap_or_else(|| panic!("{k}")) as usize;
    assert_eq!(p.n_envs, u("n_envs"));
    assert_eq!(p.steps_per_env, u("steps_per_env"));
    assert_eq!(total, u("total_timesteps"));
    assert_eq!(p.minibatches, u("minibatches"));
    if let Some(e) = g.get("epochs") {
        assert_eq!(p.epochs, e.as_integer().unwrap() as usize);
    }
    if let Some(c) = g.get("clip_eps") {
        assert_eq!(p.clip_eps, c.as_float().unwrap());
    }
    assert_eq!(p.gamma, f("gamma"));
    assert_eq!(p.gae_lambda, f("gae_lambda"));
    assert_eq!(p.vf_coef, f("vf_coef"));
    assert_eq!(p.ent_coef, f("ent_coef"));
    assert_eq!(p.max_grad_norm, f("max_grad_norm"));
    assert_eq!(p.lr, f("lr"));
    assert_eq!(p.anneal_lr, g["anneal_lr"].as_bool().unwrap());
    let hidden: Vec<usize> = g["hidden"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_integer().unwrap() as usize)
        .collect();
    assert_eq!(p.hidden, hidden);
}

#[test]
fn paper_presets_match_published_tables() {
    let g = golden();
    for (preset, key) in [("paper-minatar", "minatar"), ("paper-brax", "brax")] {
        let c = RunConfig::preset(preset).unwrap();
        check_policy(&c.ppo, c.train.total_timesteps, &g["ppo"][key]);
        let d = &g["disc"][key];
        let hidden: Vec<usize> = d["hidden"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_integer().unwrap() as usize)
            .collect();
        assert_eq!(c.disc.hidden, hidden);
        assert_eq!(c.disc.lr, d["lr"].as_float().unwrap());
        assert_eq!(c.disc.gp_weight, d["gp_weight"].as_float().unwrap());
        assert_eq!(c.disc.epochs, d["epochs"].as_integer().unwrap() as usize);
        assert_eq!(
            c.disc.minibatches,
            d["minibatches"].as_integer().unwrap() as usize
        );

        let e = &g["evolution"];
        let evo = &c.evolution;
        assert_eq!(
            evo.llm.as_ref().unwrap().model,
            e["model"].as_str().unwrap()
        );
        for (v, k) in [
            (evo.generations, "generations"),
            (evo.pairs, "pairs"),
            (evo.per_pair, "per_pair"),
            (evo.topk, "topk"),
            (evo.eval_seeds, "eval_seeds"),
        ] {
            assert_eq!(v, e[k].as_integer().unwrap() as usize, "{k}");
        }
    }
    let m = RunConfig::preset("paper-minatar").unwrap();
    check_policy(&m.a2c, m.train.total_timesteps, &g["a2c"]);
}
