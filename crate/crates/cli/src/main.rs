use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dail_core::ail::{run_fail, AilError, IterMetrics};
use dail_core::envs::{collect_demos, value_iteration_expert, DemoSet, Env, EnvError};
use dail_core::evolution::{
    run_evolution, ChatClient, EvoError, HttpChatClient, LlmError, MockChatClient,
};
use dail_core::ot::{emd_exact, equalize, sinkhorn, wasserstein, EmpiricalDist, OtError};
use dail_core::policy::Algo;
use dail_core::ra::{eval_ra, resolve_ra, ParseError};
use dail_core::rng::seeded;
use dail_core::toolkit::{
    emit, kde_gaussian, kde_mass, linspace, load_llm_config, mass_in, prob_improvement,
    ConfigError, Format, KdeError, MetricsError, MetricsFrame, ReferenceReturns, RunConfig,
    EXPERT_TOL,
};

/// Episodes used to measure the expert and random reference returns.
const REFERENCE_EPISODES: usize = 200;
/// Seed offset of the reference-return episodes.
const REFERENCE_SEED: u64 = 0x5eed;

#[derive(Parser)]
#[command(
    name = "dail",
    version,
    about = "Adversarial imitation with evolved reward assignment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Base preset: desk, paper-minatar or paper-brax.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment id (grid7, gridN, chain).
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the environment exactly and record subsampled expert demos.
    CollectExpert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one imitation training run.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Builtin name or expression.
        #[arg(long)]
        ra: Option<String>,
        /// Demo file; collected on the fly when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, value_enum)]
        algo: Option<AlgoArg>,
        /// Overrides the iteration count implied by total timesteps.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration metrics (.csv or .jsonl); defaults next to --out.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evolve reward-assignment functions.
    Evolve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        per_pair: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        /// Evaluation seeds per candidate.
        #[arg(long)]
        seeds: Option<usize>,
        /// Chat endpoint settings (TOML).
        #[arg(long, conflicts_with_all = ["local_only", "mock"])]
        llm: Option<PathBuf>,
        /// Breed with local crossover only.
        #[arg(long, conflicts_with = "mock")]
        local_only: bool,
        /// Replay canned responses from a JSON-lines file.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// History ledger (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate a reward-assignment function on a logit grid.
    EvalRa {
        #[arg(long = "fn")]
        func: String,
        /// lo:hi:step
        #[arg(long, default_value = "-5:5:0.1", allow_hyphen_values = true)]
        grid: String,
        /// Output path; `-` or `csv` writes CSV to stdout.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Wasserstein-2 distance between two point sets.
    Wdist {
        /// JSON lines of numeric arrays, or a demo file.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        method: Method,
        /// Subsample both sets to at most this many points.
        #[arg(long)]
        cap: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarize stored runs: returns, distances, entropy, log-ratio KDE and
    /// probability of improvement between labels.
    Analyze {
        /// Run files written by `train`, as `label=path` or `path` (label = RA).
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        /// Number of KDE grid points on [-10, 10].
        #[arg(long, default_value_t = 201)]
        kde_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Ppo,
    A2c,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Auto,
    Exact,
    Sinkhorn,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl std::fmt::Display) -> Self {
        CliError {
            kind,
            message: message.to_string(),
        }
    }
}

macro_rules! error_kind {
    ($($t:ty => $k:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($k, e)
            }
        })*
    };
}

error_kind! {
    ConfigError => "config",
    EnvError => "env",
    AilError => "training",
    EvoError => "evolution",
    LlmError => "llm",
    OtError => "transport",
    ParseError => "ra_parse",
    KdeError => "analysis",
    MetricsError => "io",
    std::io::Error => "io",
    serde_json::Error => "json",
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml_with_preset(&text, args.preset.as_deref())?;
    if let Some(env) = &args.env {
        cfg.env.id = env.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn demos_for(cfg: &RunConfig, path: Option<&Path>) -> Result<DemoSet> {
    let env = cfg.make_env()?;
    let demos = match path {
        Some(p) => DemoSet::load(p)?,
        None => {
            let expert = value_iteration_expert(&env, EXPERT_TOL);
            collect_demos(
                &env,
                &cfg.env.id,
                &expert.policy,
                cfg.env.n_demos,
                cfg.env.stride,
                cfg.seed,
            )?
        }
    };
    demos.check_env(&env)?;
    Ok(demos)
}

fn writer(path: &str) -> Result<Box<dyn Write>> {
    Ok(match path {
        "-" | "csv" => Box::new(std::io::stdout().lock()),
        p => Box::new(BufWriter::new(File::create(p)?)),
    })
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    env_id: String,
    ra: String,
    seed: u64,
    iterations: usize,
    wasserstein: f64,
    eval_return: f64,
    eval_success: f64,
    eval_entropy: f64,
    normalized_return: f64,
    reference: ReferenceReturns,
    eval_logits: Vec<f64>,
    metrics: Vec<IterMetrics>,
    config: RunConfig,
}

fn collect_expert(
    cfg: ConfigArgs,
    n: Option<usize>,
    stride: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut rc = load_config(&cfg)?;
    if let Some(n) = n {
        rc.env.n_demos = n;
    }
    if let Some(s) = stride {
        rc.env.stride = s;
    }
    rc.validate()?;
    let demos = demos_for(&rc, None)?;
    demos.save(out)?;
    print_json(&json!({
        "out": out,
        "pairs": demos.len(),
        "meta": demos.meta,
    }))
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: ConfigArgs,
    ra: Option<String>,
    demos: Option<PathBuf>,
    algo: Option<AlgoArg>,
    iterations: Option<usize>,
    out: &Path,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let mut rc = load_config(&cfg)?;
    if let Some(ra) = ra {
        rc.ra = ra;
    }
    if let Some(a) = algo {
        rc.algo = match a {
            AlgoArg::Ppo => Algo::Ppo,
            AlgoArg::A2c => Algo::A2c,
        };
    }
    if let Some(it) = iterations {
        rc.train.total_timesteps = it * rc.policy().batch_size();
    }
    rc.validate()?;
    let demos = demos_for(&rc, demos.as_deref())?;
    let ail = rc.ail_config(None)?;
    let env = rc.make_env()?;
    let reference = ReferenceReturns::measure(&env, REFERENCE_EPISODES, rc.seed ^ REFERENCE_SEED)?;
    let res = run_fail(&ail, &demos, rc.seed)?;
    let normalized = reference.normalize(res.eval_return)?;

    let metrics_path = metrics.unwrap_or_else(|| out.with_extension("csv"));
    let frame = MetricsFrame::from_iter_metrics(&format!("{}-{}", rc.ra, rc.seed), &res.metrics);
    emit(&frame, &metrics_path, Format::from_path(&metrics_path))?;

    let run = RunFile {
        env_id: rc.env.id.clone(),
        ra: ail.ra.expr.serialize(),
        seed: rc.seed,
        iterations: ail.iterations,
        wasserstein: res.wasserstein,
        eval_return: res.eval_return,
        eval_success: res.eval_success,
        eval_entropy: res.eval_entropy,
        normalized_return: normalized,
        reference,
        eval_logits: res.eval_logits,
        metrics: res.metrics,
        config: rc,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(out)?), &run)?;
    print_json(&json!({
        "out": out,
        "metrics": metrics_path,
        "wasserstein": run.wasserstein,
        "eval_return": run.eval_return,
        "normalized_return": run.normalized_return,
    }))
}

#[allow(clippy::too_many_arguments)]
fn evolve(
    cfg: ConfigArgs,
    demos: Option<PathBuf>,
    overrides: [Option<usize>; 5],
    llm: Option<PathBuf>,
    local_only: bool,
    mock: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut rc = load_config(&cfg)?;
    let evo = &mut rc.evolution;
    let [g, m, n, k, s] = overrides;
    evo.generations = g.unwrap_or(evo.generations);
    evo.pairs = m.unwrap_or(evo.pairs);
    evo.per_pair = n.unwrap_or(evo.per_pair);
    evo.topk = k.unwrap_or(evo.topk);
    evo.eval_seeds = s.unwrap_or(evo.eval_seeds);
    evo.seed = rc.seed;
    if let Some(p) = &llm {
        evo.llm = Some(load_llm_config(p)?);
    }
    if local_only {
        evo.llm = None;
        evo.local_fallback = true;
    }
    rc.validate()?;
    let demos = demos_for(&rc, demos.as_deref())?;
    let ail = rc.ail_config(None)?;
    let client: Option<Box<dyn ChatClient>> = match (&mock, &rc.evolution.llm) {
        (Some(p), _) => Some(Box::new(MockChatClient::from_jsonl(p)?)),
        (None, Some(c)) if !local_only => Some(Box::new(HttpChatClient::new(c.clone())?)),
        _ => None,
    };
    let mut sink = BufWriter::new(File::create(out)?);
    let outcome = run_evolution(
        &rc.evolution,
        &ail,
        &demos,
        client.as_deref(),
        Some(&mut sink),
    )?;
    sink.flush()?;
    let population: Vec<_> = outcome
        .population
        .members
        .iter()
        .map(|c| json!({"id": c.id, "dsl": c.dsl(), "fitness": c.fitness, "generation": c.generation}))
        .collect();
    print_json(&json!({
        "out": out,
        "best": {"id": outcome.best.id, "dsl": outcome.best.dsl(), "fitness": outcome.best.fitness},
        "best_per_generation": outcome.best_per_generation,
        "random_w2": outcome.random_w2,
        "worst_fitness": outcome.worst_fitness,
        "population": population,
    }))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::new("usage", format!("grid `{spec}` is not lo:hi:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

fn eval_ra_cmd(func: &str, grid: &str, out: &str) -> Result<()> {
    let f = resolve_ra(func)?;
    let xs = parse_grid(grid)?;
    let (ys, _) = eval_ra(&f, &xs);
    let mut w = csv::Writer::from_writer(writer(out)?);
    w.write_record(["logit", "reward"])
        .map_err(|e| CliError::new("io", e))?;
    for (x, y) in xs.iter().zip(&ys) {
        w.write_record([x.to_string(), y.to_string()])
            .map_err(|e| CliError::new("io", e))?;
    }
    w.flush()?;
    Ok(())
}

/// Points from JSON lines of arrays, or state-action features of a demo file.
fn load_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let first = BufReader::new(File::open(path)?)
        .lines()
        .next()
        .transpose()?
        .unwrap_or_default();
    if first.trim_start().starts_with('{') {
        let demos = DemoSet::load(path)?;
        let env = Env::from_id(&demos.meta.env_id)?;
        return Ok(demos.sa_features(env.n_actions()));
    }
    let mut pts = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            pts.push(serde_json::from_str::<Vec<f64>>(&line)?);
        }
    }
    Ok(pts)
}

fn wdist(a: &Path, b: &Path, method: Method, cap: Option<usize>, cfg: ConfigArgs) -> Result<()> {
    let rc = load_config(&cfg)?;
    let mut pa = EmpiricalDist::new(load_points(a)?)?;
    let mut pb = EmpiricalDist::new(load_points(b)?)?;
    if let Some(cap) = cap {
        let mut rng = seeded(rc.seed);
        (pa, pb) = equalize(&pa, &pb, cap, &mut rng);
    }
    let res = match method {
        Method::Auto => wasserstein(&pa, &pb)?,
        Method::Exact => emd_exact(&pa, &pb)?,
        Method::Sinkhorn => {
            let cost = dail_core::ot::cost_matrix(&pa, &pb)?;
            let max_cost = cost.iter().cloned().fold(0.0, f64::max);
            if max_cost == 0.0 {
                dail_core::ot::sinkhorn_default(&pa, &pb)?
            } else {
                sinkhorn(
                    &pa,
                    &pb,
                    rc.ot.eps_rel * max_cost,
                    rc.ot.max_iters,
                    rc.ot.tol,
                )?
            }
        }
    };
    print_json(&json!({
        "distance": res.distance,
        "marginal_error": res.plan.marginal_error,
        "converged": res.converged,
        "iterations": res.iterations,
        "n": pa.len(),
        "m": pb.len(),
    }))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn analyze(specs: &[String], kde_points: usize, out: Option<PathBuf>) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<RunFile>> = BTreeMap::new();
    for spec in specs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (Some(l.to_string()), p),
            None => (None, spec.as_str()),
        };
        let run: RunFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        groups
            .entry(label.unwrap_or_else(|| run.config.ra.clone()))
            .or_default()
            .push(run);
    }
    let grid = linspace(-10.0, 10.0, kde_points.max(2));
    let mut labels = serde_json::Map::new();
    for (label, runs) in &groups {
        let norm: Vec<f64> = runs.iter().map(|r| r.normalized_return).collect();
        let w: Vec<f64> = runs.iter().map(|r| r.wasserstein).collect();
        let ent: Vec<f64> = runs.iter().map(|r| r.eval_entropy).collect();
        let iters = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
        let entropy_curve: Vec<f64> = (0..iters)
            .map(|i| {
                mean(
                    &runs
                        .iter()
                        .map(|r| r.metrics[i].entropy)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let logits: Vec<f64> = runs
            .iter()
            .flat_map(|r| r.eval_logits.iter().copied())
            .collect();
        let kde = kde_gaussian(&logits, &grid).ok();
        labels.insert(
            label.clone(),
            json!({
                "runs": runs.len(),
                "normalized_return": {"mean": mean(&norm), "values": norm},
                "wasserstein": {"mean": mean(&w), "values": w},
                "eval_entropy": {"mean": mean(&ent), "values": ent},
                "entropy_curve": entropy_curve,
                "log_ratio": {
                    "count": logits.len(),
                    "fraction_in_minus2_0": mass_in(&logits, -2.0, 0.0),
                    "fraction_in_minus1_0": mass_in(&logits, -1.0, 0.0),
                    "kde_mass_minus2_0": kde_mass(&logits, -2.0, 0.0, 401).ok(),
                    "kde_grid": kde.as_ref().map(|_| grid.clone()),
                    "kde_density": kde,
                },
            }),
        );
    }
    let mut pi = Vec::new();
    for (a, ra) in &groups {
        for (b, rb) in &groups {
            if a == b {
                continue;
            }
            let na: Vec<f64> = ra.iter().map(|r| r.normalized_return).collect();
            let nb: Vec<f64> = rb.iter().map(|r| r.normalized_return).collect();
            let wa: Vec<f64> = ra.iter().map(|r| -r.wasserstein).collect();
            let wb: Vec<f64> = rb.iter().map(|r| -r.wasserstein).collect();
            pi.push(json!({
                "a": a,
                "b": b,
                "normalized_return": prob_improvement(&na, &nb),
                "neg_wasserstein": prob_improvement(&wa, &wb),
            }));
        }
    }
    let report = json!({"labels": labels, "prob_improvement": pi});
    match out {
        Some(p) => {
            serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &report)?;
            print_json(&json!({"out": p}))
        }
        None => print_json(&report),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::CollectExpert {
            cfg,
            demos,
            stride,
            out,
        } => collect_expert(cfg, demos, stride, &out),
        Cmd::Train {
            cfg,
            ra,
            demos,
            algo,
            iterations,
            out,
            metrics,
        } => train(cfg, ra, demos, algo, iterations, &out, metrics),
        Cmd::Evolve {
            cfg,
            demos,
            generations,
            pairs,
            per_pair,
            topk,
            seeds,
            llm,
            local_only,
            mock,
            out,
        } => evolve(
            cfg,
            demos,
            [generations, pairs, per_pair, topk, seeds],
            llm,
            local_only,
            mock,
            &out,
        ),
        Cmd::EvalRa { func, grid, out } => eval_ra_cmd(&func, &grid, &out),
        Cmd::Wdist {
            a,
            b,
            method,
            cap,
            cfg,
        } => wdist(&a, &b, method, cap, cfg),
        Cmd::Analyze {
            runs,
            kde_points,
            out,
        } => analyze(&runs, kde_points, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind, "message": e.message}});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
