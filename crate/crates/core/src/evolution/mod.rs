//! Evolutionary search over reward-assignment functions.
//!
//! Each generation samples parent pairs from the population, asks a chat
//! model (or the local mutation operators) for offspring, scores every
//! offspring by the negative W2 distance its trained policy reaches, and keeps
//! the best `K` of parents and offspring together.

pub mod llm;
pub mod local;

use std::cmp::Ordering;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ail::{random_policy_w2, run_fail, AilConfig, AilError};
use crate::envs::DemoSet;
use crate::ra::{all_builtins, named_ra, parse, RaExpr, RaFunction, RaSource};
use crate::rng::{child, derive_seed, Rng};

pub use llm::{
    extract_fenced_block, ChatClient, HttpChatClient, LlmConfig, LlmError, MockChatClient,
    PromptBundle,
};
pub use local::{
    apply_local_op, crossover_local, is_valid_candidate, LocalChild, LocalOp, SwapPoints,
};

/// The four classic reward assignments the search starts from.
pub const BASE_NAMES: [&str; 4] = ["gail", "fairl", "airl", "gail_heuristic"];

/// Failed runs score this multiple of the random-policy W2, negated.
pub const WORST_FACTOR: f64 = 10.0;

mod stream {
    pub const PAIRS: u64 = 101;
    pub const LOCAL: u64 = 102;
    pub const EVAL_SEEDS: u64 = 103;
    pub const BASELINE: u64 = 104;
}

#[derive(Debug, thiserror::Error)]
pub enum EvoError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("population of {0} is too small to sample pairs from")]
    PopulationTooSmall(usize),
    #[error("random-policy baseline failed: {0}")]
    Baseline(#[from] AilError),
    #[error("history ledger: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub generations: usize,
    pub pairs: usize,
    pub per_pair: usize,
    pub topk: usize,
    pub eval_seeds: usize,
    pub seed: u64,
    /// Chat endpoint; `None` (the value when a file omits it) runs local
    /// crossover only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmConfig>,
    /// Use local crossover for pairs whose chat request fails.
    pub local_fallback: bool,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            generations: 10,
            pairs: 20,
            per_pair: 1,
            topk: 10,
            eval_seeds: 16,
            seed: 0,
            llm: Some(LlmConfig::default()),
            local_fallback: true,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        if self.pairs * self.per_pair == 0 {
            return Err(EvoError::Config(
                "pairs x candidates per pair must be at least 1".into(),
            ));
        }
        if self.topk == 0 {
            return Err(EvoError::Config("selection size must be at least 1".into()));
        }
        if self.eval_seeds == 0 {
            return Err(EvoError::Config(
                "at least one evaluation seed is required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub ra: RaFunction,
    /// Mean of `scores`; `None` until evaluated.
    pub fitness: Option<f64>,
    pub scores: Vec<f64>,
    /// Seeds whose run aborted and scored the worst fitness.
    pub failures: usize,
    pub generation: usize,
    pub parents: Vec<u64>,
}

impl Candidate {
    pub fn new(id: u64, ra: RaFunction, generation: usize, parents: Vec<u64>) -> Self {
        Candidate {
            id,
            ra,
            fitness: None,
            scores: Vec::new(),
            failures: 0,
            generation,
            parents,
        }
    }

    pub fn dsl(&self) -> String {
        self.ra.expr.serialize()
    }

    pub fn source(&self) -> RaSource {
        self.ra.source
    }

    fn fitness_key(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Descending fitness, then fewer nodes, then serialization.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness_key()
        .total_cmp(&a.fitness_key())
        .then_with(|| a.ra.expr.node_count().cmp(&b.ra.expr.node_count()))
        .then_with(|| a.dsl().cmp(&b.dsl()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Candidate>,
    pub capacity: usize,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.members.first()
    }

    pub fn best_fitness(&self) -> Option<f64> {
        self.members
            .iter()
            .filter_map(|c| c.fitness)
            .reduce(f64::max)
    }
}

/// GAIL, FAIRL, AIRL and the GAIL heuristic as generation-0 candidates.
pub fn base_population() -> Population {
    let members: Vec<Candidate> = BASE_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| {
            Candidate::new(
                i as u64,
                named_ra(n).expect("base names are builtins"),
                0,
                vec![],
            )
        })
        .collect();
    Population {
        capacity: members.len(),
        members,
    }
}

/// `m` pairs of distinct population indices.
pub fn sample_pairs(
    pop: &Population,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>, EvoError> {
    if pop.len() < 2 {
        return Err(EvoError::PopulationTooSmall(pop.len()));
    }
    Ok((0..m)
        .map(|_| {
            let v = sample(rng, pop.len(), 2);
            (v.index(0), v.index(1))
        })
        .collect())
}

/// Union of population and offspring, ranked by [`rank_order`], cut to `k`.
pub fn select_topk(pop: &Population, offspring: &[Candidate], k: usize) -> Population {
    let mut members: Vec<Candidate> = pop.members.iter().chain(offspring).cloned().collect();
    members.sort_by(rank_order);
    members.truncate(k);
    Population {
        members,
        capacity: k,
    }
}

/// One chat response and what became of it.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmProposal {
    pub prompt: PromptBundle,
    pub response: Option<String>,
    pub outcome: Result<RaExpr, String>,
}

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn check_proposal(text: &str, forbidden: &[String]) -> Result<RaExpr, String> {
    let block = extract_fenced_block(text).ok_or("no fenced code block")?;
    let expr = parse(&block).map_err(|e| format!("parse error: {e}"))?;
    if !is_valid_candidate(&expr) {
        return Err("failed validation".into());
    }
    let s = expr.serialize();
    if forbidden.contains(&s) {
        return Err(format!("duplicate of an existing function: {s}"));
    }
    Ok(expr)
}

/// Requests `n` offspring for a parent pair. Transport failures after the
/// client's retries end the pair early; they are returned as `Err` only if
/// no request got through at all.
pub fn crossover_llm(
    client: &dyn ChatClient,
    parents: [&Candidate; 2],
    n: usize,
) -> Result<Vec<LlmProposal>, LlmError> {
    let prompt = PromptBundle::render(
        [&parents[0].dsl(), &parents[1].dsl()],
        [parents[0].fitness_key(), parents[1].fitness_key()],
    );
    let mut forbidden: Vec<String> = all_builtins().iter().map(|f| f.expr.serialize()).collect();
    forbidden.extend(parents.iter().map(|p| p.dsl()));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        match client.complete(&prompt.system, &prompt.user) {
            Ok(text) => {
                let outcome = check_proposal(&text, &forbidden);
                if let Err(reason) = &outcome {
                    log::info!("rejected chat proposal: {reason}");
                }
                out.push(LlmProposal {
                    prompt: prompt.clone(),
                    response: Some(text),
                    outcome,
                });
            }
            Err(e) => {
                log::warn!("chat request failed: {e}");
                if out.is_empty() {
                    return Err(e);
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Scores every candidate on every seed; `None` is an aborted run.
fn run_jobs(
    cands: &[Candidate],
    demos: &DemoSet,
    ail_cfg: &AilConfig,
    seeds: &[u64],
) -> Vec<Option<f64>> {
    let jobs: Vec<(usize, u64)> = (0..cands.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, seed)| {
            let cfg = AilConfig {
                ra: cands[c].ra.clone(),
                ..ail_cfg.clone()
            };
            match catch_unwind(AssertUnwindSafe(|| run_fail(&cfg, demos, seed))) {
                Ok(Ok(r)) if r.wasserstein.is_finite() => Some(-r.wasserstein),
                Ok(Ok(_)) => None,
                Ok(Err(e)) => {
                    log::warn!("candidate {} seed {seed} aborted: {e}", cands[c].id);
                    None
                }
                Err(_) => {
                    log::warn!("candidate {} seed {seed} panicked", cands[c].id);
                    None
                }
            }
        })
        .collect()
}

/// Fills in per-seed scores and fitness; aborted runs score `worst`.
pub fn evaluate(
    cands: &mut [Candidate],
    demos: &DemoSet,
    ail_cfg: &AilConfig,
    seeds: &[u64],
    worst: f64,
) {
    let results = run_jobs(cands, demos, ail_cfg, seeds);
    for (c, chunk) in cands.iter_mut().zip(results.chunks(seeds.len().max(1))) {
        c.scores = chunk.iter().map(|r| r.unwrap_or(worst)).collect();
        c.failures = chunk.iter().filter(|r| r.is_none()).count();
        c.fitness = Some(c.scores.iter().sum::<f64>() / c.scores.len().max(1) as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Evaluated,
    Rejected,
}

/// One line of the history ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub id: Option<u64>,
    pub generation: usize,
    pub parents: Vec<u64>,
    pub source: RaSource,
    pub status: RecordStatus,
    pub dsl: Option<String>,
    pub scores: Vec<f64>,
    pub fitness: Option<f64>,
    pub failures: usize,
    pub reason: Option<String>,
    pub prompt_hash: Option<String>,
    pub response_hash: Option<String>,
    pub prompt: Option<String>,
    pub response: Option<String>,
}

impl HistoryRecord {
    fn evaluated(c: &Candidate, exchange: Option<(&PromptBundle, &str)>) -> Self {
        HistoryRecord {
            id: Some(c.id),
            generation: c.generation,
            parents: c.parents.clone(),
            source: c.source(),
            status: RecordStatus::Evaluated,
            dsl: Some(c.dsl()),
            scores: c.scores.clone(),
            fitness: c.fitness,
            failures: c.failures,
            reason: None,
            prompt_hash: exchange.map(|(p, _)| sha256_hex(&p.full_text())),
            response_hash: exchange.map(|(_, r)| sha256_hex(r)),
            prompt: exchange.map(|(p, _)| p.full_text()),
            response: exchange.map(|(_, r)| r.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvoOutcome {
    pub best: Candidate,
    pub population: Population,
    pub history: Vec<HistoryRecord>,
    /// Best fitness after selection in each generation, generation 0 first.
    pub best_per_generation: Vec<f64>,
    pub random_w2: f64,
    pub worst_fitness: f64,
}

/// Evaluation seeds shared by every candidate of a run.
pub fn eval_seeds(cfg: &EvoConfig) -> Vec<u64> {
    (0..cfg.eval_seeds as u64)
        .map(|i| derive_seed(derive_seed(cfg.seed, stream::EVAL_SEEDS), i))
        .collect()
}

struct Ledger<'a> {
    records: Vec<HistoryRecord>,
    sink: Option<&'a mut dyn Write>,
}

impl Ledger<'_> {
    fn push(&mut self, r: HistoryRecord) -> Result<(), EvoError> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut **w, &r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Runs the full search. With `client = None` offspring come from local
/// crossover when `cfg.local_fallback` is set and no pairs are bred otherwise.
pub fn run_evolution(
    cfg: &EvoConfig,
    ail_cfg: &AilConfig,
    demos: &DemoSet,
    client: Option<&dyn ChatClient>,
    sink: Option<&mut dyn Write>,
) -> Result<EvoOutcome, EvoError> {
    cfg.validate()?;
    ail_cfg.validate().map_err(EvoError::Baseline)?;
    let random_w2 = random_policy_w2(ail_cfg, demos, derive_seed(cfg.seed, stream::BASELINE))?;
    let worst = -WORST_FACTOR * random_w2;
    let seeds = eval_seeds(cfg);
    let mut pair_rng = child(cfg.seed, stream::PAIRS);
    let mut local_rng = child(cfg.seed, stream::LOCAL);
    let mut ledger = Ledger {
        records: Vec::new(),
        sink,
    };

    let mut base = base_population();
    evaluate(&mut base.members, demos, ail_cfg, &seeds, worst);
    for c in &base.members {
        ledger.push(HistoryRecord::evaluated(c, None))?;
    }
    let mut pop = select_topk(&base, &[], cfg.topk);
    let mut next_id = base.len() as u64;
    let mut best_per_generation = vec![pop.best_fitness().unwrap_or(worst)];

    for g in 1..=cfg.generations {
        let pairs = sample_pairs(&pop, cfg.pairs, &mut pair_rng)?;
        let mut offspring: Vec<Candidate> = Vec::new();
        let mut exchanges: Vec<Option<(PromptBundle, String)>> = Vec::new();
        for (i, j) in pairs {
            // Fitter parent first: it is the local fallback's copy source.
            let (a, b) = (&pop.members[i], &pop.members[j]);
            let (p1, p2) = if rank_order(a, b) == Ordering::Greater {
                (b, a)
            } else {
                (a, b)
            };
            let parents = vec![p1.id, p2.id];
            let mut need_local = client.is_none() && cfg.local_fallback;
            if let Some(client) = client {
                match crossover_llm(client, [p1, p2], cfg.per_pair) {
                    Ok(proposals) => {
                        for p in proposals {
                            let response = p.response.unwrap_or_default();
                            match p.outcome {
                                Ok(expr) => {
                                    let ra = RaFunction::new(
                                        format!("cand{next_id}"),
                                        expr,
                                        RaSource::Llm,
                                    );
                                    offspring.push(Candidate::new(next_id, ra, g, parents.clone()));
                                    exchanges.push(Some((p.prompt, response)));
                                    next_id += 1;
                                }
                                Err(reason) => ledger.push(HistoryRecord {
                                    id: None,
                                    generation: g,
                                    parents: parents.clone(),
                                    source: RaSource::Llm,
                                    status: RecordStatus::Rejected,
                                    dsl: None,
                                    scores: vec![],
                                    fitness: None,
                                    failures: 0,
                                    reason: Some(reason),
                                    prompt_hash: Some(sha256_hex(&p.prompt.full_text())),
                                    response_hash: Some(sha256_hex(&response)),
                                    prompt: Some(p.prompt.full_text()),
                                    response: Some(response),
                                })?,
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("pair ({}, {}) got no chat response: {e}", p1.id, p2.id);
                        need_local = cfg.local_fallback;
                    }
                }
            }
            if need_local {
                for _ in 0..cfg.per_pair {
                    let child = crossover_local(&p1.ra.expr, &p2.ra.expr, &mut local_rng);
                    let ra = RaFunction::new(
                        format!("cand{next_id}"),
                        child.expr,
                        RaSource::LocalMutation,
                    );
                    offspring.push(Candidate::new(next_id, ra, g, parents.clone()));
                    exchanges.push(None);
                    next_id += 1;
                }
            }
        }
        evaluate(&mut offspring, demos, ail_cfg, &seeds, worst);
        for (c, ex) in offspring.iter().zip(&exchanges) {
            ledger.push(HistoryRecord::evaluated(
                c,
                ex.as_ref().map(|(p, r)| (p, r.as_str())),
            ))?;
        }
        pop = select_topk(&pop, &offspring, cfg.topk);
        best_per_generation.push(pop.best_fitness().unwrap_or(worst));
    }

    let best = pop.best().cloned().expect("population is never empty");
    Ok(EvoOutcome {
        best,
        population: pop,
        history: ledger.records,
        best_per_generation,
        random_w2,
        worst_fitness: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn scored(id: u64, name: &str, fitness: f64) -> Candidate {
        let mut c = Candidate::new(id, named_ra(name).unwrap(), 0, vec![]);
        c.fitness = Some(fitness);
        c.scores = vec![fitness];
        c
    }

    #[test]
    fn base_population_is_table_one() {
        let p = base_population();
        assert_eq!(p.len(), 4);
        let dsl: Vec<String> = p.members.iter().map(Candidate::dsl).collect();
        assert_eq!(
            dsl,
            [
                "softplus(x)",
                "(neg(x) * exp(x))",
                "x",
                "neg(softplus(neg(x)))"
            ]
        );
        assert!(p
            .members
            .iter()
            .all(|c| c.source() == RaSource::Builtin && c.generation == 0));
    }

    #[test]
    fn pairs_are_distinct_and_seeded() {
        let p = base_population();
        let a = sample_pairs(&p, 50, &mut seeded(3)).unwrap();
        assert_eq!(a, sample_pairs(&p, 50, &mut seeded(3)).unwrap());
        assert!(a.iter().all(|(i, j)| i != j && *i < 4 && *j < 4));
        let two = Population {
            members: p.members[..2].to_vec(),
            capacity: 2,
        };
        let (i, j) = sample_pairs(&two, 1, &mut seeded(0)).unwrap()[0];
        assert_eq!((i.min(j), i.max(j)), (0, 1));
        let one = Population {
            members: p.members[..1].to_vec(),
            capacity: 1,
        };
        assert!(matches!(
            sample_pairs(&one, 1, &mut seeded(0)),
            Err(EvoError::PopulationTooSmall(1))
        ));
    }

    #[test]
    fn selection_union_and_ties() {
        let pop = Population {
            members: vec![scored(0, "gail", -1.0), scored(1, "airl", -2.0)],
            capacity: 2,
        };
        let worse = vec![scored(2, "fairl", -5.0)];
        assert_eq!(select_topk(&pop, &worse, 2), pop);
        let all = select_topk(&pop, &worse, 10);
        assert_eq!(all.len(), 3);
        // Equal fitness: fewer nodes first (dail last), then the lexicographic
        // form (sigmoid(x) < softplus(x)).
        let tie = vec![scored(3, "dail", -1.0), scored(4, "sigmoid_only", -1.0)];
        let top = select_topk(&pop, &tie, 3);
        let ids: Vec<u64> = top.members.iter().map(|c| c.id).collect();
        assert_eq!(ids, [4, 0, 3]);
    }

    #[test]
    fn llm_crossover_outcomes() {
        let p = base_population();
        let parents = [&p.members[0], &p.members[1]];
        let ok = MockChatClient::new(vec!["```\n0.5*sigmoid(x)*(tanh(x)+1)\n```".into()]);
        let r = crossover_llm(&ok, parents, 1).unwrap();
        // dail is a builtin, so it counts as a duplicate.
        assert!(r[0].outcome.as_ref().unwrap_err().contains("duplicate"));
        let fresh = MockChatClient::new(vec!["```\n0.25*sigmoid(x)*(tanh(x)+1)\n```".into()]);
        let r = crossover_llm(&fresh, parents, 1).unwrap();
        assert_eq!(
            r[0].outcome.as_ref().unwrap().serialize(),
            "((0.25 * sigmoid(x)) * (tanh(x) + 1))"
        );
        let junk = MockChatClient::new(vec!["```\nsigmoid(\n```".into(), "no code".into()]);
        let r = crossover_llm(&junk, parents, 2).unwrap();
        assert!(r.iter().all(|p| p.outcome.is_err()));
        let echo = MockChatClient::new(vec!["```\nsoftplus(x)\n```".into()]);
        assert!(crossover_llm(&echo, parents, 1).unwrap()[0]
            .outcome
            .is_err());
        let exploding = MockChatClient::new(vec!["```\nexp(exp(x))\n```".into()]);
        assert!(crossover_llm(&exploding, parents, 1).unwrap()[0]
            .outcome
            .is_err());
    }

    struct Down;
    impl ChatClient for Down {
        fn complete(&self, _: &str, _: &str) -> Result<String, LlmError> {
            Err(LlmError::Transport("offline".into()))
        }
    }

    #[test]
    fn transport_failure_surfaces() {
        let p = base_population();
        assert!(crossover_llm(&Down, [&p.members[0], &p.members[1]], 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EvoConfig::default().validate().is_ok());
        let d = EvoConfig::default();
        assert_eq!(
            (d.generations, d.pairs, d.per_pair, d.topk, d.eval_seeds),
            (10, 20, 1, 10, 16)
        );
        assert!(EvoConfig {
            pairs: 0,
            ..EvoConfig::default()
        }
        .validate()
        .is_err());
        assert!(EvoConfig {
            topk: 0,
            ..EvoConfig::default()
        }
        .validate()
        .is_err());
    }
}
