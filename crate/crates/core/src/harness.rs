//! Config-driven experiments: generate an instance per seed, explore,
//! exploit and score the learned map against the truth.
//!
//! Seeds run on a scoped worker pool. Every seed owns its instance, session
//! and generators, and the report is merged in seed order, so reruns with the
//! same master seed are byte-identical apart from the `timing` block.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context_dep::{
    exploit_context_dep, explore_kcdd, explore_ucdd, is_member, ucdd_layer_episodes, CdConfig, CdLearnedModel,
};
use crate::context_free::{exploit_context_free, explore_kcfd, explore_ucfd, CfConfig, CfLearnedModel};
use crate::env::{generate, DynamicsFamily, EnvHandle, EnvSession, EpisodeSource, GenSpec, RewardFamily};
use crate::erm::{Input, Loss};
use crate::error::{LabError, Result};
use crate::mdp::{rng_from_seed, Context, Dynamics, LabRng, Policy};
use crate::oracles::{monte_carlo_suboptimality, suboptimality_by, Frequency};
use crate::params::Algorithm;
use crate::planner::ffp;

/// Version tag carried by every report.
pub const SCHEMA: &str = "cmdp-lab/1";
/// Largest finite context set scored by the exact oracle.
pub const EXACT_CONTEXT_LIMIT: usize = 64;
/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "CMDP_LAB_OUT";

const TOL: f64 = 1e-9;
const STREAMS: u64 = 3;
const ENV_STREAM: u64 = 0;
const LEARN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(LabError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

fn default_pass_rate() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Per-seed bound on the suboptimality; the learner's `eps` when absent.
    #[serde(default)]
    pub max_suboptimality: Option<f64>,
    /// Fraction of seeds that must pass.
    #[serde(default = "default_pass_rate")]
    pub min_pass_rate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_suboptimality: None,
            min_pass_rate: default_pass_rate(),
        }
    }
}

fn one() -> u64 {
    1
}

fn default_eval_contexts() -> u64 {
    1000
}

fn yes() -> bool {
    true
}

/// One experiment, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub env: GenSpec,
    /// A `CfConfig` for the context-free learners, a `CdConfig` otherwise.
    pub learner: Value,
    #[serde(default = "one")]
    pub n_seeds: u64,
    /// Fresh contexts for Monte-Carlo scoring of large or infinite context sets.
    #[serde(default = "default_eval_contexts")]
    pub n_eval_contexts: u64,
    #[serde(default)]
    pub master_seed: u64,
    /// Draw a new instance per seed; otherwise every seed shares `env.seed`.
    #[serde(default = "yes")]
    pub vary_env: bool,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub thresholds: Thresholds,
}

/// The parsed learner section.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerConfig {
    ContextFree(CfConfig),
    ContextDep(CdConfig),
}

impl LearnerConfig {
    pub fn eps(&self) -> f64 {
        match self {
            LearnerConfig::ContextFree(c) => c.eps,
            LearnerConfig::ContextDep(c) => c.eps,
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            LearnerConfig::ContextFree(c) => c.delta,
            LearnerConfig::ContextDep(c) => c.delta,
        }
    }

    pub fn loss(&self) -> Loss {
        match self {
            LearnerConfig::ContextFree(c) => c.loss,
            LearnerConfig::ContextDep(c) => c.loss,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn learner_config(&self) -> Result<LearnerConfig> {
        let parsed = if self.algorithm.context_free() {
            serde_json::from_value(self.learner.clone()).map(LearnerConfig::ContextFree)
        } else {
            serde_json::from_value(self.learner.clone()).map(LearnerConfig::ContextDep)
        };
        parsed.map_err(|e| LabError::Config(format!("learner section for {}: {e}", self.algorithm)))
    }

    /// Checks the config and the algorithm/instance compatibility.
    pub fn validate(&self) -> Result<LearnerConfig> {
        let learner = self.learner_config()?;
        if self.n_seeds == 0 {
            return Err(LabError::Config("n_seeds must be at least 1".into()));
        }
        self.env.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if self.algorithm.context_free() && self.env.dynamics_family != DynamicsFamily::ContextFreeRandom {
            return Err(LabError::Config(format!(
                "{} needs context-free dynamics (dynamics_family = context_free_random)",
                self.algorithm
            )));
        }
        if self.algorithm.known_dynamics() && !self.env.known_dynamics {
            return Err(LabError::Config(format!(
                "{} needs known dynamics (known_dynamics = true)",
                self.algorithm
            )));
        }
        if self.algorithm == Algorithm::Ucdd && self.env.reward_family != RewardFamily::LinearClipped {
            return Err(LabError::Config("ucdd needs linear_clipped rewards".into()));
        }
        let exact = self.env.n_contexts > 0 && self.env.n_contexts <= EXACT_CONTEXT_LIMIT;
        if !exact && self.n_eval_contexts < 2 {
            return Err(LabError::Config("Monte-Carlo scoring needs n_eval_contexts >= 2".into()));
        }
        let rate = self.thresholds.min_pass_rate;
        if !(0.0..=1.0).contains(&rate) {
            return Err(LabError::Config(format!("min_pass_rate {rate} outside [0, 1]")));
        }
        if let Some(t) = self.thresholds.max_suboptimality {
            if !t.is_finite() {
                return Err(LabError::Config("max_suboptimality must be finite".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(LabError::Config("workers must be at least 1".into()));
        }
        Ok(learner)
    }
}

/// Generator for stream `which` of seed `index`.
pub fn seed_stream(master: u64, index: u64, which: u64) -> LabRng {
    let mut rng = rng_from_seed(master);
    rng.set_stream(index * STREAMS + which);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub env_seed: u64,
    pub episodes_used: u64,
    pub rollouts: u64,
    pub suboptimality: Option<f64>,
    /// Standard error of a Monte-Carlo score.
    pub std_error: Option<f64>,
    pub evaluation: Option<Evaluation>,
    /// Properties that hold on every run.
    pub invariants: BTreeMap<String, bool>,
    /// High-probability events of the analysis, checked against the truth.
    pub good_events: BTreeMap<String, bool>,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: u64,
    pub completed: u64,
    pub mean_episodes: f64,
    pub mean_suboptimality: Option<f64>,
    pub max_suboptimality: Option<f64>,
    pub pass: Frequency,
    pub invariants: BTreeMap<String, Frequency>,
    pub good_events: BTreeMap<String, Frequency>,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedReport]) -> Self {
        let n = seeds.len() as u64;
        let gaps: Vec<f64> = seeds.iter().filter_map(|s| s.suboptimality).collect();
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let episodes: Vec<f64> = seeds.iter().map(|s| s.episodes_used as f64).collect();
        Self {
            n_seeds: n,
            completed: seeds.iter().filter(|s| s.error.is_none()).count() as u64,
            mean_episodes: mean(&episodes).unwrap_or(0.0),
            mean_suboptimality: mean(&gaps),
            max_suboptimality: gaps.iter().copied().reduce(f64::max),
            pass: Frequency::wilson(seeds.iter().filter(|s| s.passed).count() as u64, n),
            invariants: tally(seeds.iter().map(|s| &s.invariants)),
            good_events: tally(seeds.iter().map(|s| &s.good_events)),
        }
    }
}

fn tally<'a>(maps: impl Iterator<Item = &'a BTreeMap<String, bool>>) -> BTreeMap<String, Frequency> {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for m in maps {
        for (k, &ok) in m {
            let e = counts.entry(k.clone()).or_default();
            e.0 += u64::from(ok);
            e.1 += 1;
        }
    }
    counts.into_iter().map(|(k, (s, n))| (k, Frequency::wilson(s, n))).collect()
}

/// Wall-clock measurements; the only nondeterministic part of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub seeds_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub algorithm: Algorithm,
    pub master_seed: u64,
    pub threshold: f64,
    pub min_pass_rate: f64,
    /// The learner's failure budget, reported next to the measured good-event rates.
    pub delta: f64,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub passed: bool,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl Report {
    pub fn without_timing(&self) -> Report {
        Report {
            timing: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per seed.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            schema: &'a str,
            algorithm: String,
            seed: u64,
            env_seed: u64,
            episodes_used: u64,
            suboptimality: Option<f64>,
            std_error: Option<f64>,
            passed: bool,
            error: Option<&'a str>,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.seeds {
            w.serialize(Row {
                schema: SCHEMA,
                algorithm: self.algorithm.to_string(),
                seed: s.seed,
                env_seed: s.env_seed,
                episodes_used: s.episodes_used,
                suboptimality: s.suboptimality,
                std_error: s.std_error,
                passed: s.passed,
                error: s.error.as_deref(),
            })
            .map_err(csv_error)?;
        }
        finish_csv(w)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
        }
    }
}

fn csv_error(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| LabError::Io(std::io::Error::other(e)))
}

enum Learned {
    ContextFree(CfLearnedModel),
    ContextDep(CdLearnedModel),
}

impl Learned {
    fn policy(&self, c: &Arc<Context>) -> Result<Policy> {
        match self {
            Learned::ContextFree(m) => Ok(exploit_context_free(c, m)),
            Learned::ContextDep(m) => exploit_context_dep(c, m),
        }
    }

    fn episodes(&self) -> u64 {
        match self {
            Learned::ContextFree(m) => m.episodes,
            Learned::ContextDep(m) => m.episodes,
        }
    }
}

fn explore(
    algorithm: Algorithm,
    env: &EnvHandle,
    learner: &LearnerConfig,
    session: &mut EnvSession,
    rng: &mut LabRng,
) -> Result<Learned> {
    let missing_oracle = || LabError::Config(format!("{algorithm} needs known dynamics"));
    match (algorithm, learner) {
        (Algorithm::Kcfd, LearnerConfig::ContextFree(cfg)) => {
            let p = env.known_dynamics().ok_or_else(missing_oracle)?.shared()?;
            explore_kcfd(session, &p, &env.reward_classes, cfg, rng).map(Learned::ContextFree)
        }
        (Algorithm::Ucfd, LearnerConfig::ContextFree(cfg)) => {
            explore_ucfd(session, &env.reward_classes, cfg, rng).map(Learned::ContextFree)
        }
        (Algorithm::Kcdd, LearnerConfig::ContextDep(cfg)) => {
            let known = env.known_dynamics().ok_or_else(missing_oracle)?;
            explore_kcdd(session, &known, &env.reward_classes, cfg, rng).map(Learned::ContextDep)
        }
        (Algorithm::Ucdd, LearnerConfig::ContextDep(cfg)) => {
            let rewards = env
                .layer_reward_classes
                .as_ref()
                .ok_or_else(|| LabError::Config("ucdd needs linear_clipped rewards".into()))?;
            explore_ucdd(session, rewards, &env.layer_dynamics_classes, cfg, rng).map(Learned::ContextDep)
        }
        _ => Err(LabError::Config(format!("learner section does not match {algorithm}"))),
    }
}

/// Episodes implied by the budgets the learner recorded.
fn budgeted_episodes(model: &Learned) -> u64 {
    match model {
        Learned::ContextFree(m) => m.budgets.iter().map(|b| b.episodes).sum(),
        Learned::ContextDep(m) => match m.algorithm {
            Algorithm::Kcdd => {
                let tested = (0..m.layout.horizon()).map(|h| m.layout.true_size(h) as u64).sum::<u64>();
                tested * m.params.agc_draws + m.pair_budgets.iter().map(|b| b.episodes).sum::<u64>()
            }
            _ => m.layer_budgets.iter().map(|b| b.agc_draws + b.observed).sum(),
        },
    }
}

/// L1 distance over the true next states; the estimate's sink entry is ignored.
fn row_distance(estimate: &[f64], truth: &[f64]) -> f64 {
    truth.iter().zip(estimate).map(|(t, e)| (t - e).abs()).sum()
}

/// Checks run on every seed, with the truth in hand.
fn audit(
    env: &EnvHandle,
    model: &Learned,
    loss: Loss,
    invariants: &mut BTreeMap<String, bool>,
    good: &mut BTreeMap<String, bool>,
) -> Result<()> {
    invariants.insert("budget_audit".into(), model.episodes() == budgeted_episodes(model));
    let cmdp = env.cmdp();
    let finite = cmdp
        .finite_contexts()
        .filter(|(contexts, _)| contexts.len() <= EXACT_CONTEXT_LIMIT);

    match model {
        Learned::ContextFree(m) => {
            if m.algorithm == Algorithm::Ucfd {
                invariants.insert("tabular_rows_stochastic".into(), m.dynamics.validate().is_ok());
            }
            let Some((contexts, probs)) = finite else {
                return Ok(());
            };
            let fits = m.budgets.iter().all(|b| {
                let f = &m.predictors[b.h][b.s][b.a];
                let err: f64 = contexts
                    .iter()
                    .zip(probs)
                    .map(|(c, w)| w * loss.eval(f.eval(&Input::context(c.clone())), env.true_reward(c, b.h, b.s, b.a)))
                    .sum();
                err <= b.accuracy + TOL
            });
            good.insert("reward_accuracy".into(), fits);
            if let (Some(counters), Some(gamma), Some(n_p)) = (&m.counters, m.params.gamma, m.params.n_p) {
                let truth = cmdp.mdp_of(&contexts[0])?;
                let layout = env.layout();
                let mut within = true;
                for h in 0..layout.horizon() {
                    for s in layout.states(h) {
                        for a in 0..layout.n_actions() {
                            if counters.pair(h, s, a) >= n_p {
                                let d = row_distance(m.dynamics.row(h, s, a), truth.dynamics().row(h, s, a));
                                within &= d <= gamma + TOL;
                            }
                        }
                    }
                }
                good.insert("tabular_rows".into(), within);
            }
        }
        Learned::ContextDep(m) => {
            let beta = m.params.beta;
            if m.algorithm == Algorithm::Kcdd {
                let ordered = m
                    .pair_budgets
                    .iter()
                    .all(|b| b.accepted <= b.hits && b.hits <= b.rollouts && b.rollouts <= b.episodes);
                invariants.insert("acceptance_counts".into(), ordered);
            } else {
                let states = m.layout.n_states();
                let mut formula = true;
                for b in &m.layer_budgets {
                    formula &= b.episodes == ucdd_layer_episodes(&m.params, states, b.n_p, b.n_r)?;
                    formula &= b.observed == b.episodes || (b.observed == 0 && m.good_sets.sets[b.h].is_empty());
                }
                invariants.insert("layer_episodes_formula".into(), formula);
            }
            let Some((contexts, probs)) = finite else {
                return Ok(());
            };
            let mut dynamics: Vec<Arc<Dynamics>> = Vec::with_capacity(contexts.len());
            for c in contexts {
                dynamics.push(match m.algorithm {
                    Algorithm::Kcdd => cmdp.mdp_of(c)?.dynamics().clone(),
                    _ => {
                        let approx = m.acdd(c)?;
                        if approx.dynamics.validate().is_err() {
                            invariants.insert("acdd_stochastic".into(), false);
                        }
                        Arc::new(approx.dynamics)
                    }
                });
            }
            if m.algorithm == Algorithm::Ucdd {
                invariants.entry("acdd_stochastic".into()).or_insert(true);
            }
            let mut accurate = true;
            for h in 0..m.layout.horizon() {
                for s in m.layout.states(h) {
                    let mut p = 0.0;
                    for (d, w) in dynamics.iter().zip(probs) {
                        if is_member(ffp(d, h, s)?.prob, beta) {
                            p += w;
                        }
                    }
                    accurate &= (m.good_sets.p_hat[h][s] - p).abs() <= m.params.eps2 + TOL;
                }
            }
            good.insert("good_set_estimates".into(), accurate);
            if m.algorithm == Algorithm::Kcdd {
                let eps1 = m.params.eps1.unwrap_or(f64::INFINITY);
                let mut fits = true;
                for b in m.pair_budgets.iter().filter(|b| b.fitted) {
                    let f = &m.predictors[b.h][b.s][b.a];
                    let (mut err, mut mass) = (0.0, 0.0);
                    for ((c, d), w) in contexts.iter().zip(&dynamics).zip(probs) {
                        if is_member(ffp(d, b.h, b.s)?.prob, beta) {
                            let z = f.eval(&Input::context(c.clone()));
                            err += w * loss.eval(z, env.true_reward(c, b.h, b.s, b.a));
                            mass += w;
                        }
                    }
                    fits &= mass == 0.0 || err / mass <= eps1 + TOL;
                }
                good.insert("reward_accuracy".into(), fits);
            }
        }
    }
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, learner: &LearnerConfig, threshold: f64, index: u64) -> Result<SeedReport> {
    let env_seed = if cfg.vary_env {
        seed_stream(cfg.master_seed, index, ENV_STREAM).next_u64()
    } else {
        cfg.env.seed
    };
    let env = generate(&GenSpec {
        seed: env_seed,
        ..cfg.env.clone()
    })?;
    let mut rng = seed_stream(cfg.master_seed, index, LEARN_STREAM);
    let mut session = env.session();
    let mut report = SeedReport {
        seed: index,
        env_seed,
        episodes_used: 0,
        rollouts: 0,
        suboptimality: None,
        std_error: None,
        evaluation: None,
        invariants: BTreeMap::new(),
        good_events: BTreeMap::new(),
        passed: false,
        error: None,
    };
    let explored = explore(cfg.algorithm, &env, learner, &mut session, &mut rng);
    report.episodes_used = session.episodes();
    report.rollouts = session.rollouts();
    let model = match explored {
        Ok(m) => m,
        Err(e @ LabError::ExplorationFailed { .. }) => {
            report.error = Some(e.to_string());
            return Ok(report);
        }
        Err(e) => return Err(e),
    };

    let cmdp = env.cmdp();
    let policy_of = |c: &Arc<Context>| model.policy(c);
    match cmdp.finite_contexts() {
        Some((contexts, _)) if contexts.len() <= EXACT_CONTEXT_LIMIT => {
            report.suboptimality = Some(suboptimality_by(cmdp, policy_of)?);
            report.evaluation = Some(Evaluation::Exact);
        }
        _ => {
            let mut eval_rng = seed_stream(cfg.master_seed, index, EVAL_STREAM);
            let est = monte_carlo_suboptimality(cmdp, cfg.n_eval_contexts, policy_of, &mut eval_rng)?;
            report.suboptimality = Some(est.mean);
            report.std_error = Some(est.std_error);
            report.evaluation = Some(Evaluation::MonteCarlo);
        }
    }
    let gap = report.suboptimality.unwrap_or(f64::INFINITY);
    report
        .invariants
        .insert("suboptimality_nonnegative".into(), gap >= -TOL);
    report.invariants.insert(
        "episodes_counted".into(),
        model.episodes() == session.episodes(),
    );
    audit(&env, &model, learner.loss(), &mut report.invariants, &mut report.good_events)?;
    report.passed = gap <= threshold + TOL && report.invariants.values().all(|&ok| ok);
    Ok(report)
}

/// Runs every seed of `cfg` and assembles the report. Does not write files.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    let learner = cfg.validate()?;
    let threshold = cfg.thresholds.max_suboptimality.unwrap_or(learner.eps());
    let started = Instant::now();
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cfg.n_seeds as usize);

    let mut outcomes: Vec<(u64, Result<SeedReport>, f64)> = std::thread::scope(|scope| {
        let learner = &learner;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w as u64..cfg.n_seeds)
                        .step_by(workers)
                        .map(|i| {
                            let t = Instant::now();
                            let r = run_seed(cfg, learner, threshold, i);
                            (i, r, t.elapsed().as_secs_f64() * 1e3)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("seed worker panicked"))
            .collect()
    });
    outcomes.sort_by_key(|(i, _, _)| *i);

    let mut seeds = Vec::with_capacity(outcomes.len());
    let mut seeds_ms = Vec::with_capacity(outcomes.len());
    for (_, r, ms) in outcomes {
        seeds.push(r?);
        seeds_ms.push(ms);
    }
    let aggregate = Aggregate::from_seeds(&seeds);
    Ok(Report {
        schema: SCHEMA.into(),
        algorithm: cfg.algorithm,
        master_seed: cfg.master_seed,
        threshold,
        min_pass_rate: cfg.thresholds.min_pass_rate,
        delta: learner.delta(),
        passed: aggregate.pass.rate + 1e-12 >= cfg.thresholds.min_pass_rate,
        seeds,
        aggregate,
        config: cfg.clone(),
        timing: Some(Timing {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            seeds_ms,
        }),
    })
}

/// Output directory: the explicit flag, then `CMDP_LAB_OUT`, then the
/// config's `output`, then `./cmdp-lab-out`.
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("cmdp-lab-out"))
}

/// Writes `<dir>/<stem>.<format>` and returns its path.
pub fn write_text(dir: &Path, stem: &str, format: Format, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.{format}"));
    fs::write(&path, text)?;
    Ok(path)
}

/// A parameter grid over one dotted path of the config, e.g. `learner.eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub param: String,
    pub values: Vec<f64>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LabError::Config(e.to_string()))
    }
}

/// `base` with the number at dotted path `param` replaced by `value`.
pub fn with_param(base: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(base)?;
    let mut slot = &mut doc;
    for part in param.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| LabError::Config(format!("`{param}` does not name a config field")))?;
        slot = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    *slot = serde_json::Number::from_f64(value)
        .map(Value::Number)
        .ok_or_else(|| LabError::Config(format!("{value} is not a finite number")))?;
    serde_json::from_value(doc).map_err(|e| LabError::Config(format!("setting `{param}`: {e}")))
}

/// One run per grid value.
pub fn sweep(base: &ExperimentConfig, param: &str, values: &[f64]) -> Result<Vec<Report>> {
    if values.is_empty() {
        return Err(LabError::Config("sweep grid is empty".into()));
    }
    values.iter().map(|&v| run(&with_param(base, param, v)?)).collect()
}

/// Combined table: grid value, mean episodes and mean suboptimality.
pub fn sweep_csv(param: &str, values: &[f64], reports: &[Report]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema", param, "episodes_used", "suboptimality"])
        .map_err(csv_error)?;
    for (v, r) in values.iter().zip(reports) {
        let gap = r.aggregate.mean_suboptimality.map(|g| format!("{g:?}")).unwrap_or_default();
        w.write_record([SCHEMA.to_string(), format!("{v:?}"), format!("{:?}", r.aggregate.mean_episodes), gap])
            .map_err(csv_error)?;
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardNoise;

    pub(crate) fn kcfd_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "algorithm": "kcfd",
                "env": {"seed": 3, "layer_sizes": [1, 2, 2], "n_actions": 2, "n_contexts": 3,
                        "context_dim": 2, "reward_family": {"kind": "linear_clipped"},
                        "dynamics_family": "context_free_random", "reachability_floor": 0.3,
                        "noise": {"kind": "exact"}, "known_dynamics": true},
                "learner": {"eps": 0.3, "delta": 0.1, "loss": "l1", "b": 0.5, "constant_scale": 0.01,
                            "episode_cap": 200000},
                "n_seeds": 3,
                "workers": 2
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn kcfd_run_is_scored_and_audited() {
        let report = run(&kcfd_config()).unwrap();
        assert_eq!(report.schema, SCHEMA);
        assert_eq!(report.seeds.len(), 3);
        for s in &report.seeds {
            assert_eq!(s.evaluation, Some(Evaluation::Exact));
            assert!(s.invariants.values().all(|&ok| ok), "{:?}", s.invariants);
            assert!(s.episodes_used > 0);
        }
        assert_eq!(report.aggregate, Aggregate::from_seeds(&report.seeds));
    }

    #[test]
    fn worker_count_does_not_change_the_report() {
        let mut cfg = kcfd_config();
        let a = run(&cfg).unwrap().without_timing();
        cfg.workers = Some(1);
        let b = run(&cfg).unwrap().without_timing();
        assert_eq!(a.seeds, b.seeds);
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn incompatible_configs_are_config_errors() {
        let mut cfg = kcfd_config();
        cfg.env.known_dynamics = false;
        assert!(matches!(run(&cfg), Err(LabError::Config(_))));
        let mut cfg = kcfd_config();
        cfg.env.dynamics_family = DynamicsFamily::ContextLinearMixture;
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
        let mut cfg = kcfd_config();
        cfg.learner = serde_json::json!({"eps": 0.3});
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
        let mut cfg = kcfd_config();
        cfg.n_seeds = 0;
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
        assert!(matches!(ExperimentConfig::from_json("{"), Err(LabError::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"algorithm": "kcfd", "bogus": 1}"#),
            Err(LabError::Config(_))
        ));
    }

    #[test]
    fn with_param_sets_nested_numbers() {
        let cfg = with_param(&kcfd_config(), "learner.eps", 0.2).unwrap();
        assert_eq!(cfg.learner["eps"], 0.2);
        let cfg = with_param(&cfg, "env.reachability_floor", 0.25).unwrap();
        assert_eq!(cfg.env.reachability_floor, 0.25);
        assert_eq!(cfg.env.noise, RewardNoise::Exact);
        assert!(with_param(&cfg, "algorithm.x", 1.0).is_err());
    }

    #[test]
    fn sweep_rejects_an_empty_grid_and_tabulates() {
        let mut cfg = kcfd_config();
        cfg.n_seeds = 1;
        assert!(matches!(sweep(&cfg, "learner.eps", &[]), Err(LabError::Config(_))));
        let values = [0.4, 0.2];
        let reports = sweep(&cfg, "learner.eps", &values).unwrap();
        let table = sweep_csv("learner.eps", &values, &reports).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "schema,learner.eps,episodes_used,suboptimality");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("cmdp-lab/1,0.4,"));
    }

    #[test]
    fn csv_report_has_one_row_per_seed() {
        let report = run(&kcfd_config()).unwrap();
        let text = report.to_csv().unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("schema,algorithm,seed,"));
    }

    #[test]
    fn row_distance_skips_the_sink_entry() {
        assert!((row_distance(&[0.5, 0.3, 0.2], &[0.6, 0.4]) - 0.2).abs() < 1e-12);
        assert_eq!(row_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }
}
