//! Explore and exploit for CMDPs whose dynamics do not depend on the context.
//!
//! With known dynamics every sufficiently reachable state is visited through
//! its maximum-reachability policy, once per action, and the reward of each
//! pair is fit from the contexts seen there. With unknown dynamics the same
//! happens layer by layer on a tabular estimate of the kernel that routes
//! every under-sampled pair to an absorbing sink.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::EpisodeSource;
use crate::erm::{
    episodes_for_visits, erm_fit, n_dynamics_tabular, n_rewards, FunctionClass, Input, LabeledDataset, Loss,
    Predictor,
};
use crate::error::{LabError, Result, Site};
use crate::mdp::{Context, Dynamics, LabRng, Layout, Policy, RENORM_TOL};
use crate::params::{check_open_unit, Algorithm, Param, Sizes};
use crate::planner::{ffp, pap, plan_with, Reach};

fn default_true() -> bool {
    true
}

fn default_scale() -> f64 {
    1.0
}

/// Learner settings shared by KCFD and UCFD. Reward classes are passed
/// separately since they come with the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfConfig {
    pub eps: f64,
    pub delta: f64,
    pub loss: Loss,
    /// Accuracy-schedule constant; 6 for KCFD and 24 for UCFD when unset.
    #[serde(default)]
    pub b: Option<f64>,
    /// Reachability threshold.
    #[serde(default)]
    pub beta: Param,
    /// Per-row L1 accuracy of the tabular dynamics (UCFD).
    #[serde(default)]
    pub gamma: Param,
    /// Multiplies the reward budget `N_R`.
    #[serde(default = "default_scale")]
    pub constant_scale: f64,
    /// Require `eps / (24|S|) >= beta >= 2 gamma H` for UCFD.
    #[serde(default = "default_true")]
    pub enforce_parameter_bounds: bool,
    /// Keep the reward datasets in the learned model.
    #[serde(default)]
    pub keep_samples: bool,
    /// Also count transitions of pairs other than the one being sampled
    /// (never used for estimation).
    #[serde(default)]
    pub record_off_target: bool,
    /// Refuse any single budget above this many episodes.
    #[serde(default)]
    pub episode_cap: Option<u64>,
}

impl CfConfig {
    pub fn new(eps: f64, delta: f64, loss: Loss) -> Self {
        Self {
            eps,
            delta,
            loss,
            b: None,
            beta: Param::Default,
            gamma: Param::Default,
            constant_scale: 1.0,
            enforce_parameter_bounds: true,
            keep_samples: false,
            record_off_target: false,
            episode_cap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        check_open_unit("eps", self.eps)?;
        check_open_unit("delta", self.delta)?;
        if !(self.constant_scale > 0.0 && self.constant_scale.is_finite()) {
            return Err(LabError::InvalidParameter("constant_scale must be positive".into()));
        }
        if let Some(b) = self.b {
            if b.is_nan() || b <= 0.0 {
                return Err(LabError::InvalidParameter(format!("B must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Parameters after resolving defaults against the instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfParams {
    pub b: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub delta1: f64,
    /// Tabular threshold `N_P(gamma, delta1)` (UCFD).
    pub n_p: Option<u64>,
}

impl CfParams {
    pub fn resolve(algorithm: Algorithm, cfg: &CfConfig, sizes: Sizes) -> Result<Self> {
        cfg.validate()?;
        let (s, a, h) = (sizes.s(), sizes.a(), sizes.h());
        match algorithm {
            Algorithm::Kcfd => {
                let beta = cfg.beta.resolve(cfg.eps / (6.0 * s));
                check_open_unit("beta", beta)?;
                Ok(Self {
                    b: cfg.b.unwrap_or(6.0),
                    beta,
                    gamma: None,
                    delta1: cfg.delta / (4.0 * s * a),
                    n_p: None,
                })
            }
            Algorithm::Ucfd => {
                let beta = cfg.beta.resolve(cfg.eps / (24.0 * s * h));
                let gamma = cfg.gamma.resolve(cfg.eps / (48.0 * s * h * h));
                check_open_unit("beta", beta)?;
                check_open_unit("gamma", gamma)?;
                if cfg.enforce_parameter_bounds && !(cfg.eps / (24.0 * s) >= beta && beta >= 2.0 * gamma * h) {
                    return Err(LabError::InvalidParameter(format!(
                        "need eps/(24|S|) >= beta >= 2 gamma H, got beta={beta}, gamma={gamma}"
                    )));
                }
                // Keeps every episode budget denominator positive.
                if beta <= gamma * (h - 1.0) {
                    return Err(LabError::InvalidParameter(format!(
                        "beta={beta} must exceed gamma (H - 1) = {}",
                        gamma * (h - 1.0)
                    )));
                }
                let delta1 = cfg.delta / (6.0 * s * a * h);
                Ok(Self {
                    b: cfg.b.unwrap_or(24.0),
                    beta,
                    gamma: Some(gamma),
                    delta1,
                    n_p: None,
                })
            }
            other => Err(LabError::Config(format!("{other} is not a context-free algorithm"))),
        }
    }
}

/// Required accuracy of the reward fit at a state reached with probability
/// `p_hat`: 1 (no sampling) below `eps / (B|S|)`, `eps / (B H |S| |A|)`
/// above `1/|S|`, and `eps / (B p_hat |S| |A|)` in between. Squared for L2.
pub fn accuracy_per_state(p_hat: f64, eps: f64, b: f64, loss: Loss, sizes: Sizes) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(LabError::InvalidParameter(format!("visit probability {p_hat} outside [0, 1]")));
    }
    check_open_unit("eps", eps)?;
    if b.is_nan() || b <= 0.0 {
        return Err(LabError::InvalidParameter(format!("B must be positive, got {b}")));
    }
    let (s, a, h) = (sizes.s(), sizes.a(), sizes.h());
    let v = if p_hat < eps / (b * s) {
        1.0
    } else if p_hat > 1.0 / s {
        eps / (b * h * s * a)
    } else {
        eps / (b * p_hat * s * a)
    };
    Ok(match loss {
        Loss::L1 => v,
        Loss::L2 => v * v,
    })
}

/// Visit counts `n(s, a)` and `n(s' | s, a)` over the original states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    layout: Layout,
    pairs: Vec<Vec<u64>>,
    next: Vec<Vec<u64>>,
}

impl Counters {
    pub fn new(layout: &Layout) -> Self {
        let layout = layout.without_sink();
        let pairs = (0..layout.horizon())
            .map(|h| vec![0; layout.layer_size(h) * layout.n_actions()])
            .collect();
        let next = (0..layout.horizon())
            .map(|h| vec![0; layout.layer_size(h) * layout.n_actions() * layout.layer_size(h + 1)])
            .collect();
        Self { layout, pairs, next }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cell(&self, s: usize, a: usize) -> usize {
        s * self.layout.n_actions() + a
    }

    pub fn record(&mut self, h: usize, s: usize, a: usize, next: usize) {
        let cell = self.cell(s, a);
        let width = self.layout.layer_size(h + 1);
        self.pairs[h][cell] += 1;
        self.next[h][cell * width + next] += 1;
    }

    /// Overwrites the counts of one pair; `total` need not match (for
    /// exercising the consistency check).
    pub fn set(&mut self, h: usize, s: usize, a: usize, total: u64, counts: &[u64]) {
        let cell = self.cell(s, a);
        let width = self.layout.layer_size(h + 1);
        self.pairs[h][cell] = total;
        self.next[h][cell * width..(cell + 1) * width].copy_from_slice(counts);
    }

    pub fn pair(&self, h: usize, s: usize, a: usize) -> u64 {
        self.pairs[h][self.cell(s, a)]
    }

    pub fn next_counts(&self, h: usize, s: usize, a: usize) -> &[u64] {
        let cell = self.cell(s, a);
        let width = self.layout.layer_size(h + 1);
        &self.next[h][cell * width..(cell + 1) * width]
    }
}

/// Empirical kernel over the sink-augmented layout: the ratio
/// `n(s'|s,a) / n(s,a)` when `n(s,a) >= threshold` (and positive), the
/// sink otherwise.
pub fn tabular_estimate(counters: &Counters, threshold: u64) -> Result<Dynamics> {
    let base = counters.layout();
    let layout = base.with_sink();
    let mut d = Dynamics::zeros(layout.clone());
    d.wire_sink();
    for h in 0..base.horizon() {
        let sink = layout.sink(h + 1).expect("sink layouts carry a sink in every layer >= 1");
        for s in base.states(h) {
            for a in 0..base.n_actions() {
                let total = counters.pair(h, s, a);
                let counts = counters.next_counts(h, s, a);
                let sum: u64 = counts.iter().sum();
                if sum != total {
                    return Err(LabError::InconsistentCounters { h, s, a, sum, total });
                }
                let row = d.row_mut(h, s, a);
                if total > 0 && total >= threshold {
                    for (p, &n) in row.iter_mut().zip(counts) {
                        *p = n as f64 / total as f64;
                    }
                    // Absorb rounding so the row sums to one.
                    let drift = 1.0 - row.iter().sum::<f64>();
                    if drift.abs() > RENORM_TOL {
                        let (i, _) = counts.iter().enumerate().max_by_key(|(_, n)| **n).expect("row is non-empty");
                        row[i] += drift;
                    }
                } else {
                    row[sink] = 1.0;
                }
            }
        }
    }
    Ok(d)
}

/// Per-state reachability computed during exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachInfo {
    pub h: usize,
    pub s: usize,
    /// `p_s` (known dynamics) or `p_hat_s` on the estimate.
    pub prob: f64,
    pub sampled: bool,
    /// The maximum-reachability policy before any action override.
    pub policy: Policy,
}

/// Budget bookkeeping of one sampled pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBudget {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub accuracy: f64,
    pub required: u64,
    pub episodes: u64,
    pub collected: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfLearnedModel {
    pub algorithm: Algorithm,
    pub params: CfParams,
    /// `[h][s][a]` for the original states of layers `0..H`.
    pub predictors: Vec<Vec<Vec<Predictor>>>,
    /// True kernel (KCFD) or sink-augmented tabular estimate (UCFD).
    pub dynamics: Arc<Dynamics>,
    pub counters: Option<Counters>,
    pub off_target: Option<Counters>,
    pub reach: Vec<Vec<ReachInfo>>,
    pub budgets: Vec<PairBudget>,
    /// Contexts observed during exploration.
    pub episodes: u64,
    pub samples: Option<BTreeMap<(usize, usize, usize), LabeledDataset>>,
}

pub(crate) fn zero_predictors(layout: &Layout) -> Vec<Vec<Vec<Predictor>>> {
    (0..layout.horizon())
        .map(|h| layout.states(h).map(|_| vec![Predictor::zero(); layout.n_actions()]).collect())
        .collect()
}

fn check_cap(cfg: &CfConfig, episodes: u64) -> Result<()> {
    match cfg.episode_cap {
        Some(cap) if episodes > cap => Err(LabError::TooLarge { count: episodes as f64 }),
        _ => Ok(()),
    }
}

pub(crate) fn check_classes(layout: &Layout, classes: &[Vec<Vec<FunctionClass>>]) -> Result<()> {
    let ok = classes.len() >= layout.horizon()
        && (0..layout.horizon()).all(|h| {
            classes[h].len() >= layout.true_size(h) && classes[h].iter().all(|row| row.len() >= layout.n_actions())
        });
    if ok {
        Ok(())
    } else {
        Err(LabError::Config("reward classes do not cover every (h, s, a)".into()))
    }
}

/// Reward exploration with known context-free dynamics `p`.
pub fn explore_kcfd(
    source: &mut dyn EpisodeSource,
    p: &Arc<Dynamics>,
    classes: &[Vec<Vec<FunctionClass>>],
    cfg: &CfConfig,
    rng: &mut LabRng,
) -> Result<CfLearnedModel> {
    let layout = source.layout().clone();
    if p.layout() != &layout {
        return Err(LabError::Config("known dynamics do not match the environment layout".into()));
    }
    check_classes(&layout, classes)?;
    let sizes = Sizes::of(&layout);
    let params = CfParams::resolve(Algorithm::Kcfd, cfg, sizes)?;
    let table = pap(p);
    let mut predictors = zero_predictors(&layout);
    let mut reach = Vec::with_capacity(layout.horizon());
    let mut budgets = Vec::new();
    let mut samples = cfg.keep_samples.then(BTreeMap::new);
    let start = source.episodes();

    for (h, layer) in table.into_iter().enumerate() {
        let mut infos = Vec::with_capacity(layer.len());
        for (s, Reach { policy, prob }) in layer.into_iter().enumerate() {
            let sampled = prob >= params.beta;
            if sampled {
                let accuracy = accuracy_per_state(prob, cfg.eps, params.b, cfg.loss, sizes)?;
                for a in 0..layout.n_actions() {
                    let class = &classes[h][s][a];
                    let required = n_rewards(class, accuracy, params.delta1, cfg.constant_scale)?;
                    let episodes = episodes_for_visits(prob, params.delta1, required)?;
                    check_cap(cfg, episodes)?;
                    let mut pi = policy.clone();
                    pi.set_action(h, s, a);
                    let data = collect_pair(source, &pi, h, s, a, episodes, None, None, rng)?;
                    budgets.push(PairBudget {
                        h,
                        s,
                        a,
                        accuracy,
                        required,
                        episodes,
                        collected: data.len() as u64,
                    });
                    if (data.len() as u64) < required {
                        return Err(LabError::ExplorationFailed {
                            site: Site::Pair { h, s, a },
                            collected: data.len() as u64,
                            required,
                        });
                    }
                    predictors[h][s][a] = erm_fit(class, &data, cfg.loss)?;
                    if let Some(store) = samples.as_mut() {
                        store.insert((h, s, a), data);
                    }
                }
            }
            infos.push(ReachInfo {
                h,
                s,
                prob,
                sampled,
                policy,
            });
        }
        reach.push(infos);
    }

    Ok(CfLearnedModel {
        algorithm: Algorithm::Kcfd,
        params,
        predictors,
        dynamics: p.clone(),
        counters: None,
        off_target: None,
        reach,
        budgets,
        episodes: source.episodes() - start,
        samples,
    })
}

/// Runs `episodes` episodes of `pi`, keeping `((c, s, a), r)` whenever the
/// trajectory plays `a` at `(h, s)`.
#[allow(clippy::too_many_arguments)]
fn collect_pair(
    source: &mut dyn EpisodeSource,
    pi: &Policy,
    h: usize,
    s: usize,
    a: usize,
    episodes: u64,
    mut counters: Option<&mut Counters>,
    mut off_target: Option<&mut Counters>,
    rng: &mut LabRng,
) -> Result<LabeledDataset> {
    let mut data = LabeledDataset::new(crate::erm::Arity::Context);
    for _ in 0..episodes {
        let c = source.observe_context(rng);
        let tau = source.rollout(&c, pi, rng)?;
        let hit = tau.states[h] == s && tau.actions[h] == a;
        if hit {
            data.push(Input::context(c.clone()), tau.rewards[h])?;
            if let Some(n) = counters.as_deref_mut() {
                n.record(h, s, a, tau.states[h + 1]);
            }
        }
        if let Some(off) = off_target.as_deref_mut() {
            for k in 0..tau.horizon() {
                if !(hit && k == h) {
                    off.record(k, tau.states[k], tau.actions[k], tau.states[k + 1]);
                }
            }
        }
    }
    Ok(data)
}

/// Layer-by-layer exploration with unknown context-free dynamics.
pub fn explore_ucfd(
    source: &mut dyn EpisodeSource,
    classes: &[Vec<Vec<FunctionClass>>],
    cfg: &CfConfig,
    rng: &mut LabRng,
) -> Result<CfLearnedModel> {
    let layout = source.layout().clone();
    check_classes(&layout, classes)?;
    let sizes = Sizes::of(&layout);
    let mut params = CfParams::resolve(Algorithm::Ucfd, cfg, sizes)?;
    let gamma = params.gamma.expect("UCFD resolves gamma");
    let mut counters = Counters::new(&layout);
    let mut off_target = cfg.record_off_target.then(|| Counters::new(&layout));
    let mut predictors = zero_predictors(&layout);
    let mut reach = Vec::with_capacity(layout.horizon());
    let mut budgets = Vec::new();
    let mut samples = cfg.keep_samples.then(BTreeMap::new);
    let start = source.episodes();
    // N_P depends on |S_{h+1}|; the largest layer fixes one threshold for the estimator.
    let widest = (1..=layout.horizon()).map(|h| layout.layer_size(h)).max().unwrap_or(1);
    let n_p = n_dynamics_tabular(gamma, params.delta1, widest)?;
    params.n_p = Some(n_p);

    for h in 0..layout.horizon() {
        let p_hat = tabular_estimate(&counters, n_p)?;
        let mut infos = Vec::with_capacity(layout.true_size(h));
        for s in layout.states(h) {
            let Reach { policy, prob } = ffp(&p_hat, h, s)?;
            let sampled = prob >= params.beta;
            if sampled {
                let accuracy = accuracy_per_state(prob, cfg.eps, params.b, cfg.loss, sizes)?;
                for a in 0..layout.n_actions() {
                    let class = &classes[h][s][a];
                    let n_r = n_rewards(class, accuracy, params.delta1, cfg.constant_scale)?;
                    let required = n_r.max(n_p);
                    let margin = prob - gamma * h as f64;
                    let episodes = crate::erm::ceil_count(
                        2.0 / margin * ((1.0 / params.delta1).ln() + required as f64),
                    )?;
                    check_cap(cfg, episodes)?;
                    let mut pi = policy.clone();
                    pi.set_action(h, s, a);
                    let data = collect_pair(
                        source,
                        &pi,
                        h,
                        s,
                        a,
                        episodes,
                        Some(&mut counters),
                        off_target.as_mut(),
                        rng,
                    )?;
                    budgets.push(PairBudget {
                        h,
                        s,
                        a,
                        accuracy,
                        required,
                        episodes,
                        collected: data.len() as u64,
                    });
                    if (data.len() as u64) < required {
                        return Err(LabError::ExplorationFailed {
                            site: Site::Pair { h, s, a },
                            collected: data.len() as u64,
                            required,
                        });
                    }
                    predictors[h][s][a] = erm_fit(class, &data, cfg.loss)?;
                    if let Some(store) = samples.as_mut() {
                        store.insert((h, s, a), data);
                    }
                }
            }
            infos.push(ReachInfo {
                h,
                s,
                prob,
                sampled,
                policy,
            });
        }
        reach.push(infos);
    }

    let dynamics = tabular_estimate(&counters, n_p)?;
    Ok(CfLearnedModel {
        algorithm: Algorithm::Ucfd,
        params,
        predictors,
        dynamics: Arc::new(dynamics),
        counters: Some(counters),
        off_target,
        reach,
        budgets,
        episodes: source.episodes() - start,
        samples,
    })
}

/// Plans in the learned model of context `c` and returns the policy on the
/// original states.
pub fn exploit_context_free(c: &Arc<Context>, model: &CfLearnedModel) -> Policy {
    let layout = model.dynamics.layout();
    let result = plan_with(&model.dynamics, |h, s, a| {
        if layout.is_sink(h, s) {
            0.0
        } else {
            model.predictors[h][s][a].eval(&Input::context(c.clone()))
        }
    });
    result.policy.restrict_to(&layout.without_sink())
}

/// Serializable view of a learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub predictors: BTreeMap<String, Predictor>,
    pub dynamics: BTreeMap<String, Vec<f64>>,
    pub meta: ModelMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub good_sets: Option<BTreeMap<String, Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_predictors: Option<BTreeMap<String, LayerPredictors>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPredictors {
    pub reward: Predictor,
    pub dynamics: Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub algorithm: Algorithm,
    pub config: serde_json::Value,
    pub seed: u64,
    pub episodes_used: u64,
}

pub(crate) fn key(h: usize, s: usize, a: usize) -> String {
    format!("{h},{s},{a}")
}

pub(crate) fn dynamics_map(d: &Dynamics) -> BTreeMap<String, Vec<f64>> {
    let layout = d.layout();
    let mut out = BTreeMap::new();
    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            for a in 0..layout.n_actions() {
                out.insert(key(h, s, a), d.row(h, s, a).to_vec());
            }
        }
    }
    out
}

impl CfLearnedModel {
    pub fn to_document(&self, config: serde_json::Value, seed: u64) -> ModelDocument {
        let mut predictors = BTreeMap::new();
        for (h, layer) in self.predictors.iter().enumerate() {
            for (s, row) in layer.iter().enumerate() {
                for (a, f) in row.iter().enumerate() {
                    predictors.insert(key(h, s, a), f.clone());
                }
            }
        }
        ModelDocument {
            predictors,
            dynamics: dynamics_map(&self.dynamics),
            meta: ModelMeta {
                algorithm: self.algorithm,
                config,
                seed,
                episodes_used: self.episodes,
            },
            good_sets: None,
            layer_predictors: None,
        }
    }
}
