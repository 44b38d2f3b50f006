//! Explore and exploit for CMDPs whose dynamics depend on the context.
//!
//! A state is worth learning only when enough context mass reaches it. The
//! `beta`-good contexts of `s` reach it with probability at least `beta`, and
//! `s` is `(gamma, beta)`-good when those contexts carry mass at least
//! `gamma`. KCDD estimates that mass on the known kernels and fits per-pair
//! rewards from importance-sampled visits. UCDD learns one layer at a time,
//! fitting reward and kernel predictors over `(c, s, a)`, and routes whatever
//! it cannot vouch for into an absorbing sink.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context_free::{check_classes, key, zero_predictors, LayerPredictors, ModelDocument, ModelMeta};
use crate::env::{EpisodeSource, KnownDynamics};
use crate::erm::{ceil_count, erm_fit, n_rewards, Arity, FunctionClass, Input, LabeledDataset, Loss, Predictor};
use crate::error::{LabError, Result, Site};
use crate::mdp::{Context, Dynamics, LabRng, Layout, Policy};
use crate::params::{check_open_unit, Algorithm, Param, Sizes};
use crate::planner::{ffp, plan_with, Reach};

/// Slack on reachability comparisons so `p = beta` computed in floating
/// point still counts as reaching.
const MEMBER_TOL: f64 = 1e-12;

fn default_scale() -> f64 {
    1.0
}

/// Learner settings shared by KCDD and UCDD. Every accuracy parameter
/// defaults to its theoretical setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdConfig {
    pub eps: f64,
    pub delta: f64,
    pub loss: Loss,
    #[serde(default)]
    pub beta: Param,
    #[serde(default)]
    pub gamma: Param,
    /// Per-pair reward accuracy (KCDD).
    #[serde(default)]
    pub eps1: Param,
    /// Per-layer kernel accuracy (UCDD).
    #[serde(default)]
    pub eps_p: Param,
    /// Per-layer reward accuracy (UCDD).
    #[serde(default)]
    pub eps_r: Param,
    /// Accuracy of the good-context mass estimates.
    #[serde(default)]
    pub eps2: Param,
    /// Row TV slack of the learned kernel (UCDD); reported only.
    #[serde(default)]
    pub rho: Param,
    /// Multiplies every ERM sample size.
    #[serde(default = "default_scale")]
    pub constant_scale: f64,
    #[serde(default)]
    pub keep_samples: bool,
    /// Refuse any single budget above this many episodes.
    #[serde(default)]
    pub episode_cap: Option<u64>,
}

impl CdConfig {
    pub fn new(eps: f64, delta: f64, loss: Loss) -> Self {
        Self {
            eps,
            delta,
            loss,
            beta: Param::Default,
            gamma: Param::Default,
            eps1: Param::Default,
            eps_p: Param::Default,
            eps_r: Param::Default,
            eps2: Param::Default,
            rho: Param::Default,
            constant_scale: 1.0,
            keep_samples: false,
            episode_cap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        check_open_unit("eps", self.eps)?;
        check_open_unit("delta", self.delta)?;
        if !(self.constant_scale > 0.0 && self.constant_scale.is_finite()) {
            return Err(LabError::InvalidParameter("constant_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters after resolving defaults against the instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdParams {
    pub beta: f64,
    pub gamma: f64,
    pub eps2: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub eps1: Option<f64>,
    pub eps_p: Option<f64>,
    pub eps_r: Option<f64>,
    pub rho: Option<f64>,
    /// Contexts drawn by one good-context test.
    pub agc_draws: u64,
}

impl CdParams {
    pub fn resolve(algorithm: Algorithm, cfg: &CdConfig, sizes: Sizes) -> Result<Self> {
        cfg.validate()?;
        let (s, a, h) = (sizes.s(), sizes.a(), sizes.h());
        let e = cfg.eps;
        let params = match algorithm {
            Algorithm::Kcdd => {
                let gamma = cfg.gamma.resolve(e / (8.0 * s * h));
                let eps1 = match cfg.loss {
                    Loss::L1 => e * e / (64.0 * s * a * h * h),
                    Loss::L2 => e.powi(3) / (512.0 * s * a * h.powi(3)),
                };
                Self {
                    beta: cfg.beta.resolve(e / (8.0 * s)),
                    gamma,
                    eps2: cfg.eps2.resolve(gamma / 2.0),
                    delta1: cfg.delta / (6.0 * s * a),
                    delta2: cfg.delta / (6.0 * s),
                    eps1: Some(cfg.eps1.resolve(eps1)),
                    eps_p: None,
                    eps_r: None,
                    rho: None,
                    agc_draws: 0,
                }
            }
            Algorithm::Ucdd => {
                let gamma = cfg.gamma.resolve(e / (20.0 * s * h));
                let beta = cfg.beta.resolve(e / (20.0 * s * h));
                let (eps_p, eps_r) = match cfg.loss {
                    Loss::L1 => (
                        e * e / (10.0 * 16.0 * 20.0 * a * s.powi(4) * h.powi(3)),
                        e * e / (400.0 * s * a * h * h),
                    ),
                    Loss::L2 => (
                        e.powi(3) / (10.0 * 256.0 * 400.0 * a * s.powi(6) * h.powi(5)),
                        e.powi(3) / (8000.0 * s * a * h.powi(3)),
                    ),
                };
                Self {
                    beta,
                    gamma,
                    eps2: cfg.eps2.resolve(gamma / 4.0),
                    delta1: cfg.delta / (8.0 * h),
                    delta2: cfg.delta / (8.0 * s),
                    eps1: None,
                    eps_p: Some(cfg.eps_p.resolve(eps_p)),
                    eps_r: Some(cfg.eps_r.resolve(eps_r)),
                    rho: Some(cfg.rho.resolve(beta / (16.0 * s * h))),
                    agc_draws: 0,
                }
            }
            other => return Err(LabError::Config(format!("{other} is not a context-dependent algorithm"))),
        };
        check_open_unit("beta", params.beta)?;
        check_open_unit("gamma", params.gamma)?;
        for (name, v) in [("eps1", params.eps1), ("eps_p", params.eps_p), ("eps_r", params.eps_r)] {
            if let Some(v) = v {
                check_open_unit(name, v)?;
            }
        }
        Ok(Self {
            agc_draws: agc_draws(params.eps2, params.gamma, params.delta2)?,
            ..params
        })
    }
}

/// `m = ceil(ln(2 / delta2) / (2 eps2^2))`; requires `0 < eps2 <= gamma`.
pub fn agc_draws(eps2: f64, gamma: f64, delta2: f64) -> Result<u64> {
    if !(eps2 > 0.0 && eps2 <= gamma) {
        return Err(LabError::InvalidParameter(format!("eps2 must lie in (0, gamma], got {eps2}")));
    }
    check_open_unit("delta2", delta2)?;
    ceil_count((2.0 / delta2).ln() / (2.0 * eps2 * eps2))
}

/// `prob >= beta` up to the shared tie tolerance.
pub fn is_member(prob: f64, beta: f64) -> bool {
    prob + MEMBER_TOL >= beta
}

/// Result of one good-context test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgcOutcome {
    pub good: bool,
    /// Fraction of drawn contexts under which the state is `beta`-reachable.
    pub p_hat: f64,
    pub draws: u64,
}

/// Estimates the mass of the `beta`-good contexts of one state.
///
/// `reach(c)` returns the maximum probability of visiting the state under
/// the dynamics of `c`. Each draw is one observed episode.
pub fn agc<F>(
    source: &mut dyn EpisodeSource,
    mut reach: F,
    gamma: f64,
    beta: f64,
    eps2: f64,
    delta2: f64,
    rng: &mut LabRng,
) -> Result<AgcOutcome>
where
    F: FnMut(&Arc<Context>) -> Result<f64>,
{
    let m = agc_draws(eps2, gamma, delta2)?;
    let mut count = 0u64;
    for _ in 0..m {
        let c = source.observe_context(rng);
        if is_member(reach(&c)?, beta) {
            count += 1;
        }
    }
    let p_hat = count as f64 / m as f64;
    Ok(AgcOutcome {
        good: p_hat + MEMBER_TOL >= gamma - eps2,
        p_hat,
        draws: m,
    })
}

/// Per-state estimates and the approximate good sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodSets {
    /// `p_hat[h][s]` for the original states of layers `0..H`.
    pub p_hat: Vec<Vec<f64>>,
    /// `sets[h]`: good states of layer `h`, ascending.
    pub sets: Vec<Vec<usize>>,
}

impl GoodSets {
    fn empty(layout: &Layout) -> Self {
        Self {
            p_hat: (0..layout.horizon()).map(|h| vec![0.0; layout.true_size(h)]).collect(),
            sets: vec![Vec::new(); layout.horizon()],
        }
    }

    pub fn contains(&self, h: usize, s: usize) -> bool {
        self.sets.get(h).is_some_and(|set| set.binary_search(&s).is_ok())
    }
}

/// Memo of maximum-reachability plans for finite contexts.
#[derive(Debug, Default)]
struct ReachMemo {
    map: HashMap<(usize, usize, usize), Reach>,
}

impl ReachMemo {
    fn get<F>(&mut self, c: &Context, h: usize, s: usize, compute: F) -> Result<Reach>
    where
        F: FnOnce() -> Result<Reach>,
    {
        let Some(i) = c.index else {
            return compute();
        };
        if let Some(r) = self.map.get(&(i, h, s)) {
            return Ok(r.clone());
        }
        let r = compute()?;
        self.map.insert((i, h, s), r.clone());
        Ok(r)
    }
}

fn check_cap(cfg: &CdConfig, episodes: u64) -> Result<()> {
    match cfg.episode_cap {
        Some(cap) if episodes > cap => Err(LabError::TooLarge { count: episodes as f64 }),
        _ => Ok(()),
    }
}

/// Budget bookkeeping of one KCDD pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcddBudget {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub required: u64,
    pub episodes: u64,
    /// Episodes whose context reached the state with probability `>= beta`.
    pub rollouts: u64,
    pub hits: u64,
    pub accepted: u64,
    /// False when the quota was missed and the predictor stayed at zero.
    pub fitted: bool,
}

/// Budget bookkeeping of one UCDD layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub h: usize,
    pub n_r: u64,
    pub n_p: u64,
    /// `T_h`.
    pub episodes: u64,
    /// Contexts observed by the sampling loop (good-set tests excluded).
    pub observed: u64,
    pub agc_draws: u64,
    pub hits: u64,
    pub reward_samples: u64,
    pub kernel_samples: u64,
}

#[derive(Debug, Clone)]
pub struct CdLearnedModel {
    pub algorithm: Algorithm,
    pub params: CdParams,
    /// The original layout (without sink).
    pub layout: Layout,
    pub good_sets: GoodSets,
    /// KCDD: `[h][s][a]`, zero off the good sets.
    pub predictors: Vec<Vec<Vec<Predictor>>>,
    /// UCDD: `[h]` reward predictors over `(c, s, a)`.
    pub rewards: Vec<Predictor>,
    /// UCDD: `[h]` kernel predictors over `(c, s, a, s')`.
    pub kernels: Vec<Predictor>,
    /// KCDD: the transition oracle.
    pub known: Option<KnownDynamics>,
    pub pair_budgets: Vec<KcddBudget>,
    pub layer_budgets: Vec<LayerBudget>,
    /// Contexts observed during exploration, good-set tests included.
    pub episodes: u64,
    /// Kernel rows routed to the sink because every prediction was zero.
    pub degenerate_rows: u64,
    pub pair_samples: Option<BTreeMap<(usize, usize, usize), LabeledDataset>>,
    /// UCDD: `h -> (reward samples, kernel samples)`.
    pub layer_samples: Option<BTreeMap<usize, (LabeledDataset, LabeledDataset)>>,
}

/// Reward exploration with known context-dependent dynamics.
pub fn explore_kcdd(
    source: &mut dyn EpisodeSource,
    known: &KnownDynamics,
    classes: &[Vec<Vec<FunctionClass>>],
    cfg: &CdConfig,
    rng: &mut LabRng,
) -> Result<CdLearnedModel> {
    let layout = source.layout().clone();
    check_classes(&layout, classes)?;
    let params = CdParams::resolve(Algorithm::Kcdd, cfg, Sizes::of(&layout))?;
    let eps1 = params.eps1.expect("KCDD resolves eps1");
    let (beta, delta1) = (params.beta, params.delta1);
    check_cap(cfg, params.agc_draws)?;
    let mut memo = ReachMemo::default();
    let mut predictors = zero_predictors(&layout);
    let mut good = GoodSets::empty(&layout);
    let mut budgets = Vec::new();
    let mut samples = cfg.keep_samples.then(BTreeMap::new);
    let start = source.episodes();

    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            let outcome = agc(
                source,
                |c| Ok(memo.get(c, h, s, || ffp(known.of(c)?.as_ref(), h, s))?.prob),
                params.gamma,
                beta,
                params.eps2,
                params.delta2,
                rng,
            )?;
            good.p_hat[h][s] = outcome.p_hat;
            if !outcome.good {
                continue;
            }
            good.sets[h].push(s);
            for a in 0..layout.n_actions() {
                let class = &classes[h][s][a];
                let required = n_rewards(class, eps1, delta1, cfg.constant_scale)?;
                let episodes = ceil_count(2.0 / (beta * params.gamma) * ((1.0 / delta1).ln() + required as f64))?;
                check_cap(cfg, episodes)?;
                let mut data = LabeledDataset::new(Arity::Context);
                let (mut rollouts, mut hits) = (0, 0);
                for _ in 0..episodes {
                    let c = source.observe_context(rng);
                    let Reach { mut policy, prob } = memo.get(&c, h, s, || ffp(known.of(&c)?.as_ref(), h, s))?;
                    if !is_member(prob, beta) {
                        continue;
                    }
                    policy.set_action(h, s, a);
                    let tau = source.rollout(&c, &policy, rng)?;
                    rollouts += 1;
                    if tau.states[h] == s && tau.actions[h] == a {
                        hits += 1;
                        let ratio = (beta / prob).min(1.0);
                        if ratio >= 1.0 || rng.gen::<f64>() < ratio {
                            data.push(Input::context(c.clone()), tau.rewards[h])?;
                        }
                    }
                }
                let accepted = data.len() as u64;
                let fitted = accepted >= required;
                if fitted {
                    predictors[h][s][a] = erm_fit(class, &data, cfg.loss)?;
                }
                budgets.push(KcddBudget {
                    h,
                    s,
                    a,
                    required,
                    episodes,
                    rollouts,
                    hits,
                    accepted,
                    fitted,
                });
                if let Some(store) = samples.as_mut() {
                    store.insert((h, s, a), data);
                }
            }
        }
    }

    Ok(CdLearnedModel {
        algorithm: Algorithm::Kcdd,
        params,
        layout,
        good_sets: good,
        predictors,
        rewards: Vec::new(),
        kernels: Vec::new(),
        known: Some(known.clone()),
        pair_budgets: budgets,
        layer_budgets: Vec::new(),
        episodes: source.episodes() - start,
        degenerate_rows: 0,
        pair_samples: samples,
        layer_samples: None,
    })
}

/// What the learner knows about layers `0..kernels.len()`.
#[derive(Debug, Clone, Copy)]
pub struct AcddPrefix<'a> {
    /// The original layout (without sink).
    pub layout: &'a Layout,
    pub beta: f64,
    pub good: &'a [Vec<usize>],
    pub kernels: &'a [Predictor],
}

/// The approximate dynamics of one context.
#[derive(Debug, Clone, PartialEq)]
pub struct AcddDynamics {
    /// Over the sink-augmented layout; layers past the prefix go to the sink.
    pub dynamics: Dynamics,
    /// `member[k][s]`: `s` is in the good set of layer `k` and the context
    /// reaches it with probability `>= beta` on the layers before `k`.
    pub member: Vec<Vec<bool>>,
    /// Rows whose predictions summed to zero, sent to the sink.
    pub degenerate: u64,
}

/// Builds the approximate dynamics of context `c` from a learned prefix.
///
/// Rows of good states that `c` reaches are the kernel predictions
/// normalized over the next layer; every other row moves to the sink.
pub fn acdd(prefix: &AcddPrefix<'_>, c: &Arc<Context>) -> Result<AcddDynamics> {
    let base = prefix.layout;
    let h_end = prefix.kernels.len();
    if prefix.good.len() != h_end || h_end > base.horizon() {
        return Err(LabError::LengthMismatch {
            left: prefix.good.len(),
            right: h_end,
        });
    }
    let layout = base.with_sink();
    let mut d = Dynamics::zeros(layout.clone());
    d.wire_sink();
    for k in 0..base.horizon() {
        let sink = layout.sink(k + 1).expect("sink layouts carry a sink in every layer >= 1");
        for s in base.states(k) {
            for a in 0..base.n_actions() {
                d.row_mut(k, s, a)[sink] = 1.0;
            }
        }
    }
    let mut member = Vec::with_capacity(h_end);
    let mut degenerate = 0;
    for k in 0..h_end {
        let sink = layout.sink(k + 1).expect("sink layouts carry a sink in every layer >= 1");
        let mut flags = vec![false; base.true_size(k)];
        for &s in &prefix.good[k] {
            if s >= base.true_size(k) {
                return Err(LabError::UnknownState { h: k, s });
            }
            if !is_member(ffp(&d, k, s)?.prob, prefix.beta) {
                continue;
            }
            flags[s] = true;
            for a in 0..base.n_actions() {
                let values: Vec<f64> = base
                    .states(k + 1)
                    .map(|n| prefix.kernels[k].eval(&Input::transition(c.clone(), s, a, n)))
                    .collect();
                let total: f64 = values.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    degenerate += 1;
                    continue;
                }
                let row = d.row_mut(k, s, a);
                row[sink] = 0.0;
                for (p, v) in row.iter_mut().zip(&values) {
                    *p = v / total;
                }
            }
        }
        member.push(flags);
    }
    Ok(AcddDynamics {
        dynamics: d,
        member,
        degenerate,
    })
}

/// Memoizes [`acdd`] per finite context for one fixed prefix, and the
/// reachability plans computed on it.
#[derive(Debug, Default)]
pub struct AcddCache {
    models: HashMap<usize, Arc<AcddDynamics>>,
    reach: ReachMemo,
    /// Degenerate rows over every model built so far.
    pub degenerate: u64,
}

impl AcddCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn model(&mut self, prefix: &AcddPrefix<'_>, c: &Arc<Context>) -> Result<Arc<AcddDynamics>> {
        if let Some(m) = c.index.and_then(|i| self.models.get(&i)) {
            return Ok(m.clone());
        }
        let m = Arc::new(acdd(prefix, c)?);
        self.degenerate += m.degenerate;
        if let Some(i) = c.index {
            self.models.insert(i, m.clone());
        }
        Ok(m)
    }

    fn reach(&mut self, prefix: &AcddPrefix<'_>, c: &Arc<Context>, h: usize, s: usize) -> Result<Reach> {
        let mut reach = std::mem::take(&mut self.reach);
        let out = reach.get(c, h, s, || ffp(&self.model(prefix, c)?.dynamics, h, s));
        self.reach = reach;
        out
    }
}

/// Good set of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodLayer {
    pub states: Vec<usize>,
    pub p_hat: Vec<f64>,
    pub draws: u64,
}

/// Runs the good-context test for every state of layer `h` on the
/// approximate dynamics of the prefix.
#[allow(clippy::too_many_arguments)]
pub fn ags(
    source: &mut dyn EpisodeSource,
    prefix: &AcddPrefix<'_>,
    h: usize,
    gamma: f64,
    eps2: f64,
    delta2: f64,
    cache: &mut AcddCache,
    rng: &mut LabRng,
) -> Result<GoodLayer> {
    if h > prefix.kernels.len() || h >= prefix.layout.horizon() {
        return Err(LabError::InvalidParameter(format!(
            "layer {h} is not covered by a prefix of {} layers",
            prefix.kernels.len()
        )));
    }
    let mut out = GoodLayer {
        states: Vec::new(),
        p_hat: Vec::with_capacity(prefix.layout.true_size(h)),
        draws: 0,
    };
    for s in prefix.layout.states(h) {
        let o = agc(
            source,
            |c| Ok(cache.reach(prefix, c, h, s)?.prob),
            gamma,
            prefix.beta,
            eps2,
            delta2,
            rng,
        )?;
        out.p_hat.push(o.p_hat);
        out.draws += o.draws;
        if o.good {
            out.states.push(s);
        }
    }
    Ok(out)
}

/// `T_h = ceil((8|S| / (gamma beta)) (ln(1/delta1) + 2 max(N_P, N_R)))`.
pub fn ucdd_layer_episodes(params: &CdParams, states: usize, n_p: u64, n_r: u64) -> Result<u64> {
    ceil_count(
        8.0 * states as f64 / (params.gamma * params.beta)
            * ((1.0 / params.delta1).ln() + 2.0 * n_p.max(n_r) as f64),
    )
}

fn doubled(n: u64) -> Result<u64> {
    n.checked_mul(2).ok_or(LabError::TooLarge { count: 2.0 * n as f64 })
}

/// Layer-by-layer exploration with unknown context-dependent dynamics.
/// `reward_classes[h]` acts on `(c, s, a)` and `kernel_classes[h]` on
/// `(c, s, a, s')`.
pub fn explore_ucdd(
    source: &mut dyn EpisodeSource,
    reward_classes: &[FunctionClass],
    kernel_classes: &[FunctionClass],
    cfg: &CdConfig,
    rng: &mut LabRng,
) -> Result<CdLearnedModel> {
    let layout = source.layout().clone();
    let horizon = layout.horizon();
    if reward_classes.len() < horizon || kernel_classes.len() < horizon {
        return Err(LabError::Config("layer classes do not cover every layer".into()));
    }
    let params = CdParams::resolve(Algorithm::Ucdd, cfg, Sizes::of(&layout))?;
    let (eps_p, eps_r) = (params.eps_p.expect("UCDD resolves eps_p"), params.eps_r.expect("UCDD resolves eps_r"));
    check_cap(cfg, params.agc_draws)?;
    let mut good = GoodSets::empty(&layout);
    let mut rewards: Vec<Predictor> = Vec::with_capacity(horizon);
    let mut kernels: Vec<Predictor> = Vec::with_capacity(horizon);
    let mut budgets = Vec::with_capacity(horizon);
    let mut samples = cfg.keep_samples.then(BTreeMap::new);
    let mut degenerate = 0;
    let start = source.episodes();

    for h in 0..horizon {
        let n_r = n_rewards(&reward_classes[h], eps_r, params.delta1 / 2.0, cfg.constant_scale)?;
        let n_p = n_rewards(&kernel_classes[h], eps_p, params.delta1 / 2.0, cfg.constant_scale)?;
        let episodes = ucdd_layer_episodes(&params, layout.n_states(), n_p, n_r)?;
        check_cap(cfg, episodes)?;
        let prefix = AcddPrefix {
            layout: &layout,
            beta: params.beta,
            good: &good.sets[..h],
            kernels: &kernels[..h],
        };
        let mut cache = AcddCache::new();
        let layer = ags(source, &prefix, h, params.gamma, params.eps2, params.delta2, &mut cache, rng)?;
        let mut reward_data = LabeledDataset::new(Arity::StateAction);
        let mut kernel_data = LabeledDataset::new(Arity::Transition);
        let mut budget = LayerBudget {
            h,
            n_r,
            n_p,
            episodes,
            observed: 0,
            agc_draws: layer.draws,
            hits: 0,
            reward_samples: 0,
            kernel_samples: 0,
        };

        if layer.states.is_empty() {
            // Nothing reachable to learn; every row of this layer goes to the sink.
            rewards.push(Predictor::zero());
            kernels.push(Predictor::zero());
        } else {
            let phase_start = source.episodes();
            for _ in 0..episodes {
                let s = layer.states[rng.gen_range(0..layer.states.len())];
                let a = rng.gen_range(0..layout.n_actions());
                let c = source.observe_context(rng);
                let reach = cache.reach(&prefix, &c, h, s)?;
                if !is_member(reach.prob, params.beta) {
                    continue;
                }
                let mut pi = reach.policy.restrict_to(&layout);
                pi.set_action(h, s, a);
                let tau = source.rollout(&c, &pi, rng)?;
                if tau.states[h] == s && tau.actions[h] == a {
                    budget.hits += 1;
                    reward_data.push(Input::pair(c.clone(), s, a), tau.rewards[h])?;
                    let next = tau.states[h + 1];
                    for n in layout.states(h + 1) {
                        kernel_data.push(Input::transition(c.clone(), s, a, n), f64::from(u8::from(n == next)))?;
                    }
                }
            }
            budget.observed = source.episodes() - phase_start;
            budget.reward_samples = reward_data.len() as u64;
            budget.kernel_samples = kernel_data.len() as u64;
            for (collected, n) in [(budget.reward_samples, n_r), (budget.kernel_samples, n_p)] {
                let required = doubled(n)?;
                if collected < required {
                    return Err(LabError::ExplorationFailed {
                        site: Site::Layer { h },
                        collected,
                        required,
                    });
                }
            }
            rewards.push(erm_fit(&reward_classes[h], &reward_data, cfg.loss)?);
            kernels.push(erm_fit(&kernel_classes[h], &kernel_data, cfg.loss)?);
        }

        degenerate += cache.degenerate;
        good.p_hat[h] = layer.p_hat;
        good.sets[h] = layer.states;
        budgets.push(budget);
        if let Some(store) = samples.as_mut() {
            store.insert(h, (reward_data, kernel_data));
        }
    }

    Ok(CdLearnedModel {
        algorithm: Algorithm::Ucdd,
        params,
        predictors: Vec::new(),
        good_sets: good,
        layout,
        rewards,
        kernels,
        known: None,
        pair_budgets: Vec::new(),
        layer_budgets: budgets,
        episodes: source.episodes() - start,
        degenerate_rows: degenerate,
        pair_samples: None,
        layer_samples: samples,
    })
}

impl CdLearnedModel {
    /// The full approximate dynamics of `c` (UCDD).
    pub fn acdd(&self, c: &Arc<Context>) -> Result<AcddDynamics> {
        acdd(
            &AcddPrefix {
                layout: &self.layout,
                beta: self.params.beta,
                good: &self.good_sets.sets,
                kernels: &self.kernels,
            },
            c,
        )
    }

    pub fn to_document(&self, config: serde_json::Value, seed: u64) -> ModelDocument {
        let mut predictors = BTreeMap::new();
        for (h, layer) in self.predictors.iter().enumerate() {
            for (s, row) in layer.iter().enumerate() {
                for (a, f) in row.iter().enumerate() {
                    predictors.insert(key(h, s, a), f.clone());
                }
            }
        }
        let good_sets = self
            .good_sets
            .sets
            .iter()
            .enumerate()
            .map(|(h, set)| (h.to_string(), set.clone()))
            .collect();
        let layer_predictors = (self.algorithm == Algorithm::Ucdd).then(|| {
            self.rewards
                .iter()
                .zip(&self.kernels)
                .enumerate()
                .map(|(h, (r, p))| {
                    (
                        h.to_string(),
                        LayerPredictors {
                            reward: r.clone(),
                            dynamics: p.clone(),
                        },
                    )
                })
                .collect()
        });
        ModelDocument {
            predictors,
            dynamics: BTreeMap::new(),
            meta: ModelMeta {
                algorithm: self.algorithm,
                config,
                seed,
                episodes_used: self.episodes,
            },
            good_sets: Some(good_sets),
            layer_predictors,
        }
    }
}

/// Plans in the learned model of context `c` and returns the policy on the
/// original states.
pub fn exploit_context_dep(c: &Arc<Context>, model: &CdLearnedModel) -> Result<Policy> {
    let beta = model.params.beta;
    match model.algorithm {
        Algorithm::Kcdd => {
            let known = model
                .known
                .as_ref()
                .ok_or_else(|| LabError::Config("KCDD model carries no dynamics oracle".into()))?;
            let p = known.of(c)?;
            let mut reward = vec![Vec::new(); model.layout.horizon()];
            for (h, row) in reward.iter_mut().enumerate() {
                *row = vec![0.0; model.layout.true_size(h) * model.layout.n_actions()];
                for &s in &model.good_sets.sets[h] {
                    if !is_member(ffp(&p, h, s)?.prob, beta) {
                        continue;
                    }
                    for a in 0..model.layout.n_actions() {
                        row[s * model.layout.n_actions() + a] = model.predictors[h][s][a].eval(&Input::context(c.clone()));
                    }
                }
            }
            let n_actions = model.layout.n_actions();
            Ok(plan_with(&p, |h, s, a| reward[h][s * n_actions + a]).policy)
        }
        Algorithm::Ucdd => {
            let m = model.acdd(c)?;
            let layout = m.dynamics.layout();
            let result = plan_with(&m.dynamics, |h, s, a| {
                if layout.is_sink(h, s) || !m.member[h][s] {
                    0.0
                } else {
                    model.rewards[h].eval(&Input::pair(c.clone(), s, a))
                }
            });
            Ok(result.policy.restrict_to(&model.layout))
        }
        other => Err(LabError::Config(format!("{other} is not a context-dependent algorithm"))),
    }
}
