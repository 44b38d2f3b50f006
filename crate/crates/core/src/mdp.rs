//! Layered finite-horizon MDPs, contextual MDPs, and the exact computations
//! every learner relies on: occupancy measures, policy values, total-variation
//! distances, and seeded trajectory simulation.
//!
//! States are addressed by `(layer, index)` pairs. Layer `0` holds the unique
//! start state and transitions only move from layer `h` to layer `h + 1`.
//! Rewards are defined for layers `0..H`; the terminal layer `H` carries none.
//!
//! Approximated models add one absorbing *sink* state to every layer `h >= 1`
//! (always the last index of the layer). The sink keeps the model layered:
//! the sink of layer `h` moves to the sink of layer `h + 1` with probability 1.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance used when validating probability vectors.
pub const PROB_TOL: f64 = 1e-9;
/// Tolerance used for internal renormalization.
pub const RENORM_TOL: f64 = 1e-12;

/// The random generator used throughout the lab.
pub type LabRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shape of a layered state space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layer_sizes: Vec<usize>,
    n_actions: usize,
    sink: bool,
}

impl Layout {
    /// `layer_sizes[h]` is `|S_h|` for `h = 0..=H`.
    pub fn new(layer_sizes: Vec<usize>, n_actions: usize) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(LabError::InvalidParameter(
                "a layered MDP needs at least two layers (H >= 1)".into(),
            ));
        }
        if layer_sizes[0] != 1 {
            return Err(LabError::LayerViolation {
                h: 0,
                s: 0,
                a: 0,
                detail: format!("layer 0 must hold exactly one state, found {}", layer_sizes[0]),
            });
        }
        if let Some(h) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(LabError::InvalidParameter(format!("layer {h} is empty")));
        }
        if n_actions == 0 {
            return Err(LabError::InvalidParameter("action set is empty".into()));
        }
        Ok(Self {
            layer_sizes,
            n_actions,
            sink: false,
        })
    }

    pub fn horizon(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of states in layer `h`, sink included.
    pub fn layer_size(&self, h: usize) -> usize {
        self.layer_sizes[h]
    }

    /// Number of original (non-sink) states in layer `h`.
    pub fn true_size(&self, h: usize) -> usize {
        match self.sink(h) {
            Some(_) => self.layer_sizes[h] - 1,
            None => self.layer_sizes[h],
        }
    }

    /// Original states of layer `h`.
    pub fn states(&self, h: usize) -> Range<usize> {
        0..self.true_size(h)
    }

    /// `|S|`: the number of original states over all layers.
    pub fn n_states(&self) -> usize {
        (0..=self.horizon()).map(|h| self.true_size(h)).sum()
    }

    pub fn has_sink(&self) -> bool {
        self.sink
    }

    /// Index of the sink state in layer `h`, if the layout carries one there.
    pub fn sink(&self, h: usize) -> Option<usize> {
        (self.sink && h >= 1).then(|| self.layer_sizes[h] - 1)
    }

    pub fn is_sink(&self, h: usize, s: usize) -> bool {
        self.sink(h) == Some(s)
    }

    pub fn with_sink(&self) -> Layout {
        if self.sink {
            return self.clone();
        }
        let mut sizes = self.layer_sizes.clone();
        for n in sizes.iter_mut().skip(1) {
            *n += 1;
        }
        Layout {
            layer_sizes: sizes,
            n_actions: self.n_actions,
            sink: true,
        }
    }

    pub fn without_sink(&self) -> Layout {
        Layout {
            layer_sizes: (0..=self.horizon()).map(|h| self.true_size(h)).collect(),
            n_actions: self.n_actions,
            sink: false,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
}

/// Transition kernel of a layered MDP; rows map `(h, s, a)` to a
/// distribution over layer `h + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    layout: Layout,
    rows: Vec<Vec<f64>>,
}

impl Dynamics {
    /// All-zero kernel; fill it with [`Dynamics::set_row`] then validate.
    pub fn zeros(layout: Layout) -> Self {
        let rows = (0..layout.horizon())
            .map(|h| vec![0.0; layout.layer_size(h) * layout.n_actions() * layout.layer_size(h + 1)])
            .collect();
        Self { layout, rows }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn offset(&self, h: usize, s: usize, a: usize) -> (usize, usize) {
        let width = self.layout.layer_size(h + 1);
        let start = (s * self.layout.n_actions() + a) * width;
        (start, start + width)
    }

    pub fn row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let (lo, hi) = self.offset(h, s, a);
        &self.rows[h][lo..hi]
    }

    pub fn row_mut(&mut self, h: usize, s: usize, a: usize) -> &mut [f64] {
        let (lo, hi) = self.offset(h, s, a);
        &mut self.rows[h][lo..hi]
    }

    pub fn set_row(&mut self, h: usize, s: usize, a: usize, probs: &[f64]) -> Result<()> {
        let row = self.row_mut(h, s, a);
        if row.len() != probs.len() {
            return Err(LabError::LayerViolation {
                h,
                s,
                a,
                detail: format!(
                    "row has {} entries but layer {} has {} states",
                    probs.len(),
                    h + 1,
                    row.len()
                ),
            });
        }
        row.copy_from_slice(probs);
        Ok(())
    }

    /// Points every sink row at the next layer's sink.
    pub fn wire_sink(&mut self) {
        let layout = self.layout.clone();
        for h in 1..layout.horizon() {
            if let (Some(from), Some(to)) = (layout.sink(h), layout.sink(h + 1)) {
                for a in 0..layout.n_actions() {
                    let row = self.row_mut(h, from, a);
                    row.fill(0.0);
                    row[to] = 1.0;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layout = &self.layout;
        for h in 0..layout.horizon() {
            for s in 0..layout.layer_size(h) {
                for a in 0..layout.n_actions() {
                    let row = self.row(h, s, a);
                    if row.len() != layout.layer_size(h + 1) {
                        return Err(LabError::LayerViolation {
                            h,
                            s,
                            a,
                            detail: "row does not target layer h + 1".into(),
                        });
                    }
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
                        return Err(LabError::RowNotStochastic { h, s, a, sum });
                    }
                    if layout.is_sink(h, s) {
                        let to = layout.sink(h + 1).expect("sink layouts carry a sink in every layer >= 1");
                        if (row[to] - 1.0).abs() > PROB_TOL {
                            return Err(LabError::LayerViolation {
                                h,
                                s,
                                a,
                                detail: "sink state must be absorbing".into(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws the successor of `(h, s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, h: usize, s: usize, a: usize, rng: &mut R) -> usize {
        sample_index(self.row(h, s, a), rng)
    }

    /// Largest per-row L1 distance to `other` over the original states of
    /// layers `0..h_end`; both kernels must share the same layout.
    pub fn max_row_distance(&self, other: &Dynamics, h_end: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for h in 0..h_end.min(self.layout.horizon()) {
            for s in self.layout.states(h) {
                for a in 0..self.layout.n_actions() {
                    let d: f64 = self
                        .row(h, s, a)
                        .iter()
                        .zip(other.row(h, s, a))
                        .map(|(p, q)| (p - q).abs())
                        .sum();
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// How realized rewards are drawn around their mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardNoise {
    /// `R ~ Bernoulli(r)`, so realized rewards are 0 or 1.
    #[default]
    Bernoulli,
    /// `R = r`.
    Exact,
    /// `R = r + U(-m, m)` with `m = min(half_width, r, 1 - r)`; the median
    /// equals the mean, which keeps L1 regression consistent.
    SymmetricUniform { half_width: f64 },
}

impl RewardNoise {
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match *self {
            RewardNoise::Bernoulli => {
                if rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
            RewardNoise::Exact => mean,
            RewardNoise::SymmetricUniform { half_width } => {
                let m = half_width.min(mean).min(1.0 - mean).max(0.0);
                let u: f64 = rng.gen();
                (mean + m * (2.0 * u - 1.0)).clamp(0.0, 1.0)
            }
        }
    }
}

/// A layered MDP: dynamics, expected rewards for layers `0..H`, and a reward noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredMdp {
    dynamics: Arc<Dynamics>,
    rewards: Vec<Vec<f64>>,
    noise: RewardNoise,
}

impl LayeredMdp {
    /// Builds and validates an MDP. `rewards[h][s * |A| + a]` for `h < H`.
    pub fn new(dynamics: Arc<Dynamics>, rewards: Vec<Vec<f64>>, noise: RewardNoise) -> Result<Self> {
        let m = Self {
            dynamics,
            rewards,
            noise,
        };
        validate_mdp(m)
    }

    pub fn builder(layout: Layout) -> MdpBuilder {
        MdpBuilder::new(layout)
    }

    pub fn layout(&self) -> &Layout {
        self.dynamics.layout()
    }

    pub fn dynamics(&self) -> &Arc<Dynamics> {
        &self.dynamics
    }

    pub fn noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[h][s * self.layout().n_actions() + a]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    /// Same dynamics, new reward table.
    pub fn with_rewards(&self, rewards: Vec<Vec<f64>>) -> Result<Self> {
        LayeredMdp::new(self.dynamics.clone(), rewards, self.noise)
    }
}

/// Incremental construction of a [`LayeredMdp`]; unset rows stay zero and
/// fail validation.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    dynamics: Dynamics,
    rewards: Vec<Vec<f64>>,
    noise: RewardNoise,
}

impl MdpBuilder {
    pub fn new(layout: Layout) -> Self {
        let rewards = (0..layout.horizon())
            .map(|h| vec![0.0; layout.layer_size(h) * layout.n_actions()])
            .collect();
        let mut dynamics = Dynamics::zeros(layout);
        dynamics.wire_sink();
        Self {
            dynamics,
            rewards,
            noise: RewardNoise::default(),
        }
    }

    pub fn row(mut self, h: usize, s: usize, a: usize, probs: &[f64]) -> Self {
        let row = self.dynamics.row_mut(h, s, a);
        // Length errors surface in validation as a LayerViolation.
        if row.len() == probs.len() {
            row.copy_from_slice(probs);
        } else {
            row.fill(f64::NAN);
        }
        self
    }

    /// Same row for every action.
    pub fn row_all(mut self, h: usize, s: usize, probs: &[f64]) -> Self {
        for a in 0..self.dynamics.layout().n_actions() {
            self = self.row(h, s, a, probs);
        }
        self
    }

    pub fn reward(mut self, h: usize, s: usize, a: usize, r: f64) -> Self {
        let n_actions = self.dynamics.layout().n_actions();
        self.rewards[h][s * n_actions + a] = r;
        self
    }

    pub fn noise(mut self, noise: RewardNoise) -> Self {
        self.noise = noise;
        self
    }

    pub fn build(self) -> Result<LayeredMdp> {
        LayeredMdp::new(Arc::new(self.dynamics), self.rewards, self.noise)
    }
}

/// Checks every [`LayeredMdp`] invariant and hands the MDP back.
pub fn validate_mdp(m: LayeredMdp) -> Result<LayeredMdp> {
    let layout = m.layout();
    if m.rewards.len() != layout.horizon() {
        return Err(LabError::LayerViolation {
            h: m.rewards.len(),
            s: 0,
            a: 0,
            detail: "reward table must cover exactly layers 0..H".into(),
        });
    }
    for h in 0..layout.horizon() {
        if m.rewards[h].len() != layout.layer_size(h) * layout.n_actions() {
            return Err(LabError::LayerViolation {
                h,
                s: 0,
                a: 0,
                detail: "reward layer has the wrong size".into(),
            });
        }
    }
    m.dynamics.validate()?;
    for h in 0..layout.horizon() {
        for s in 0..layout.layer_size(h) {
            for a in 0..layout.n_actions() {
                let r = m.reward(h, s, a);
                if !(0.0..=1.0).contains(&r) {
                    return Err(LabError::RewardOutOfRange { h, s, a, value: r });
                }
            }
        }
    }
    Ok(m)
}

/// A layered policy, defined for layers `0..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// `actions[h][s]`.
    Deterministic(Vec<Vec<usize>>),
    /// `probs[h][s][a]`.
    Stochastic(Vec<Vec<Vec<f64>>>),
}

impl Policy {
    /// Plays `a` everywhere.
    pub fn constant(layout: &Layout, a: usize) -> Self {
        Policy::Deterministic((0..layout.horizon()).map(|h| vec![a; layout.layer_size(h)]).collect())
    }

    pub fn uniform(layout: &Layout) -> Self {
        let p = 1.0 / layout.n_actions() as f64;
        Policy::Stochastic(
            (0..layout.horizon())
                .map(|h| vec![vec![p; layout.n_actions()]; layout.layer_size(h)])
                .collect(),
        )
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(acts) => {
                if acts[h][s] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic(probs) => probs[h][s][a],
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        match self {
            Policy::Deterministic(acts) => acts[h][s],
            Policy::Stochastic(probs) => sample_index(&probs[h][s], rng),
        }
    }

    /// Forces action `a` at `(h, s)`.
    pub fn set_action(&mut self, h: usize, s: usize, a: usize) {
        match self {
            Policy::Deterministic(acts) => acts[h][s] = a,
            Policy::Stochastic(probs) => {
                let row = &mut probs[h][s];
                row.fill(0.0);
                row[a] = 1.0;
            }
        }
    }

    pub fn deterministic_action(&self, h: usize, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic(acts) => Some(acts[h][s]),
            Policy::Stochastic(_) => None,
        }
    }

    /// Checks the policy covers every state of `layout` in layers `0..H`.
    /// Extra entries (for example sink states) are allowed.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        let horizon = layout.horizon();
        let layers = match self {
            Policy::Deterministic(a) => a.len(),
            Policy::Stochastic(p) => p.len(),
        };
        if layers < horizon {
            return Err(LabError::LengthMismatch {
                left: layers,
                right: horizon,
            });
        }
        for h in 0..horizon {
            match self {
                Policy::Deterministic(acts) => {
                    if acts[h].len() < layout.layer_size(h) {
                        return Err(LabError::LengthMismatch {
                            left: acts[h].len(),
                            right: layout.layer_size(h),
                        });
                    }
                    if let Some(s) = acts[h].iter().position(|&a| a >= layout.n_actions()) {
                        return Err(LabError::UnknownState { h, s });
                    }
                }
                Policy::Stochastic(probs) => {
                    if probs[h].len() < layout.layer_size(h) {
                        return Err(LabError::LengthMismatch {
                            left: probs[h].len(),
                            right: layout.layer_size(h),
                        });
                    }
                    for (s, row) in probs[h].iter().enumerate() {
                        let sum: f64 = row.iter().sum();
                        if row.len() != layout.n_actions()
                            || row.iter().any(|p| *p < 0.0)
                            || (sum - 1.0).abs() > PROB_TOL
                        {
                            return Err(LabError::RowNotStochastic { h, s, a: 0, sum });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops entries beyond `layout` (used to strip sink states).
    pub fn restrict_to(&self, layout: &Layout) -> Policy {
        let h_max = layout.horizon();
        match self {
            Policy::Deterministic(acts) => Policy::Deterministic(
                acts.iter()
                    .take(h_max)
                    .enumerate()
                    .map(|(h, row)| row[..layout.layer_size(h)].to_vec())
                    .collect(),
            ),
            Policy::Stochastic(probs) => Policy::Stochastic(
                probs
                    .iter()
                    .take(h_max)
                    .enumerate()
                    .map(|(h, row)| row[..layout.layer_size(h)].to_vec())
                    .collect(),
            ),
        }
    }
}

/// Context-indexed policies, computed lazily or eagerly.
#[derive(Debug, Clone, Default)]
pub struct PolicyMap {
    entries: HashMap<String, Policy>,
}

impl PolicyMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates `f` on every context.
    pub fn build<'a, I, F>(contexts: I, mut f: F) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Arc<Context>>,
        F: FnMut(&Context) -> Result<Policy>,
    {
        let mut map = Self::new();
        for c in contexts {
            map.insert(c.id.clone(), f(c)?);
        }
        Ok(map)
    }

    pub fn insert(&mut self, id: String, policy: Policy) {
        self.entries.insert(id, policy);
    }

    pub fn get(&self, c: &Context) -> Option<&Policy> {
        self.entries.get(&c.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A context: a point of `R^{d'}` plus an identifier; `index` is its
/// position in a finite context space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub vector: Vec<f64>,
    #[serde(skip)]
    pub index: Option<usize>,
}

impl Context {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
            index: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)
    }
}

/// A context space known only through a sampler, with the matching MDP map.
pub trait ContextGenerator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut LabRng) -> Context;
    fn mdp_of(&self, c: &Context) -> Result<Arc<LayeredMdp>>;
}

#[derive(Debug, Clone)]
struct FiniteContexts {
    contexts: Vec<Arc<Context>>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    mdps: Vec<Arc<LayeredMdp>>,
}

#[derive(Debug, Clone)]
enum ContextSpace {
    Finite(FiniteContexts),
    Sampled(Arc<dyn ContextGenerator>),
}

/// Display names for states and actions; only used by the JSON schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Naming {
    pub states: Vec<Vec<String>>,
    pub actions: Vec<String>,
}

impl Naming {
    pub fn default_for(layout: &Layout) -> Self {
        Self {
            states: (0..=layout.horizon())
                .map(|h| layout.states(h).map(|s| format!("s{h}_{s}")).collect())
                .collect(),
            actions: (0..layout.n_actions()).map(|a| format!("a{a}")).collect(),
        }
    }
}

/// A contextual MDP: context space, context distribution and the map from
/// contexts to layered MDPs sharing one layout.
#[derive(Debug, Clone)]
pub struct Cmdp {
    layout: Layout,
    naming: Naming,
    space: ContextSpace,
    context_free_dynamics: bool,
    dim: usize,
}

impl Cmdp {
    /// A finite CMDP. Probabilities must sum to one; every MDP must share
    /// `layout`; with `context_free_dynamics` every kernel must be identical.
    pub fn finite(
        layout: Layout,
        naming: Naming,
        entries: Vec<(Context, f64, LayeredMdp)>,
        context_free_dynamics: bool,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(LabError::InvalidParameter("context space is empty".into()));
        }
        let dim = entries[0].0.dim();
        let mut contexts = Vec::with_capacity(entries.len());
        let mut probs = Vec::with_capacity(entries.len());
        let mut mdps: Vec<Arc<LayeredMdp>> = Vec::with_capacity(entries.len());
        for (i, (mut c, p, m)) in entries.into_iter().enumerate() {
            if c.dim() != dim {
                return Err(LabError::LengthMismatch {
                    left: c.dim(),
                    right: dim,
                });
            }
            if m.layout() != &layout {
                return Err(LabError::InvalidParameter(format!(
                    "context `{}` uses a different layered state space",
                    c.id
                )));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(LabError::InvalidParameter(format!("context `{}` has probability {p}", c.id)));
            }
            if contexts.iter().any(|o: &Arc<Context>| o.id == c.id) {
                return Err(LabError::InvalidParameter(format!("duplicate context id `{}`", c.id)));
            }
            c.index = Some(i);
            contexts.push(Arc::new(c));
            probs.push(p);
            mdps.push(Arc::new(m));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(LabError::InvalidParameter(format!("context probabilities sum to {total}")));
        }
        if context_free_dynamics {
            let first = mdps[0].dynamics();
            if let Some(bad) = mdps.iter().position(|m| m.dynamics() != first) {
                return Err(LabError::InvalidParameter(format!(
                    "context `{}` has different dynamics in a context-free CMDP",
                    contexts[bad].id
                )));
            }
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Ok(Self {
            layout,
            naming,
            space: ContextSpace::Finite(FiniteContexts {
                contexts,
                probs,
                cumulative,
                mdps,
            }),
            context_free_dynamics,
            dim,
        })
    }

    /// A CMDP over a sampled (possibly continuous) context space.
    pub fn sampled(layout: Layout, generator: Arc<dyn ContextGenerator>, context_free_dynamics: bool) -> Self {
        let naming = Naming::default_for(&layout);
        let dim = generator.dim();
        Self {
            layout,
            naming,
            space: ContextSpace::Sampled(generator),
            context_free_dynamics,
            dim,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn naming(&self) -> &Naming {
        &self.naming
    }

    pub fn context_dim(&self) -> usize {
        self.dim
    }

    pub fn context_free_dynamics(&self) -> bool {
        self.context_free_dynamics
    }

    /// Contexts and probabilities of a finite context space.
    pub fn finite_contexts(&self) -> Option<(&[Arc<Context>], &[f64])> {
        match &self.space {
            ContextSpace::Finite(f) => Some((&f.contexts, &f.probs)),
            ContextSpace::Sampled(_) => None,
        }
    }

    /// Draws `c ~ D`.
    pub fn sample_context(&self, rng: &mut LabRng) -> Arc<Context> {
        match &self.space {
            ContextSpace::Finite(f) => {
                let u: f64 = rng.gen::<f64>() * f.cumulative[f.cumulative.len() - 1];
                let i = f.cumulative.partition_point(|&c| c <= u).min(f.contexts.len() - 1);
                f.contexts[i].clone()
            }
            ContextSpace::Sampled(g) => {
                let c = g.sample(rng);
                Arc::new(c)
            }
        }
    }

    /// `M(c)`.
    pub fn mdp_of(&self, c: &Context) -> Result<Arc<LayeredMdp>> {
        match &self.space {
            ContextSpace::Finite(f) => {
                let i = self.resolve(c).ok_or_else(|| LabError::UnknownContext(c.id.clone()))?;
                Ok(f.mdps[i].clone())
            }
            ContextSpace::Sampled(g) => {
                if c.dim() != self.dim {
                    return Err(LabError::UnknownContext(c.id.clone()));
                }
                g.mdp_of(c)
            }
        }
    }

    /// Position of `c` in a finite context space.
    pub fn resolve(&self, c: &Context) -> Option<usize> {
        let ContextSpace::Finite(f) = &self.space else {
            return None;
        };
        match c.index {
            Some(i) if f.contexts.get(i).is_some_and(|k| k.id == c.id) => Some(i),
            _ => f.contexts.iter().position(|k| k.id == c.id),
        }
    }
}

/// Per-layer state distributions `q_h(.)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    layers: Vec<Vec<f64>>,
}

impl OccupancyTable {
    pub fn layer(&self, h: usize) -> &[f64] {
        &self.layers[h]
    }

    pub fn at(&self, h: usize, s: usize) -> f64 {
        self.layers[h][s]
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Exact forward recursion `q_{h+1}(s') = sum_{s,a} q_h(s) pi(a|s) P(s'|s,a)`.
pub fn occupancy(dynamics: &Dynamics, policy: &Policy) -> OccupancyTable {
    let layout = dynamics.layout();
    let mut layers = Vec::with_capacity(layout.horizon() + 1);
    layers.push(vec![1.0]);
    for h in 0..layout.horizon() {
        let mut next = vec![0.0; layout.layer_size(h + 1)];
        for (s, &q) in layers[h].iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            for a in 0..layout.n_actions() {
                let w = q * policy.prob(h, s, a);
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(dynamics.row(h, s, a)) {
                    *n += w * p;
                }
            }
        }
        layers.push(next);
    }
    OccupancyTable { layers }
}

/// `V^pi(s_0)` computed forward as `sum_h sum_{s,a} q_h(s) pi(a|s) r(s,a)`.
pub fn policy_value(m: &LayeredMdp, policy: &Policy) -> f64 {
    let q = occupancy(m.dynamics(), policy);
    let layout = m.layout();
    let mut v = 0.0;
    for h in 0..layout.horizon() {
        for (s, &w) in q.layer(h).iter().enumerate() {
            for a in 0..layout.n_actions() {
                v += w * policy.prob(h, s, a) * m.reward(h, s, a);
            }
        }
    }
    v
}

/// Stage values `V^pi_h(s)` by backward induction; `values[H]` is all zeros.
pub fn evaluate_backward(m: &LayeredMdp, policy: &Policy) -> Vec<Vec<f64>> {
    let layout = m.layout();
    let horizon = layout.horizon();
    let mut values = vec![Vec::new(); horizon + 1];
    values[horizon] = vec![0.0; layout.layer_size(horizon)];
    for h in (0..horizon).rev() {
        let next = &values[h + 1];
        let layer: Vec<f64> = (0..layout.layer_size(h))
            .map(|s| {
                (0..layout.n_actions())
                    .map(|a| {
                        let w = policy.prob(h, s, a);
                        if w == 0.0 {
                            return 0.0;
                        }
                        let cont: f64 = m.dynamics().row(h, s, a).iter().zip(next).map(|(p, v)| p * v).sum();
                        w * (m.reward(h, s, a) + cont)
                    })
                    .sum()
            })
            .collect();
        values[h] = layer;
    }
    values
}

/// `||p - q||_1` (not halved).
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// One episode: `s_0, a_0, r_0, ..., s_{H-1}, a_{H-1}, r_{H-1}, s_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub context: Arc<Context>,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Whether the episode was in state `s` at layer `h`.
    pub fn visits(&self, h: usize, s: usize) -> bool {
        self.states.get(h) == Some(&s)
    }

    /// `(s_h, a_h, r_h, s_{h+1})`.
    pub fn step(&self, h: usize) -> (usize, usize, f64, usize) {
        (self.states[h], self.actions[h], self.rewards[h], self.states[h + 1])
    }
}

/// Rolls out `policy` in `m`, recording the given context.
pub fn rollout(m: &LayeredMdp, context: Arc<Context>, policy: &Policy, rng: &mut LabRng) -> Trajectory {
    let horizon = m.layout().horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = 0;
    states.push(s);
    for h in 0..horizon {
        let a = policy.act(h, s, rng);
        let r = m.noise().sample(m.reward(h, s, a), rng);
        s = m.dynamics().sample_next(h, s, a, rng);
        actions.push(a);
        rewards.push(r);
        states.push(s);
    }
    Trajectory {
        context,
        states,
        actions,
        rewards,
    }
}

/// Simulates one episode of `M(c)` under `policy`; deterministic given `rng`.
pub fn sample_trajectory(cmdp: &Cmdp, c: &Arc<Context>, policy: &Policy, rng: &mut LabRng) -> Result<Trajectory> {
    let m = cmdp.mdp_of(c)?;
    policy.validate(m.layout())?;
    Ok(rollout(&m, c.clone(), policy, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(h: usize) -> LayeredMdp {
        let layout = Layout::new(vec![1; h + 1], 2).unwrap();
        let mut b = LayeredMdp::builder(layout);
        for k in 0..h {
            b = b.row_all(k, 0, &[1.0]).reward(k, 0, 0, 0.3).reward(k, 0, 1, 0.6);
        }
        b.build().unwrap()
    }

    #[test]
    fn chain_is_valid() {
        let m = chain(2);
        assert_eq!(m.layout().horizon(), 2);
        assert_eq!(m.layout().n_states(), 3);
    }

    #[test]
    fn short_row_is_rejected() {
        let layout = Layout::new(vec![1, 2], 1).unwrap();
        let err = LayeredMdp::builder(layout).row(0, 0, 0, &[0.5, 0.4]).build().unwrap_err();
        assert!(matches!(err, LabError::RowNotStochastic { h: 0, s: 0, a: 0, .. }));
    }

    #[test]
    fn reward_above_one_is_rejected() {
        let layout = Layout::new(vec![1, 1], 1).unwrap();
        let err = LayeredMdp::builder(layout)
            .row(0, 0, 0, &[1.0])
            .reward(0, 0, 0, 1.2)
            .build()
            .unwrap_err();
        assert!(matches!(err, LabError::RewardOutOfRange { value, .. } if value == 1.2));
    }

    #[test]
    fn row_of_wrong_length_is_a_layer_violation() {
        let layout = Layout::new(vec![1, 2], 1).unwrap();
        let mut d = Dynamics::zeros(layout);
        let err = d.set_row(0, 0, 0, &[1.0]).unwrap_err();
        assert!(matches!(err, LabError::LayerViolation { .. }));
    }

    #[test]
    fn start_layer_must_be_a_singleton() {
        assert!(matches!(Layout::new(vec![2, 1], 1), Err(LabError::LayerViolation { .. })));
    }

    #[test]
    fn occupancy_copies_a_single_row() {
        let layout = Layout::new(vec![1, 2], 1).unwrap();
        let m = LayeredMdp::builder(layout.clone()).row(0, 0, 0, &[0.3, 0.7]).build().unwrap();
        let q = occupancy(m.dynamics(), &Policy::constant(&layout, 0));
        assert_eq!(q.layer(1), &[0.3, 0.7]);
    }

    #[test]
    fn deterministic_chain_has_unit_occupancy() {
        let m = chain(3);
        let q = occupancy(m.dynamics(), &Policy::uniform(m.layout()));
        for h in 0..=3 {
            assert_eq!(q.layer(h), &[1.0]);
        }
    }

    #[test]
    fn one_step_value() {
        let layout = Layout::new(vec![1, 1], 2).unwrap();
        let m = LayeredMdp::builder(layout.clone())
            .row_all(0, 0, &[1.0])
            .reward(0, 0, 1, 0.4)
            .build()
            .unwrap();
        assert_eq!(policy_value(&m, &Policy::constant(&layout, 1)), 0.4);
        assert_eq!(policy_value(&m, &Policy::constant(&layout, 0)), 0.0);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!((tv_distance(&[0.3, 0.7], &[0.5, 0.5]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(LabError::LengthMismatch { .. })));
    }

    #[test]
    fn sink_layout_indices() {
        let layout = Layout::new(vec![1, 2, 3], 2).unwrap().with_sink();
        assert_eq!(layout.sink(0), None);
        assert_eq!(layout.sink(1), Some(2));
        assert_eq!(layout.sink(2), Some(3));
        assert_eq!(layout.n_states(), 6);
        assert_eq!(layout.without_sink().layer_sizes(), &[1, 2, 3]);
    }

    #[test]
    fn non_absorbing_sink_is_rejected() {
        let layout = Layout::new(vec![1, 1, 1], 1).unwrap().with_sink();
        let mut d = Dynamics::zeros(layout);
        d.set_row(0, 0, 0, &[1.0, 0.0]).unwrap();
        d.set_row(1, 0, 0, &[1.0, 0.0]).unwrap();
        d.set_row(1, 1, 0, &[1.0, 0.0]).unwrap();
        assert!(matches!(d.validate(), Err(LabError::LayerViolation { .. })));
        d.wire_sink();
        d.validate().unwrap();
    }

    #[test]
    fn unknown_context_is_reported() {
        let m = chain(1);
        let layout = m.layout().clone();
        let cmdp = Cmdp::finite(
            layout.clone(),
            Naming::default_for(&layout),
            vec![(Context::new("c0", vec![1.0]), 1.0, m)],
            true,
        )
        .unwrap();
        let stranger = Arc::new(Context::new("zz", vec![1.0]));
        let mut rng = rng_from_seed(0);
        let err = sample_trajectory(&cmdp, &stranger, &Policy::constant(&layout, 0), &mut rng).unwrap_err();
        assert!(matches!(err, LabError::UnknownContext(id) if id == "zz"));
    }

    #[test]
    fn context_free_flag_is_checked() {
        let layout = Layout::new(vec![1, 2], 1).unwrap();
        let a = LayeredMdp::builder(layout.clone()).row(0, 0, 0, &[0.5, 0.5]).build().unwrap();
        let b = LayeredMdp::builder(layout.clone()).row(0, 0, 0, &[0.1, 0.9]).build().unwrap();
        let entries = vec![
            (Context::new("x", vec![0.0]), 0.5, a),
            (Context::new("y", vec![1.0]), 0.5, b),
        ];
        assert!(Cmdp::finite(layout.clone(), Naming::default_for(&layout), entries.clone(), true).is_err());
        assert!(Cmdp::finite(layout.clone(), Naming::default_for(&layout), entries, false).is_ok());
    }
}
