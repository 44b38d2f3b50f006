//! Synthetic realizable CMDP instances and the episode interface learners use.
//!
//! Learners never see an instance's truth. They draw contexts and roll out
//! policies through an [`EpisodeSource`], which also keeps the audited episode
//! counters. Algorithms for known dynamics additionally receive a
//! [`KnownDynamics`] oracle that exposes transition kernels and nothing else.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::erm::{Arity, FeatureMap, FunctionClass, Hypothesis, Input, LabeledDataset};
use crate::error::{LabError, Result};
use crate::mdp::{
    rng_from_seed, rollout, Cmdp, Context, ContextGenerator, Dynamics, LabRng, LayeredMdp, Layout, Naming, Policy,
    RewardNoise, Trajectory,
};
use crate::planner::ffp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardFamily {
    /// `r^c(s, a) = b + <w, c>`, kept inside `[0, 1]` for unit contexts.
    LinearClipped,
    /// One of `class_size` random tables over the finite context set.
    FiniteTable { class_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsFamily {
    ContextFreeRandom,
    /// `P^c = lambda(c) P0 + (1 - lambda(c)) P1` with `lambda(c) = (1 + <u, c>) / 2`.
    ContextLinearMixture,
}

fn default_floor() -> f64 {
    0.0
}

/// Generator recipe. `n_contexts = 0` asks for a continuous context space
/// (the unit sphere) exposed through a sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub n_actions: usize,
    pub n_contexts: usize,
    pub context_dim: usize,
    pub reward_family: RewardFamily,
    pub dynamics_family: DynamicsFamily,
    #[serde(default = "default_floor")]
    pub reachability_floor: f64,
    #[serde(default)]
    pub noise: RewardNoise,
    /// Places the first two contexts at `u` and `-u`, so their kernels are exactly `P0` and `P1`.
    #[serde(default)]
    pub planted_endpoints: bool,
    /// Whether learners get the transition oracle.
    #[serde(default)]
    pub known_dynamics: bool,
}

impl GenSpec {
    pub fn validate(&self) -> Result<Layout> {
        if self.context_dim == 0 {
            return Err(LabError::InvalidParameter("context_dim must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reachability_floor) {
            return Err(LabError::InvalidParameter(format!(
                "reachability floor {} outside [0, 1]",
                self.reachability_floor
            )));
        }
        if let RewardFamily::FiniteTable { class_size } = self.reward_family {
            if class_size == 0 {
                return Err(LabError::InvalidParameter("class_size must be at least 1".into()));
            }
            if self.n_contexts == 0 {
                return Err(LabError::InfeasibleSpec(
                    "finite-table rewards need a finite context set".into(),
                ));
            }
        }
        if self.planted_endpoints && self.n_contexts < 2 {
            return Err(LabError::InfeasibleSpec("planted endpoints need two contexts".into()));
        }
        Layout::new(self.layer_sizes.clone(), self.n_actions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum RewardTruth {
    /// `[h][s * A + a] = (w, b)`.
    Linear(Vec<Vec<(Vec<f64>, f64)>>),
    /// `[h][s * A + a]` table over context indices, plus the whole candidate list.
    Table {
        truth: Vec<Vec<Vec<f64>>>,
        candidates: Vec<Vec<Vec<Vec<f64>>>>,
    },
}

/// Ground truth of a generated instance.
#[derive(Debug, Clone)]
struct Truth {
    layout: Layout,
    rewards: RewardTruth,
    p0: Arc<Dynamics>,
    /// Second endpoint and direction for mixture dynamics.
    mixture: Option<(Arc<Dynamics>, Vec<f64>)>,
    noise: RewardNoise,
    ids: Vec<String>,
}

impl Truth {
    fn lambda(&self, c: &Context) -> Option<f64> {
        self.mixture.as_ref().map(|(_, u)| {
            let dot: f64 = u.iter().zip(&c.vector).map(|(a, b)| a * b).sum();
            (0.5 + 0.5 * dot).clamp(0.0, 1.0)
        })
    }

    fn dynamics_at(&self, lambda: Option<f64>) -> Arc<Dynamics> {
        match (lambda, &self.mixture) {
            (Some(l), Some((p1, _))) => {
                let mut d = Dynamics::zeros(self.layout.clone());
                for h in 0..self.layout.horizon() {
                    for s in self.layout.states(h) {
                        for a in 0..self.layout.n_actions() {
                            let row: Vec<f64> = self
                                .p0
                                .row(h, s, a)
                                .iter()
                                .zip(p1.row(h, s, a))
                                .map(|(x, y)| l * x + (1.0 - l) * y)
                                .collect();
                            d.set_row(h, s, a, &row).expect("rows share the layout");
                        }
                    }
                }
                Arc::new(d)
            }
            _ => self.p0.clone(),
        }
    }

    fn reward(&self, c: &Context, h: usize, cell: usize) -> f64 {
        match &self.rewards {
            RewardTruth::Linear(params) => {
                let (w, b) = &params[h][cell];
                let z: f64 = b + w.iter().zip(&c.vector).map(|(a, x)| a * x).sum::<f64>();
                z.clamp(0.0, 1.0)
            }
            RewardTruth::Table { truth, .. } => {
                let i = c.index.or_else(|| self.ids.iter().position(|id| *id == c.id));
                i.map_or(0.0, |i| truth[h][cell][i])
            }
        }
    }

    fn mdp_for(&self, c: &Context, dynamics: Arc<Dynamics>) -> Result<LayeredMdp> {
        let n_actions = self.layout.n_actions();
        let rewards = (0..self.layout.horizon())
            .map(|h| {
                (0..self.layout.layer_size(h) * n_actions)
                    .map(|cell| self.reward(c, h, cell))
                    .collect()
            })
            .collect();
        LayeredMdp::new(dynamics, rewards, self.noise)
    }
}

/// Continuous contexts on the unit sphere.
#[derive(Debug)]
struct SphereContexts {
    truth: Truth,
    dim: usize,
}

impl ContextGenerator for SphereContexts {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut LabRng) -> Context {
        let v = sphere_point(self.dim, rng);
        let id = format!("u{:016x}", rng.gen::<u64>());
        Context::new(id, v)
    }

    fn mdp_of(&self, c: &Context) -> Result<Arc<LayeredMdp>> {
        let d = self.truth.dynamics_at(self.truth.lambda(c));
        Ok(Arc::new(self.truth.mdp_for(c, d)?))
    }
}

fn sphere_point(dim: usize, rng: &mut LabRng) -> Vec<f64> {
    loop {
        // Box-Muller pairs give independent standard normals.
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_row(n: usize, rng: &mut LabRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn random_dynamics(layout: &Layout, rng: &mut LabRng) -> Dynamics {
    let mut d = Dynamics::zeros(layout.clone());
    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            for a in 0..layout.n_actions() {
                let row = random_row(layout.layer_size(h + 1), rng);
                d.set_row(h, s, a, &row).expect("row sized from the layout");
            }
        }
    }
    d
}

fn mix_uniform(d: &Dynamics, eta: f64) -> Dynamics {
    let layout = d.layout().clone();
    let mut out = Dynamics::zeros(layout.clone());
    for h in 0..layout.horizon() {
        let u = 1.0 / layout.layer_size(h + 1) as f64;
        for s in layout.states(h) {
            for a in 0..layout.n_actions() {
                let row: Vec<f64> = d.row(h, s, a).iter().map(|p| (1.0 - eta) * p + eta * u).collect();
                out.set_row(h, s, a, &row).expect("same layout");
            }
        }
    }
    out
}

fn min_reach(d: &Dynamics) -> f64 {
    let layout = d.layout();
    let mut worst: f64 = 1.0;
    for h in 1..=layout.horizon() {
        for s in layout.states(h) {
            worst = worst.min(ffp(d, h, s).expect("state from layout").prob);
        }
    }
    worst
}

/// A generated instance: the CMDP plus the classes that make it realizable.
#[derive(Debug, Clone)]
pub struct EnvHandle {
    pub spec: GenSpec,
    cmdp: Arc<Cmdp>,
    truth: Truth,
    /// Mixing weight toward uniform rows chosen to meet the floor.
    pub eta: f64,
    /// `[h][s][a]`: per-pair reward classes over context features.
    pub reward_classes: Vec<Vec<Vec<FunctionClass>>>,
    /// `[h]`: per-layer reward classes over `(c, s, a)` (linear rewards only).
    pub layer_reward_classes: Option<Vec<FunctionClass>>,
    /// `[h]`: per-layer dynamics classes over `(c, s, a, s')`.
    pub layer_dynamics_classes: Vec<FunctionClass>,
}

/// Builds an instance; deterministic in `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<EnvHandle> {
    let layout = spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let dim = spec.context_dim;
    let n_actions = layout.n_actions();
    let horizon = layout.horizon();

    let mixture_dir = match spec.dynamics_family {
        DynamicsFamily::ContextLinearMixture => Some(sphere_point(dim, &mut rng)),
        DynamicsFamily::ContextFreeRandom => None,
    };
    let mut contexts: Vec<Context> = (0..spec.n_contexts)
        .map(|i| Context::new(format!("c{i}"), sphere_point(dim, &mut rng)))
        .collect();
    if spec.planted_endpoints {
        let u = mixture_dir.clone().unwrap_or_else(|| sphere_point(dim, &mut rng));
        contexts[0].vector = u.clone();
        contexts[1].vector = u.iter().map(|x| -x).collect();
    }
    for (i, c) in contexts.iter_mut().enumerate() {
        c.index = Some(i);
    }
    let ids: Vec<String> = contexts.iter().map(|c| c.id.clone()).collect();

    let rewards = match spec.reward_family {
        RewardFamily::LinearClipped => RewardTruth::Linear(
            (0..horizon)
                .map(|h| {
                    (0..layout.layer_size(h) * n_actions)
                        .map(|_| {
                            let b: f64 = rng.gen_range(0.1..0.9);
                            let radius = rng.gen::<f64>() * b.min(1.0 - b);
                            let w: Vec<f64> = sphere_point(dim, &mut rng).into_iter().map(|x| radius * x).collect();
                            (w, b)
                        })
                        .collect()
                })
                .collect(),
        ),
        RewardFamily::FiniteTable { class_size } => {
            let n = spec.n_contexts;
            let candidates: Vec<Vec<Vec<Vec<f64>>>> = (0..horizon)
                .map(|h| {
                    (0..layout.layer_size(h) * n_actions)
                        .map(|_| {
                            (0..class_size)
                                .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let truth = candidates
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|cands: &Vec<Vec<f64>>| cands[rng.gen_range(0..class_size)].clone())
                        .collect()
                })
                .collect();
            RewardTruth::Table { truth, candidates }
        }
    };

    let base0 = random_dynamics(&layout, &mut rng);
    let base1 = mixture_dir.as_ref().map(|_| random_dynamics(&layout, &mut rng));

    // Smallest eta on a 1/100 grid meeting the floor for every context.
    let lambdas: Vec<Option<f64>> = match &mixture_dir {
        None => vec![None],
        Some(u) if spec.n_contexts > 0 => contexts
            .iter()
            .map(|c| Some((0.5 + 0.5 * u.iter().zip(&c.vector).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, 1.0)))
            .collect(),
        Some(_) => (0..=20).map(|k| Some(k as f64 / 20.0)).collect(),
    };
    let mut chosen = None;
    for k in 0..=100 {
        let eta = k as f64 / 100.0;
        let truth = Truth {
            layout: layout.clone(),
            rewards: rewards.clone(),
            p0: Arc::new(mix_uniform(&base0, eta)),
            mixture: base1
                .as_ref()
                .zip(mixture_dir.clone())
                .map(|(b, u)| (Arc::new(mix_uniform(b, eta)), u)),
            noise: spec.noise,
            ids: ids.clone(),
        };
        let ok = spec.reachability_floor <= 0.0
            || lambdas
                .iter()
                .all(|l| min_reach(&truth.dynamics_at(*l)) >= spec.reachability_floor - 1e-12);
        if ok {
            chosen = Some((eta, truth));
            break;
        }
    }
    let (eta, truth) = chosen.ok_or_else(|| {
        LabError::InfeasibleSpec(format!(
            "no uniform mixing reaches every state with probability {}",
            spec.reachability_floor
        ))
    })?;

    let context_free = spec.dynamics_family == DynamicsFamily::ContextFreeRandom || spec.n_contexts == 1;
    let cmdp = if spec.n_contexts > 0 {
        let p = 1.0 / spec.n_contexts as f64;
        let mut entries = Vec::with_capacity(contexts.len());
        for c in &contexts {
            let m = truth.mdp_for(c, truth.dynamics_at(truth.lambda(c)))?;
            entries.push((c.clone(), p, m));
        }
        let naming = Naming::default_for(&layout);
        let mut cmdp = Cmdp::finite(layout.clone(), naming.clone(), entries.clone(), false)?;
        if context_free {
            // A single context or the context-free family: kernels coincide.
            let shared = entries[0].2.dynamics().clone();
            let entries = entries
                .into_iter()
                .map(|(c, p, m)| Ok((c, p, LayeredMdp::new(shared.clone(), m.rewards().to_vec(), m.noise())?)))
                .collect::<Result<Vec<_>>>()?;
            cmdp = Cmdp::finite(layout.clone(), naming, entries, true)?;
        }
        cmdp
    } else {
        Cmdp::sampled(
            layout.clone(),
            Arc::new(SphereContexts {
                truth: truth.clone(),
                dim,
            }),
            context_free,
        )
    };

    let reward_classes = build_pair_classes(&layout, dim, &truth, &ids)?;
    let layer_reward_classes = matches!(truth.rewards, RewardTruth::Linear(_)).then(|| {
        (0..horizon)
            .map(|h| {
                FunctionClass::linear(FeatureMap::Block {
                    dim,
                    bias: true,
                    states: layout.layer_size(h),
                    actions: n_actions,
                    next_states: None,
                })
            })
            .collect()
    });
    let layer_dynamics_classes = (0..horizon)
        .map(|h| {
            FunctionClass::linear(FeatureMap::Block {
                dim,
                bias: true,
                states: layout.layer_size(h),
                actions: n_actions,
                next_states: Some(layout.layer_size(h + 1)),
            })
        })
        .collect();

    Ok(EnvHandle {
        spec: spec.clone(),
        cmdp: Arc::new(cmdp),
        truth,
        eta,
        reward_classes,
        layer_reward_classes,
        layer_dynamics_classes,
    })
}

fn build_pair_classes(
    layout: &Layout,
    dim: usize,
    truth: &Truth,
    ids: &[String],
) -> Result<Vec<Vec<Vec<FunctionClass>>>> {
    let n_actions = layout.n_actions();
    (0..layout.horizon())
        .map(|h| {
            layout
                .states(h)
                .map(|s| {
                    (0..n_actions)
                        .map(|a| match &truth.rewards {
                            RewardTruth::Linear(_) => Ok(FunctionClass::linear(FeatureMap::Context { dim, bias: true })),
                            RewardTruth::Table { candidates, .. } => FunctionClass::finite(
                                candidates[h][s * n_actions + a]
                                    .iter()
                                    .map(|values| Hypothesis::Table {
                                        ids: ids.to_vec(),
                                        values: values.clone(),
                                    })
                                    .collect(),
                            ),
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

impl EnvHandle {
    pub fn cmdp(&self) -> &Arc<Cmdp> {
        &self.cmdp
    }

    pub fn layout(&self) -> &Layout {
        self.cmdp.layout()
    }

    /// A counting episode source over this instance.
    pub fn session(&self) -> EnvSession {
        EnvSession::new(self.cmdp.clone())
    }

    /// The transition oracle, when the spec declares known dynamics.
    pub fn known_dynamics(&self) -> Option<KnownDynamics> {
        self.spec.known_dynamics.then(|| KnownDynamics::new(self.cmdp.clone()))
    }

    /// Draws `c ~ D` and rolls `policy` out in `M(c)`.
    pub fn episode(&self, policy: &Policy, rng: &mut LabRng) -> Result<(Arc<Context>, Trajectory)> {
        let c = self.cmdp.sample_context(rng);
        let t = crate::mdp::sample_trajectory(&self.cmdp, &c, policy, rng)?;
        Ok((c, t))
    }

    /// Expected reward of `(h, s, a)` under context `c`.
    pub fn true_reward(&self, c: &Context, h: usize, s: usize, a: usize) -> f64 {
        self.truth.reward(c, h, s * self.layout().n_actions() + a)
    }

    /// `P^c(s' | s, a)` from the generator's closed form.
    pub fn true_transition(&self, c: &Context, h: usize, s: usize, a: usize, next: usize) -> f64 {
        self.truth.dynamics_at(self.truth.lambda(c)).row(h, s, a)[next]
    }

    /// Noiseless labeling of every `(c, s, a)` of layer `h` by the true reward.
    pub fn reward_labels(&self, h: usize, s: Option<(usize, usize)>) -> Result<LabeledDataset> {
        let (contexts, _) = self.cmdp.finite_contexts().ok_or(LabError::InfiniteContextSpace)?;
        let layout = self.layout();
        let mut data = LabeledDataset::new(if s.is_some() { Arity::Context } else { Arity::StateAction });
        for c in contexts {
            for st in layout.states(h) {
                for a in 0..layout.n_actions() {
                    if s.is_some_and(|pair| pair != (st, a)) {
                        continue;
                    }
                    let x = match s {
                        Some(_) => Input::context(c.clone()),
                        None => Input::pair(c.clone(), st, a),
                    };
                    data.push(x, self.true_reward(c, h, st, a))?;
                }
            }
        }
        Ok(data)
    }

    /// Noiseless labeling of every `(c, s, a, s')` of layer `h` by the true kernel.
    pub fn transition_labels(&self, h: usize) -> Result<LabeledDataset> {
        let (contexts, _) = self.cmdp.finite_contexts().ok_or(LabError::InfiniteContextSpace)?;
        let layout = self.layout();
        let mut data = LabeledDataset::new(Arity::Transition);
        for c in contexts {
            for s in layout.states(h) {
                for a in 0..layout.n_actions() {
                    for next in layout.states(h + 1) {
                        data.push(
                            Input::transition(c.clone(), s, a, next),
                            self.true_transition(c, h, s, a, next).clamp(0.0, 1.0),
                        )?;
                    }
                }
            }
        }
        Ok(data)
    }
}

/// The only channel through which learners interact with an environment.
pub trait EpisodeSource {
    fn layout(&self) -> &Layout;
    fn context_dim(&self) -> usize;
    /// Starts an episode by drawing `c ~ D`; counted as one episode.
    fn observe_context(&mut self, rng: &mut LabRng) -> Arc<Context>;
    /// Plays `policy` in the episode of context `c`.
    fn rollout(&mut self, c: &Arc<Context>, policy: &Policy, rng: &mut LabRng) -> Result<Trajectory>;
    /// Contexts observed so far (the audited episode count).
    fn episodes(&self) -> u64;
    /// Episodes in which a policy was actually played.
    fn rollouts(&self) -> u64;
}

/// Counting [`EpisodeSource`] over a [`Cmdp`].
#[derive(Debug, Clone)]
pub struct EnvSession {
    cmdp: Arc<Cmdp>,
    episodes: u64,
    rollouts: u64,
}

impl EnvSession {
    pub fn new(cmdp: Arc<Cmdp>) -> Self {
        Self {
            cmdp,
            episodes: 0,
            rollouts: 0,
        }
    }
}

impl EpisodeSource for EnvSession {
    fn layout(&self) -> &Layout {
        self.cmdp.layout()
    }

    fn context_dim(&self) -> usize {
        self.cmdp.context_dim()
    }

    fn observe_context(&mut self, rng: &mut LabRng) -> Arc<Context> {
        self.episodes += 1;
        self.cmdp.sample_context(rng)
    }

    fn rollout(&mut self, c: &Arc<Context>, policy: &Policy, rng: &mut LabRng) -> Result<Trajectory> {
        self.rollouts += 1;
        let m = self.cmdp.mdp_of(c)?;
        Ok(rollout(&m, c.clone(), policy, rng))
    }

    fn episodes(&self) -> u64 {
        self.episodes
    }

    fn rollouts(&self) -> u64 {
        self.rollouts
    }
}

/// Transition-kernel oracle for the known-dynamics algorithms.
#[derive(Debug, Clone)]
pub struct KnownDynamics {
    cmdp: Arc<Cmdp>,
}

impl KnownDynamics {
    pub fn new(cmdp: Arc<Cmdp>) -> Self {
        Self { cmdp }
    }

    /// `P^c`.
    pub fn of(&self, c: &Context) -> Result<Arc<Dynamics>> {
        Ok(self.cmdp.mdp_of(c)?.dynamics().clone())
    }

    /// The shared kernel of a context-free CMDP.
    pub fn shared(&self) -> Result<Arc<Dynamics>> {
        if !self.cmdp.context_free_dynamics() {
            return Err(LabError::InvalidParameter("dynamics depend on the context".into()));
        }
        let c = match self.cmdp.finite_contexts() {
            Some((contexts, _)) => contexts[0].clone(),
            None => self.cmdp.sample_context(&mut rng_from_seed(0)),
        };
        self.of(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erm::{erm_fit, Loss};
    use crate::mdp::occupancy;

    fn spec(dynamics: DynamicsFamily, n_contexts: usize) -> GenSpec {
        GenSpec {
            seed: 3,
            layer_sizes: vec![1, 2, 3, 2],
            n_actions: 2,
            n_contexts,
            context_dim: 2,
            reward_family: RewardFamily::LinearClipped,
            dynamics_family: dynamics,
            reachability_floor: 0.2,
            noise: RewardNoise::Bernoulli,
            planted_endpoints: false,
            known_dynamics: false,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(DynamicsFamily::ContextLinearMixture, 4);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        let (ca, _) = a.cmdp().finite_contexts().unwrap();
        let (cb, _) = b.cmdp().finite_contexts().unwrap();
        for (x, y) in ca.iter().zip(cb) {
            assert_eq!(x, y);
            assert_eq!(a.cmdp().mdp_of(x).unwrap(), b.cmdp().mdp_of(y).unwrap());
        }
    }

    #[test]
    fn single_context_families_coincide() {
        let a = generate(&spec(DynamicsFamily::ContextFreeRandom, 1)).unwrap();
        let b = generate(&spec(DynamicsFamily::ContextLinearMixture, 1)).unwrap();
        assert!(a.cmdp().context_free_dynamics());
        assert!(b.cmdp().context_free_dynamics());
    }

    #[test]
    fn context_free_family_sets_the_flag() {
        let env = generate(&spec(DynamicsFamily::ContextFreeRandom, 5)).unwrap();
        assert!(env.cmdp().context_free_dynamics());
        let (cs, _) = env.cmdp().finite_contexts().unwrap();
        let first = env.cmdp().mdp_of(&cs[0]).unwrap();
        for c in cs {
            assert_eq!(env.cmdp().mdp_of(c).unwrap().dynamics(), first.dynamics());
        }
    }

    #[test]
    fn planted_endpoints_recover_both_kernels() {
        let mut s = spec(DynamicsFamily::ContextLinearMixture, 4);
        s.planted_endpoints = true;
        s.reachability_floor = 0.0;
        let env = generate(&s).unwrap();
        let (cs, _) = env.cmdp().finite_contexts().unwrap();
        let (p1, _) = env.truth.mixture.clone().unwrap();
        let m0 = env.cmdp().mdp_of(&cs[0]).unwrap();
        let m1 = env.cmdp().mdp_of(&cs[1]).unwrap();
        assert!(m0.dynamics().max_row_distance(&env.truth.p0, 3) < 1e-12);
        assert!(m1.dynamics().max_row_distance(&p1, 3) < 1e-12);
    }

    #[test]
    fn floor_is_met_and_infeasible_floor_is_reported() {
        let env = generate(&spec(DynamicsFamily::ContextLinearMixture, 6)).unwrap();
        let (cs, _) = env.cmdp().finite_contexts().unwrap();
        for c in cs {
            assert!(min_reach(env.cmdp().mdp_of(c).unwrap().dynamics()) >= 0.2 - 1e-12);
        }
        let mut s = spec(DynamicsFamily::ContextFreeRandom, 2);
        s.reachability_floor = 0.9;
        assert!(matches!(generate(&s), Err(LabError::InfeasibleSpec(_))));
    }

    #[test]
    fn truths_are_realizable() {
        for family in [DynamicsFamily::ContextFreeRandom, DynamicsFamily::ContextLinearMixture] {
            let env = generate(&spec(family, 6)).unwrap();
            let layout = env.layout().clone();
            for h in 0..layout.horizon() {
                let data = env.transition_labels(h).unwrap();
                let f = erm_fit(&env.layer_dynamics_classes[h], &data, Loss::L2).unwrap();
                assert!(f.empirical_loss(&data, Loss::L2) < 1e-8);
                let data = env.reward_labels(h, None).unwrap();
                let f = erm_fit(&env.layer_reward_classes.as_ref().unwrap()[h], &data, Loss::L2).unwrap();
                assert!(f.empirical_loss(&data, Loss::L2) < 1e-8);
                for s in layout.states(h) {
                    for a in 0..2 {
                        let data = env.reward_labels(h, Some((s, a))).unwrap();
                        let f = erm_fit(&env.reward_classes[h][s][a], &data, Loss::L1).unwrap();
                        assert!(f.empirical_loss(&data, Loss::L1) < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn finite_table_truth_is_a_class_member() {
        let mut s = spec(DynamicsFamily::ContextFreeRandom, 5);
        s.reward_family = RewardFamily::FiniteTable { class_size: 8 };
        let env = generate(&s).unwrap();
        assert_eq!(env.reward_classes[1][0][1].dim, 3.0);
        let data = env.reward_labels(1, Some((0, 1))).unwrap();
        let f = erm_fit(&env.reward_classes[1][0][1], &data, Loss::L1).unwrap();
        assert_eq!(f.empirical_loss(&data, Loss::L1), 0.0);
    }

    #[test]
    fn sampled_contexts_give_valid_mdps() {
        let env = generate(&spec(DynamicsFamily::ContextLinearMixture, 0)).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..20 {
            let c = env.cmdp().sample_context(&mut rng);
            assert!((c.vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let m = env.cmdp().mdp_of(&c).unwrap();
            let q = occupancy(m.dynamics(), &Policy::uniform(m.layout()));
            assert!((q.layer(3).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn point_mass_distribution_repeats_its_context() {
        let env = generate(&spec(DynamicsFamily::ContextFreeRandom, 1)).unwrap();
        let mut rng = rng_from_seed(5);
        let pol = Policy::constant(env.layout(), 0);
        for _ in 0..10 {
            assert_eq!(env.episode(&pol, &mut rng).unwrap().0.id, "c0");
        }
    }

    #[test]
    fn session_counts_episodes() {
        let env = generate(&spec(DynamicsFamily::ContextFreeRandom, 3)).unwrap();
        let mut session = env.session();
        let mut rng = rng_from_seed(9);
        let pol = Policy::uniform(env.layout());
        for i in 0..5 {
            let c = session.observe_context(&mut rng);
            if i % 2 == 0 {
                session.rollout(&c, &pol, &mut rng).unwrap();
            }
        }
        assert_eq!(session.episodes(), 5);
        assert_eq!(session.rollouts(), 3);
    }
}
