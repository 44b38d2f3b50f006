//! Standalone invariant suites, run by `cmdp-lab verify` and the acceptance
//! tests. Each suite is seeded and returns a [`Check`] with a one-line detail.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context_dep::{acdd, explore_kcdd, is_member, AcddPrefix, CdConfig};
use crate::context_free::{tabular_estimate, Counters};
use crate::env::{EnvSession, KnownDynamics};
use crate::erm::{n_dynamics_tabular, FeatureMap, FunctionClass, Hypothesis, Input, Loss, Predictor};
use crate::error::{LabError, Result};
use crate::harness::{run, ExperimentConfig};
use crate::mdp::{occupancy, policy_value, rng_from_seed, Cmdp, Context, Dynamics, LabRng, LayeredMdp, Layout, Naming, Policy, RewardNoise};
use crate::oracles::{brute_force_plan, chi_square_gof, Frequency};
use crate::params::Param;
use crate::planner::{ffp, plan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<Frequency>,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
            frequency: None,
        }
    }
}

/// A probability vector of length `n` with every entry positive.
pub fn random_row(rng: &mut LabRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Random rows and rewards; with `coarse`, rewards come from `{0, 0.5, 1}`
/// so that ties are common.
pub fn random_mdp(rng: &mut LabRng, layer_sizes: Vec<usize>, n_actions: usize, coarse: bool) -> Result<LayeredMdp> {
    let layout = Layout::new(layer_sizes, n_actions)?;
    let mut b = LayeredMdp::builder(layout.clone());
    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            for a in 0..n_actions {
                let r = if coarse {
                    f64::from(rng.gen_range(0..3u8)) / 2.0
                } else {
                    rng.gen()
                };
                b = b.row(h, s, a, &random_row(rng, layout.layer_size(h + 1))).reward(h, s, a, r);
            }
        }
    }
    b.build()
}

/// A stochastic policy with random action probabilities.
pub fn random_policy(rng: &mut LabRng, layout: &Layout) -> Policy {
    Policy::Stochastic(
        (0..layout.horizon())
            .map(|h| layout.states(h).map(|_| random_row(rng, layout.n_actions())).collect())
            .collect(),
    )
}

fn random_sizes(rng: &mut LabRng, horizon: usize, widest: usize) -> Vec<usize> {
    std::iter::once(1)
        .chain((0..horizon).map(|_| rng.gen_range(1..=widest)))
        .collect()
}

/// Backward induction against exhaustive enumeration.
pub fn planner_equivalence(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let horizon = rng.gen_range(1..=3);
        let n_actions = rng.gen_range(1..=3);
        let sizes = random_sizes(&mut rng, horizon, 4);
        let m = random_mdp(&mut rng, sizes, n_actions, t % 2 == 1)?;
        let (_, best) = brute_force_plan(&m)?;
        let planned = plan(&m);
        worst = worst
            .max((planned.value - best).abs())
            .max((policy_value(&m, &planned.policy) - best).abs());
    }
    Ok(Check::new(
        "planner_equivalence",
        worst <= 1e-9,
        format!("{trials} instances, max value gap {worst:.3e}"),
    ))
}

/// Moves every row of `d` toward a random row, by L1 distance at most `gamma`
/// (exactly `gamma` whenever the random row is far enough).
pub fn perturb(d: &Dynamics, gamma: f64, rng: &mut LabRng) -> Dynamics {
    let layout = d.layout().clone();
    let mut out = d.clone();
    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            for a in 0..layout.n_actions() {
                let q = random_row(rng, layout.layer_size(h + 1));
                let row = out.row_mut(h, s, a);
                let dist: f64 = row.iter().zip(&q).map(|(p, q)| (p - q).abs()).sum();
                let t = if dist > 0.0 { (gamma / dist).min(1.0) } else { 0.0 };
                for (p, q) in row.iter_mut().zip(&q) {
                    *p = (1.0 - t) * *p + t * q;
                }
            }
        }
    }
    out
}

/// Row distance `<= gamma` implies `||q_h - q~_h||_1 <= gamma h`.
pub fn occupancy_distance(trials: usize, gammas: &[f64], seed: u64) -> Result<Check> {
    let mut rng = rng_from_seed(seed);
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    for t in 0..trials {
        let gamma = gammas[t % gammas.len()];
        let horizon = rng.gen_range(1..=4);
        let n_actions = rng.gen_range(1..=3);
        let sizes = random_sizes(&mut rng, horizon, 5);
        let m = random_mdp(&mut rng, sizes, n_actions, false)?;
        let p = m.dynamics();
        let p_tilde = perturb(p, gamma, &mut rng);
        let max_row = p.max_row_distance(&p_tilde, horizon);
        ok &= max_row <= gamma + 1e-12;
        let pi = random_policy(&mut rng, m.layout());
        let (q, q_tilde) = (occupancy(p, &pi), occupancy(&p_tilde, &pi));
        for h in 1..=horizon {
            let d: f64 = q.layer(h).iter().zip(q_tilde.layer(h)).map(|(a, b)| (a - b).abs()).sum();
            ok &= d <= gamma * h as f64 + 1e-9;
            worst_ratio = worst_ratio.max(d / (gamma * h as f64));
        }
    }
    Ok(Check::new(
        "occupancy_distance",
        ok,
        format!("{trials} triples, largest ||q - q~||_1 / (gamma h) = {worst_ratio:.4}"),
    ))
}

/// Rows estimated from `N_P(gamma, delta)` samples are `gamma`-close in L1.
pub fn tabular_guarantee(trials: u64, gamma: f64, delta: f64, next_states: usize, seed: u64) -> Result<Check> {
    let n_p = n_dynamics_tabular(gamma, delta, next_states)?;
    let layout = Layout::new(vec![1, next_states], 2)?;
    let mut successes = 0;
    for t in 0..trials {
        let mut rng = rng_from_seed(seed.wrapping_add(t));
        let mut truth = Dynamics::zeros(layout.clone());
        for a in 0..2 {
            truth.set_row(0, 0, a, &random_row(&mut rng, next_states))?;
        }
        let mut counters = Counters::new(&layout);
        for a in 0..2 {
            for _ in 0..n_p {
                counters.record(0, 0, a, truth.sample_next(0, 0, a, &mut rng));
            }
        }
        let estimate = tabular_estimate(&counters, n_p)?;
        let close = (0..2).all(|a| {
            let d: f64 = truth
                .row(0, 0, a)
                .iter()
                .zip(estimate.row(0, 0, a))
                .map(|(p, q)| (p - q).abs())
                .sum();
            d <= gamma
        });
        successes += u64::from(close);
    }
    let freq = Frequency::wilson(successes, trials);
    Ok(Check {
        name: "tabular_guarantee".into(),
        passed: freq.rate >= 0.95 && freq.lower >= 0.90,
        detail: format!(
            "N_P = {n_p}: {successes}/{trials} trials within gamma = {gamma}, Wilson [{:.3}, {:.3}]",
            freq.lower, freq.upper
        ),
        frequency: Some(freq),
    })
}

/// Four contexts reaching state `(1, 0)` with probabilities 0.9, 0.5, 0.3
/// and 0.05; with `beta = 0.2` the last one is not good.
pub fn planted_instance() -> Result<(Arc<Cmdp>, Vec<f64>)> {
    let reach = [0.9, 0.5, 0.3, 0.05];
    let weights = vec![0.1, 0.2, 0.3, 0.4];
    let layout = Layout::new(vec![1, 2, 1], 2)?;
    let mut entries = Vec::new();
    for (i, (&p, &w)) in reach.iter().zip(&weights).enumerate() {
        let m = LayeredMdp::builder(layout.clone())
            .row_all(0, 0, &[p, 1.0 - p])
            .row_all(1, 0, &[1.0])
            .row_all(1, 1, &[1.0])
            .reward(1, 0, 0, 0.2 + 0.1 * i as f64)
            .reward(1, 0, 1, 0.5)
            .reward(1, 1, 0, 0.3)
            .noise(RewardNoise::Exact)
            .build()?;
        entries.push((Context::new(format!("c{i}"), vec![i as f64 / 4.0]), w, m));
    }
    let cmdp = Cmdp::finite(layout.clone(), Naming::default_for(&layout), entries, false)?;
    Ok((Arc::new(cmdp), weights))
}

/// Contexts accepted by KCDD at `(1, 0, 0)` follow `D` restricted to the
/// good contexts of that state.
pub fn importance_sampling(samples: usize, seed: u64) -> Result<Check> {
    let beta = 0.2;
    let (cmdp, weights) = planted_instance()?;
    let layout = cmdp.layout().clone();
    let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: true });
    let classes: Vec<Vec<Vec<FunctionClass>>> = (0..layout.horizon())
        .map(|h| vec![vec![class.clone(); layout.n_actions()]; layout.layer_size(h)])
        .collect();
    let mut cfg = CdConfig::new(0.25, 0.1, Loss::L2);
    cfg.beta = Param::Value(beta);
    cfg.gamma = Param::Value(0.05);
    cfg.eps1 = Param::Value(0.05);
    cfg.constant_scale = samples as f64 / 12_000.0;
    cfg.keep_samples = true;
    let known = KnownDynamics::new(cmdp.clone());
    let mut session = EnvSession::new(cmdp.clone());
    let model = explore_kcdd(&mut session, &known, &classes, &cfg, &mut rng_from_seed(seed))?;
    let data = model
        .pair_samples
        .as_ref()
        .and_then(|m| m.get(&(1, 0, 0)))
        .ok_or_else(|| LabError::InvalidParameter("no samples kept for (1, 0, 0)".into()))?;
    let (contexts, _) = cmdp.finite_contexts().ok_or(LabError::InfiniteContextSpace)?;
    let mut good = Vec::new();
    for c in contexts {
        good.push(is_member(ffp(known.of(c)?.as_ref(), 1, 0)?.prob, beta));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for x in data.inputs().iter().take(samples) {
        *counts.entry(x.context.id.clone()).or_default() += 1;
    }
    let taken = data.len().min(samples);
    let outside: u64 = contexts
        .iter()
        .zip(&good)
        .filter(|(_, g)| !**g)
        .map(|(c, _)| counts.get(&c.id).copied().unwrap_or(0))
        .sum();
    let (observed, probs): (Vec<u64>, Vec<f64>) = contexts
        .iter()
        .zip(&weights)
        .zip(&good)
        .filter(|(_, g)| **g)
        .map(|((c, &w), _)| (counts.get(&c.id).copied().unwrap_or(0), w))
        .unzip();
    let fit = chi_square_gof(&observed, &probs)?;
    Ok(Check::new(
        "importance_sampling",
        taken >= samples && outside == 0 && fit.p_value > 0.01,
        format!(
            "{taken} accepted contexts {observed:?}, {outside} outside the good set, chi-square {:.3} (dof {}), p = {:.4}",
            fit.statistic, fit.dof, fit.p_value
        ),
    ))
}

fn random_kernel(rng: &mut LabRng, layout: &Layout, h: usize, dim: usize) -> Predictor {
    let features = FeatureMap::Block {
        dim,
        bias: true,
        states: layout.layer_size(h),
        actions: layout.n_actions(),
        next_states: Some(layout.layer_size(h + 1)),
    };
    let weights = (0..features.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Predictor::from_hypothesis(Hypothesis::Linear { features, weights })
}

fn unit_vector(rng: &mut LabRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Every row of `P^c` built from random kernels is a probability vector;
/// rows whose predictions vanish go to the sink and are counted.
pub fn acdd_stochasticity(rows: u64, seed: u64) -> Result<Check> {
    let mut rng = rng_from_seed(seed);
    let dim = 2;
    let (mut checked, mut worst, mut degenerate, mut expected) = (0u64, 0.0f64, 0u64, 0u64);
    let mut routed = true;
    let mut round = 0u64;
    while checked < rows {
        let horizon = rng.gen_range(1..=3);
        let sizes = random_sizes(&mut rng, horizon, 4);
        let layout = Layout::new(sizes, rng.gen_range(1..=3))?;
        let kernels: Vec<Predictor> = (0..horizon)
            .map(|h| {
                if round.is_multiple_of(3) && h == horizon - 1 {
                    Predictor::zero()
                } else {
                    random_kernel(&mut rng, &layout, h, dim)
                }
            })
            .collect();
        let good: Vec<Vec<usize>> = (0..horizon)
            .map(|h| layout.states(h).filter(|_| rng.gen_bool(0.7)).collect())
            .collect();
        let prefix = AcddPrefix {
            layout: &layout,
            beta: rng.gen_range(0.0..0.3),
            good: &good,
            kernels: &kernels,
        };
        for q in 0..20 {
            let c = Arc::new(Context::new(format!("q{round}-{q}"), unit_vector(&mut rng, dim)));
            let model = acdd(&prefix, &c)?;
            let d = &model.dynamics;
            let full = d.layout();
            for h in 0..full.horizon() {
                for s in full.states(h) {
                    for a in 0..full.n_actions() {
                        let row = d.row(h, s, a);
                        let sum: f64 = row.iter().sum();
                        worst = worst.max((sum - 1.0).abs());
                        if row.iter().any(|p| *p < 0.0) {
                            worst = f64::INFINITY;
                        }
                        checked += 1;
                    }
                }
            }
            for (k, flags) in model.member.iter().enumerate() {
                let sink = full.sink(k + 1).expect("sink layout");
                for (s, _) in flags.iter().enumerate().filter(|(_, m)| **m) {
                    for a in 0..layout.n_actions() {
                        let total: f64 = layout
                            .states(k + 1)
                            .map(|n| kernels[k].eval(&Input::transition(c.clone(), s, a, n)))
                            .sum();
                        if total.is_nan() || total <= 0.0 {
                            expected += 1;
                            routed &= d.row(k, s, a)[sink] == 1.0;
                        }
                    }
                }
            }
            degenerate += model.degenerate;
        }
        round += 1;
    }
    Ok(Check::new(
        "acdd_stochasticity",
        worst <= 1e-9 && routed && degenerate == expected && degenerate > 0,
        format!("{checked} rows, max |sum - 1| = {worst:.3e}, {degenerate} degenerate rows routed to the sink ({expected} expected)"),
    ))
}

/// A small KCFD experiment, run twice.
pub fn determinism(seed: u64) -> Result<Check> {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "algorithm": "kcfd",
            "env": {"seed": 0, "layer_sizes": [1, 2, 2], "n_actions": 2, "n_contexts": 4,
                    "context_dim": 2, "reward_family": {"kind": "linear_clipped"},
                    "dynamics_family": "context_free_random", "reachability_floor": 0.3,
                    "known_dynamics": true},
            "learner": {"eps": 0.3, "delta": 0.1, "loss": "l1", "b": 0.5, "constant_scale": 0.01},
            "n_seeds": 4
        }"#,
    )?;
    cfg.master_seed = seed;
    let first = run(&cfg)?.without_timing().to_json()?;
    cfg.workers = Some(1);
    let second = run(&cfg)?;
    let second = second.without_timing();
    let mut second_cfg = second.clone();
    second_cfg.config.workers = None;
    let identical = first == second_cfg.to_json()?;
    Ok(Check::new(
        "determinism",
        identical,
        format!("{} bytes, identical across reruns and worker counts: {identical}", first.len()),
    ))
}

/// Every suite at its acceptance size.
pub fn run_suites(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        planner_equivalence(200, seed)?,
        occupancy_distance(50, &[0.01, 0.1], seed)?,
        tabular_guarantee(100, 0.1, 0.05, 4, seed)?,
        importance_sampling(5000, seed)?,
        acdd_stochasticity(10_000, seed)?,
        determinism(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_respects_the_radius() {
        let mut rng = rng_from_seed(1);
        let m = random_mdp(&mut rng, vec![1, 3, 3], 2, false).unwrap();
        let p = perturb(m.dynamics(), 0.05, &mut rng);
        p.validate().unwrap();
        let d = m.dynamics().max_row_distance(&p, 2);
        assert!(d <= 0.05 + 1e-12 && d > 0.04, "{d}");
    }

    #[test]
    fn small_suites_pass() {
        assert!(planner_equivalence(20, 3).unwrap().passed);
        assert!(occupancy_distance(10, &[0.1], 3).unwrap().passed);
        assert!(tabular_guarantee(60, 0.2, 0.05, 4, 3).unwrap().passed);
        let acdd = acdd_stochasticity(500, 3).unwrap();
        assert!(acdd.passed, "{}", acdd.detail);
    }

    #[test]
    fn planted_instance_has_one_bad_context() {
        let (cmdp, w) = planted_instance().unwrap();
        let (contexts, probs) = cmdp.finite_contexts().unwrap();
        assert_eq!(probs, &w[..]);
        let reach: Vec<f64> = contexts
            .iter()
            .map(|c| ffp(cmdp.mdp_of(c).unwrap().dynamics(), 1, 0).unwrap().prob)
            .collect();
        assert_eq!(reach.iter().filter(|&&p| p >= 0.2).count(), 3);
    }
}
