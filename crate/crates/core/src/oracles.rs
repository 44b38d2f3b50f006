//! Independent checks used by tests, the acceptance suite and `verify`:
//! exhaustive policy search, exact suboptimality over finite context sets,
//! Wilson intervals and a chi-square goodness-of-fit test.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{LabError, Result};
use crate::mdp::{policy_value, Cmdp, Context, LabRng, LayeredMdp, Policy, PolicyMap};
use crate::planner::plan;

/// Largest number of deterministic policies `brute_force_plan` enumerates.
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Best deterministic policy by exhaustive enumeration. Among equal values
/// the first policy in enumeration order (lowest action indices, last state
/// varying fastest) wins.
pub fn brute_force_plan(m: &LayeredMdp) -> Result<(Policy, f64)> {
    let layout = m.layout();
    let n_actions = layout.n_actions() as u64;
    let cells: Vec<(usize, usize)> = (0..layout.horizon())
        .flat_map(|h| (0..layout.layer_size(h)).map(move |s| (h, s)))
        .collect();
    let mut count: u64 = 1;
    for _ in &cells {
        count = count.saturating_mul(n_actions);
        if count > ENUMERATION_CAP {
            return Err(LabError::TooLarge {
                count: (n_actions as f64).powi(cells.len() as i32),
            });
        }
    }
    let mut digits = vec![0usize; cells.len()];
    let mut policy = Policy::constant(layout, 0);
    let mut best = (policy.clone(), policy_value(m, &policy));
    for _ in 1..count {
        // Mixed-radix increment, last cell fastest.
        for (i, d) in digits.iter_mut().enumerate().rev() {
            let (h, s) = cells[i];
            *d += 1;
            if *d < n_actions as usize {
                policy.set_action(h, s, *d);
                break;
            }
            *d = 0;
            policy.set_action(h, s, 0);
        }
        let v = policy_value(m, &policy);
        if v > best.1 + 1e-12 {
            best = (policy.clone(), v);
        }
    }
    Ok(best)
}

/// `sum_c D(c) (V*_c - V^{pi(c)}_c)` with `pi` given per context.
pub fn suboptimality_by<F>(cmdp: &Cmdp, mut policy_of: F) -> Result<f64>
where
    F: FnMut(&Arc<Context>) -> Result<Policy>,
{
    let (contexts, probs) = cmdp.finite_contexts().ok_or(LabError::InfiniteContextSpace)?;
    let mut total = 0.0;
    for (c, &w) in contexts.iter().zip(probs) {
        let m = cmdp.mdp_of(c)?;
        let pi = policy_of(c)?;
        pi.validate(m.layout())?;
        total += w * (plan(&m).value - policy_value(&m, &pi));
    }
    Ok(total)
}

/// Exact expected suboptimality of a learned context-to-policy map.
pub fn exact_suboptimality(cmdp: &Cmdp, learned: &PolicyMap) -> Result<f64> {
    suboptimality_by(cmdp, |c| {
        learned
            .get(c)
            .cloned()
            .ok_or_else(|| LabError::UnknownContext(c.id.clone()))
    })
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: u64,
}

/// Suboptimality averaged over `n` fresh context draws, for context spaces
/// too large (or infinite) for the exact sum.
pub fn monte_carlo_suboptimality<F>(cmdp: &Cmdp, n: u64, mut policy_of: F, rng: &mut LabRng) -> Result<Estimate>
where
    F: FnMut(&Arc<Context>) -> Result<Policy>,
{
    if n < 2 {
        return Err(LabError::InvalidParameter("need at least 2 evaluation contexts".into()));
    }
    let mut gaps = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let c = cmdp.sample_context(rng);
        let m = cmdp.mdp_of(&c)?;
        let pi = policy_of(&c)?;
        gaps.push(plan(&m).value - policy_value(&m, &pi));
    }
    let mean = gaps.iter().sum::<f64>() / n as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Estimate {
        mean,
        std_error: (var / n as f64).sqrt(),
        n,
    })
}

/// A success frequency with its 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

const Z95: f64 = 1.959_963_984_540_054;

impl Frequency {
    pub fn wilson(successes: u64, trials: u64) -> Self {
        if trials == 0 {
            return Self {
                successes,
                trials,
                rate: 0.0,
                lower: 0.0,
                upper: 1.0,
            };
        }
        let n = trials as f64;
        let p = successes as f64 / n;
        let z2 = Z95 * Z95;
        let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
        let half = Z95 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
        Self {
            successes,
            trials,
            rate: p,
            lower: (centre - half).max(0.0),
            upper: (centre + half).min(1.0),
        }
    }
}

/// Evaluates `event(seed)` for seeds `0..n_seeds`.
pub fn empirical_event_frequency<F>(n_seeds: u64, mut event: F) -> Result<Frequency>
where
    F: FnMut(u64) -> bool,
{
    if n_seeds < 20 {
        return Err(LabError::InvalidParameter(format!("need at least 20 seeds, got {n_seeds}")));
    }
    let successes = (0..n_seeds).filter(|&seed| event(seed)).count() as u64;
    Ok(Frequency::wilson(successes, n_seeds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of `observed` counts against `probs`.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if observed.len() != probs.len() {
        return Err(LabError::LengthMismatch {
            left: observed.len(),
            right: probs.len(),
        });
    }
    if observed.len() < 2 || probs.iter().any(|p| p.is_nan() || *p <= 0.0) {
        return Err(LabError::InvalidParameter(
            "need two or more categories with positive probability".into(),
        ));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(LabError::EmptyDataset);
    }
    let mass: f64 = probs.iter().sum();
    let statistic: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = n as f64 * p / mass;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = observed.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| LabError::InvalidParameter(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}
