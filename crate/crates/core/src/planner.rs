//! Exact planning by backward induction, plus the reachability planners
//! built on it: `ffp` (the policy maximizing the probability of visiting one
//! target state) and `pap` (ffp for every decision-layer state).

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::{Dynamics, LayeredMdp, Policy};

/// Ties within this margin resolve to the lowest action index.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub policy: Policy,
    /// `V*(s_0)`.
    pub value: f64,
    /// `values[h][s] = V*_h(s)`; `values[H]` is all zeros.
    pub values: Vec<Vec<f64>>,
}

/// Backward induction over layers `0..h_end`, starting from `terminal`
/// values at layer `h_end`. Layers from `h_end` on get action 0.
fn backward<R>(dynamics: &Dynamics, h_end: usize, terminal: Vec<f64>, reward: R) -> PlanResult
where
    R: Fn(usize, usize, usize) -> f64,
{
    let layout = dynamics.layout();
    let horizon = layout.horizon();
    let n_actions = layout.n_actions();
    let mut actions: Vec<Vec<usize>> = (0..horizon).map(|h| vec![0; layout.layer_size(h)]).collect();
    let mut values: Vec<Vec<f64>> = (0..=horizon).map(|h| vec![0.0; layout.layer_size(h)]).collect();
    values[h_end] = terminal;
    for h in (0..h_end).rev() {
        let (head, tail) = values.split_at_mut(h + 1);
        let next = &tail[0];
        for s in 0..layout.layer_size(h) {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..n_actions {
                let cont: f64 = dynamics.row(h, s, a).iter().zip(next).map(|(p, v)| p * v).sum();
                let q = reward(h, s, a) + cont;
                if q > best + TIE_TOL {
                    best = q;
                    best_a = a;
                }
            }
            head[h][s] = best;
            actions[h][s] = best_a;
        }
    }
    PlanResult {
        policy: Policy::Deterministic(actions),
        value: values[0][0],
        values,
    }
}

/// Optimal deterministic policy of `m`; ties go to the lowest action index.
pub fn plan(m: &LayeredMdp) -> PlanResult {
    let layout = m.layout();
    let horizon = layout.horizon();
    backward(m.dynamics(), horizon, vec![0.0; layout.layer_size(horizon)], |h, s, a| {
        m.reward(h, s, a)
    })
}

/// Plans with rewards supplied by a closure instead of a reward table.
pub fn plan_with<R>(dynamics: &Dynamics, reward: R) -> PlanResult
where
    R: Fn(usize, usize, usize) -> f64,
{
    let layout = dynamics.layout();
    let horizon = layout.horizon();
    backward(dynamics, horizon, vec![0.0; layout.layer_size(horizon)], reward)
}

/// A maximum-reachability policy for one state and the probability it achieves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reach {
    pub policy: Policy,
    pub prob: f64,
}

/// `max_pi q_h(target | pi, P)` and a maximizing policy.
///
/// Equivalent to planning with reward 1 at the target and 0 elsewhere; the
/// indicator is placed on the terminal values of a truncated backward pass,
/// which also covers targets in the last layer.
pub fn ffp(dynamics: &Dynamics, h: usize, target: usize) -> Result<Reach> {
    let layout = dynamics.layout();
    if h > layout.horizon() || target >= layout.layer_size(h) {
        return Err(LabError::UnknownState { h, s: target });
    }
    let mut terminal = vec![0.0; layout.layer_size(h)];
    terminal[target] = 1.0;
    let result = backward(dynamics, h, terminal, |_, _, _| 0.0);
    Ok(Reach {
        policy: result.policy,
        prob: result.value.clamp(0.0, 1.0),
    })
}

/// `ffp` for every original state of the decision layers `0..H`:
/// `out[h][s]`.
pub fn pap(dynamics: &Dynamics) -> Vec<Vec<Reach>> {
    let layout = dynamics.layout();
    (0..layout.horizon())
        .map(|h| {
            layout
                .states(h)
                .map(|s| ffp(dynamics, h, s).expect("state index comes from the layout"))
                .collect()
        })
        .collect()
}
