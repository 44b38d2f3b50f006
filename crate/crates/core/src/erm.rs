//! Hypothesis classes, the ERM oracle, and the closed-form sample-size
//! budgets the learners draw from.
//!
//! Two class kinds are supported. A finite class is fit by scanning every
//! member. A clipped linear class `f(x) = clip(<w, phi(x)>, 0, 1)` is fit
//! on the linear part: minimum-norm least squares for L2, and iteratively
//! reweighted least squares with an interpolation polish for L1.
//!
//! Block feature maps place the context features in one block per
//! `(s, a)` or `(s, a, s')` cell, so a single per-layer predictor covers
//! every cell while the fit decouples block by block.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::Context;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    L1,
    L2,
}

impl Loss {
    pub fn eval(self, z: f64, y: f64) -> f64 {
        match self {
            Loss::L1 => (z - y).abs(),
            Loss::L2 => (z - y) * (z - y),
        }
    }
}

/// What a dataset's inputs carry beyond the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Context,
    StateAction,
    Transition,
}

impl Arity {
    fn extra(self) -> usize {
        match self {
            Arity::Context => 0,
            Arity::StateAction => 2,
            Arity::Transition => 3,
        }
    }
}

/// An ERM input. Fields beyond the dataset's arity are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub context: Arc<Context>,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

impl Input {
    pub fn context(context: Arc<Context>) -> Self {
        Self {
            context,
            state: 0,
            action: 0,
            next_state: 0,
        }
    }

    pub fn pair(context: Arc<Context>, state: usize, action: usize) -> Self {
        Self {
            context,
            state,
            action,
            next_state: 0,
        }
    }

    pub fn transition(context: Arc<Context>, state: usize, action: usize, next_state: usize) -> Self {
        Self {
            context,
            state,
            action,
            next_state,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    arity: Arity,
    inputs: Vec<Input>,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(arity: Arity) -> Self {
        Self {
            arity,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Input, y: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&y) {
            return Err(LabError::InvalidParameter(format!("label {y} outside [0, 1]")));
        }
        self.inputs.push(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Input, f64)> {
        self.inputs.iter().zip(self.labels.iter().copied())
    }

    /// Writes one JSON object per line: `{"x":[vector.., s, a, s'],"y":..,"context":id}`.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (x, y) in self.iter() {
            let mut v = x.context.vector.clone();
            let tail = [x.state, x.action, x.next_state];
            v.extend(tail[..self.arity.extra()].iter().map(|&k| k as f64));
            let line = serde_json::json!({ "x": v, "y": y, "context": x.context.id });
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the format written by [`LabeledDataset::dump_jsonl`]. Records
    /// without a `context` id get one derived from their line number;
    /// records sharing an id share one context.
    pub fn load_jsonl<R: BufRead>(input: R, arity: Arity, context_dim: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            x: Vec<f64>,
            y: f64,
            context: Option<String>,
        }
        let mut data = LabeledDataset::new(arity);
        let mut seen: BTreeMap<String, Arc<Context>> = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            if rec.x.len() != context_dim + arity.extra() {
                return Err(LabError::LengthMismatch {
                    left: rec.x.len(),
                    right: context_dim + arity.extra(),
                });
            }
            let id = rec.context.unwrap_or_else(|| format!("line{i}"));
            let vector = rec.x[..context_dim].to_vec();
            let ctx = seen
                .entry(id.clone())
                .or_insert_with(|| Arc::new(Context::new(id, vector)))
                .clone();
            let tail: Vec<usize> = rec.x[context_dim..].iter().map(|v| *v as usize).collect();
            let x = match arity {
                Arity::Context => Input::context(ctx),
                Arity::StateAction => Input::pair(ctx, tail[0], tail[1]),
                Arity::Transition => Input::transition(ctx, tail[0], tail[1], tail[2]),
            };
            data.push(x, rec.y)?;
        }
        Ok(data)
    }
}

/// Feature map `phi` of a clipped linear class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// The context vector, optionally followed by a constant 1.
    Context { dim: usize, bias: bool },
    /// Context features placed in the block of cell `(s, a)` or
    /// `(s, a, s')`; every other block is zero.
    Block {
        dim: usize,
        bias: bool,
        states: usize,
        actions: usize,
        next_states: Option<usize>,
    },
}

impl FeatureMap {
    fn block_width(&self) -> usize {
        match *self {
            FeatureMap::Context { dim, bias } | FeatureMap::Block { dim, bias, .. } => dim + usize::from(bias),
        }
    }

    fn n_blocks(&self) -> usize {
        match *self {
            FeatureMap::Context { .. } => 1,
            FeatureMap::Block {
                states,
                actions,
                next_states,
                ..
            } => states * actions * next_states.unwrap_or(1),
        }
    }

    /// Number of weights.
    pub fn len(&self) -> usize {
        self.block_width() * self.n_blocks()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn block_of(&self, x: &Input) -> Option<usize> {
        match *self {
            FeatureMap::Context { .. } => Some(0),
            FeatureMap::Block {
                states,
                actions,
                next_states,
                ..
            } => {
                if x.state >= states || x.action >= actions {
                    return None;
                }
                let cell = x.state * actions + x.action;
                match next_states {
                    None => Some(cell),
                    Some(n) if x.next_state < n => Some(cell * n + x.next_state),
                    Some(_) => None,
                }
            }
        }
    }

    fn write_local(&self, c: &Context, buf: &mut [f64]) {
        let (FeatureMap::Context { dim, bias } | FeatureMap::Block { dim, bias, .. }) = *self;
        buf[..dim].copy_from_slice(&c.vector[..dim]);
        if bias {
            buf[dim] = 1.0;
        }
    }

    fn dot(&self, weights: &[f64], x: &Input) -> Option<f64> {
        let b = self.block_of(x)?;
        let width = self.block_width();
        let w = &weights[b * width..(b + 1) * width];
        let v = &x.context.vector;
        let mut z: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
        if width > v.len() {
            z += w[width - 1];
        }
        Some(z)
    }
}

/// A member of a function class; serializes as `{"class":..,"params":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", content = "params", rename_all = "snake_case")]
pub enum Hypothesis {
    Constant(f64),
    Linear { features: FeatureMap, weights: Vec<f64> },
    /// A lookup table over a finite context set; unknown contexts map to 0.
    Table { ids: Vec<String>, values: Vec<f64> },
}

impl Hypothesis {
    pub fn zero() -> Self {
        Hypothesis::Constant(0.0)
    }

    pub fn eval(&self, x: &Input) -> f64 {
        match self {
            Hypothesis::Constant(v) => *v,
            Hypothesis::Linear { features, weights } => {
                features.dot(weights, x).map_or(0.0, |z| z.clamp(0.0, 1.0))
            }
            Hypothesis::Table { ids, values } => {
                let c = &x.context;
                let i = match c.index {
                    Some(i) if ids.get(i) == Some(&c.id) => Some(i),
                    _ => ids.iter().position(|id| *id == c.id),
                };
                i.map_or(0.0, |i| values[i])
            }
        }
    }

    fn empirical_loss(&self, data: &LabeledDataset, loss: Loss) -> f64 {
        let total: f64 = data.iter().map(|(x, y)| loss.eval(self.eval(x), y)).sum();
        total / data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Pseudo,
    FatShattering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKind {
    Finite { members: Vec<Hypothesis> },
    LinearClipped { features: FeatureMap, norm_bound: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionClass {
    pub kind: ClassKind,
    /// Declared complexity `d`.
    pub dim: f64,
    pub dim_kind: DimKind,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl FunctionClass {
    /// Finite class; `d = max(1, ceil(log2 |F|))`.
    pub fn finite(members: Vec<Hypothesis>) -> Result<Self> {
        if members.is_empty() {
            return Err(LabError::InvalidParameter("finite class has no members".into()));
        }
        let dim = (members.len() as f64).log2().ceil().max(1.0);
        Ok(Self {
            kind: ClassKind::Finite { members },
            dim,
            dim_kind: DimKind::Pseudo,
            alpha1: 0.0,
            alpha2: 0.0,
        })
    }

    /// Clipped linear class; `d` is the number of weights.
    pub fn linear(features: FeatureMap) -> Self {
        let dim = features.len().max(1) as f64;
        Self {
            kind: ClassKind::LinearClipped {
                features,
                norm_bound: None,
            },
            dim,
            dim_kind: DimKind::Pseudo,
            alpha1: 0.0,
            alpha2: 0.0,
        }
    }

    pub fn with_norm_bound(mut self, bound: f64) -> Self {
        if let ClassKind::LinearClipped { norm_bound, .. } = &mut self.kind {
            *norm_bound = Some(bound);
        }
        self
    }

    pub fn with_dim(mut self, dim: f64, kind: DimKind) -> Self {
        self.dim = dim;
        self.dim_kind = kind;
        self
    }

    pub fn with_alpha(mut self, alpha1: f64, alpha2: f64) -> Self {
        self.alpha1 = alpha1;
        self.alpha2 = alpha2;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ClassKind::Finite { .. } => "finite",
            ClassKind::LinearClipped { .. } => "linear_clipped",
        }
    }

    /// Approximation error under `loss`.
    pub fn alpha(&self, loss: Loss) -> f64 {
        match loss {
            Loss::L1 => self.alpha1,
            Loss::L2 => self.alpha2,
        }
    }
}

/// Where a predictor came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub class: String,
    pub n_samples: usize,
    pub loss: Loss,
    pub empirical_loss: f64,
    /// Set when the design was rank deficient and the minimum-norm solution was used.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub hypothesis: Hypothesis,
    pub provenance: Option<Provenance>,
}

impl Predictor {
    /// The zero function, used for unreachable states.
    pub fn zero() -> Self {
        Self {
            hypothesis: Hypothesis::zero(),
            provenance: None,
        }
    }

    pub fn from_hypothesis(hypothesis: Hypothesis) -> Self {
        Self {
            hypothesis,
            provenance: None,
        }
    }

    pub fn eval(&self, x: &Input) -> f64 {
        self.hypothesis.eval(x)
    }

    pub fn empirical_loss(&self, data: &LabeledDataset, loss: Loss) -> f64 {
        self.hypothesis.empirical_loss(data, loss)
    }
}

/// Returns an empirical-loss minimizer over `class`.
pub fn erm_fit(class: &FunctionClass, data: &LabeledDataset, loss: Loss) -> Result<Predictor> {
    if data.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let (hypothesis, warning) = match &class.kind {
        ClassKind::Finite { members } => {
            let mut best = 0;
            let mut best_loss = f64::INFINITY;
            for (i, h) in members.iter().enumerate() {
                let l = h.empirical_loss(data, loss);
                if l < best_loss {
                    best = i;
                    best_loss = l;
                }
            }
            (members[best].clone(), None)
        }
        ClassKind::LinearClipped { features, norm_bound } => fit_linear(features, *norm_bound, data, loss)?,
    };
    let empirical_loss = hypothesis.empirical_loss(data, loss);
    Ok(Predictor {
        hypothesis,
        provenance: Some(Provenance {
            class: class.name().into(),
            n_samples: data.len(),
            loss,
            empirical_loss,
            warning,
        }),
    })
}

fn fit_linear(
    features: &FeatureMap,
    norm_bound: Option<f64>,
    data: &LabeledDataset,
    loss: Loss,
) -> Result<(Hypothesis, Option<String>)> {
    let width = features.block_width();
    let dim = match *features {
        FeatureMap::Context { dim, .. } | FeatureMap::Block { dim, .. } => dim,
    };
    // Group rows by block; inputs outside every block carry no information.
    let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); features.n_blocks()];
    let mut buf = vec![0.0; width];
    for (x, y) in data.iter() {
        if x.context.dim() != dim {
            return Err(LabError::LengthMismatch {
                left: x.context.dim(),
                right: dim,
            });
        }
        if let Some(b) = features.block_of(x) {
            features.write_local(&x.context, &mut buf);
            blocks[b].0.extend_from_slice(&buf);
            blocks[b].1.push(y);
        }
    }
    let mut weights = vec![0.0; features.len()];
    let mut deficient = false;
    for (b, (rows, ys)) in blocks.iter().enumerate() {
        if ys.is_empty() {
            continue;
        }
        let x = DMatrix::from_row_slice(ys.len(), width, rows);
        let y = DVector::from_column_slice(ys);
        let (mut w, rank_ok) = least_squares(&x, &y, None);
        if loss == Loss::L1 {
            w = least_absolute(&x, &y, w);
        }
        if let Some(bound) = norm_bound {
            if w.norm() > bound {
                w = match loss {
                    Loss::L2 => bounded_least_squares(&x, &y, bound),
                    Loss::L1 => {
                        let n = w.norm();
                        w * (bound / n)
                    }
                };
            }
        }
        deficient |= !rank_ok;
        weights[b * width..(b + 1) * width].copy_from_slice(w.as_slice());
    }
    let warning = deficient.then(|| "rank-deficient design; minimum-norm solution used".to_string());
    Ok((
        Hypothesis::Linear {
            features: features.clone(),
            weights,
        },
        warning,
    ))
}

/// Minimum-norm (weighted) least squares through the normal equations and
/// an eigenvalue pseudo-inverse. The flag is false when the design is rank deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&DVector<f64>>) -> (DVector<f64>, bool) {
    let (gram, rhs) = match weights {
        None => (x.transpose() * x, x.transpose() * y),
        Some(u) => {
            let xu = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * u[i]);
            (xu.transpose() * x, xu.transpose() * y)
        }
    };
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = top * 1e-12;
    let mut full_rank = true;
    let proj = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > cutoff && l > 0.0 {
            proj[i] / l
        } else {
            full_rank = false;
            0.0
        }
    });
    (&eig.eigenvectors * scaled, full_rank)
}

/// Least squares restricted to `||w|| <= bound` (the ridge path solution
/// whose norm equals the bound, found by bisection on the penalty).
fn bounded_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, bound: f64) -> DVector<f64> {
    let eig = SymmetricEigen::new(x.transpose() * x);
    let proj = eig.eigenvectors.transpose() * (x.transpose() * y);
    let solve = |lambda: f64| {
        let scaled = DVector::from_fn(proj.len(), |i, _| {
            let l = eig.eigenvalues[i].max(0.0) + lambda;
            if l > 0.0 {
                proj[i] / l
            } else {
                0.0
            }
        });
        &eig.eigenvectors * scaled
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while solve(hi).norm() > bound {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if solve(mid).norm() > bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    solve(hi)
}

fn l1_objective(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (y - x * w).iter().map(|r| r.abs()).sum()
}

/// Least absolute deviations by IRLS from a warm start, finished by
/// interpolating the rows with the smallest residuals (an L1 optimum
/// interpolates a full-rank subset of rows).
fn least_absolute(x: &DMatrix<f64>, y: &DVector<f64>, start: DVector<f64>) -> DVector<f64> {
    const FLOOR: f64 = 1e-10;
    let mut best = start.clone();
    let mut best_obj = l1_objective(x, y, &best);
    let mut w = start;
    let mut prev = best_obj;
    for _ in 0..200 {
        let r = y - x * &w;
        let u = DVector::from_fn(r.len(), |i, _| 1.0 / r[i].abs().max(FLOOR));
        w = least_squares(x, y, Some(&u)).0;
        let obj = l1_objective(x, y, &w);
        if obj < best_obj {
            best_obj = obj;
            best = w.clone();
        }
        if (prev - obj).abs() <= 1e-14 * prev.max(1.0) {
            break;
        }
        prev = obj;
    }
    let k = x.ncols();
    if x.nrows() >= k {
        let r = y - x * &best;
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()));
        let sub_x = DMatrix::from_fn(k, k, |i, j| x[(order[i], j)]);
        let sub_y = DVector::from_fn(k, |i, _| y[order[i]]);
        let (cand, full) = least_squares(&sub_x, &sub_y, None);
        if full && l1_objective(x, y, &cand) < best_obj {
            best = cand;
        }
    }
    best
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(LabError::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Ceiling that ignores floating noise just above an integer.
pub(crate) fn ceil_count(x: f64) -> Result<u64> {
    if !x.is_finite() || x < 0.0 {
        return Err(LabError::InvalidParameter(format!("budget {x} is not a finite count")));
    }
    if x >= u64::MAX as f64 {
        return Err(LabError::TooLarge { count: x });
    }
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    Ok(c as u64)
}

/// Uniform-convergence sample size for a reward class:
/// `ceil(scale * (d * ln(1/eps) + ln(1/delta)) / eps^2)`, with `ln^2(1/eps)`
/// for fat-shattering classes. L2 callers pass the squared accuracy.
pub fn n_rewards(class: &FunctionClass, eps: f64, delta: f64, scale: f64) -> Result<u64> {
    check_unit("accuracy", eps)?;
    check_unit("delta", delta)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(LabError::InvalidParameter(format!("constant_scale must be positive, got {scale}")));
    }
    if class.dim < 1.0 {
        return Err(LabError::InvalidParameter(format!("class dimension {} < 1", class.dim)));
    }
    let log_eps = (1.0 / eps).ln();
    let complexity = match class.dim_kind {
        DimKind::Pseudo => class.dim * log_eps,
        DimKind::FatShattering => class.dim * log_eps * log_eps,
    };
    ceil_count(scale * (complexity + (1.0 / delta).ln()) / (eps * eps))
}

/// Samples per row so the empirical next-state distribution is `gamma`-close
/// in L1: `ceil((2 / gamma^2) (ln(1/delta) + (S_next + 1) ln 2))`.
pub fn n_dynamics_tabular(gamma: f64, delta: f64, s_next: usize) -> Result<u64> {
    check_unit("gamma", gamma)?;
    check_unit("delta", delta)?;
    ceil_count(2.0 / (gamma * gamma) * ((1.0 / delta).ln() + (s_next as f64 + 1.0) * std::f64::consts::LN_2))
}

/// Episodes so a state visited with probability `p` is seen `m` times:
/// `ceil((2 / p) (ln(1/delta) + m))`.
pub fn episodes_for_visits(p: f64, delta: f64, m: u64) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(LabError::InvalidParameter(format!("visit probability must lie in (0, 1], got {p}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(LabError::InvalidParameter(format!("delta must lie in (0, 1], got {delta}")));
    }
    if m == 0 {
        return Err(LabError::InvalidParameter("required visits must be at least 1".into()));
    }
    ceil_count(2.0 / p * ((1.0 / delta).ln() + m as f64))
}

/// Surrogate fat-shattering dimension `ceil(1 / gamma^2)` of linear
/// functions over unit-norm features.
pub fn fat_shattering_linear(gamma: f64) -> Result<f64> {
    check_unit("gamma", gamma)?;
    Ok((1.0 / (gamma * gamma)).ceil())
}

/// `E_x[loss(f(x), truth(x))]` over a finite weighted support.
pub fn generalization_error<T>(f: &Predictor, truth: T, dist: &[(Input, f64)], loss: Loss) -> f64
where
    T: Fn(&Input) -> f64,
{
    dist.iter().map(|(x, w)| w * loss.eval(f.eval(x), truth(x))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::mdp::rng_from_seed;

    fn ctx(id: &str, v: &[f64]) -> Arc<Context> {
        Arc::new(Context::new(id, v.to_vec()))
    }

    fn scalar_data(points: &[(f64, f64)]) -> LabeledDataset {
        let mut d = LabeledDataset::new(Arity::Context);
        for (i, (x, y)) in points.iter().enumerate() {
            d.push(Input::context(ctx(&format!("p{i}"), &[*x])), *y).unwrap();
        }
        d
    }

    #[test]
    fn exact_interpolation_with_bias() {
        let data = scalar_data(&[(1.0, 0.2), (2.0, 0.4)]);
        let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: true });
        let f = erm_fit(&class, &data, Loss::L2).unwrap();
        let Hypothesis::Linear { weights, .. } = &f.hypothesis else {
            panic!("linear class returns a linear hypothesis");
        };
        assert!((weights[0] - 0.2).abs() < 1e-12 && weights[1].abs() < 1e-12);
        assert!(f.empirical_loss(&data, Loss::L2) < 1e-20);
    }

    #[test]
    fn finite_class_realizable_fit() {
        let ids: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let truth = Hypothesis::Table {
            ids: ids.clone(),
            values: vec![0.1, 0.5, 0.9],
        };
        let other = Hypothesis::Constant(0.5);
        let class = FunctionClass::finite(vec![other, truth.clone()]).unwrap();
        let mut data = LabeledDataset::new(Arity::Context);
        for (i, id) in ids.iter().enumerate() {
            let c = ctx(id, &[i as f64]);
            let y = truth.eval(&Input::context(c.clone()));
            data.push(Input::context(c), y).unwrap();
        }
        let f = erm_fit(&class, &data, Loss::L1).unwrap();
        assert_eq!(f.hypothesis, truth);
        assert_eq!(f.provenance.unwrap().empirical_loss, 0.0);
    }

    #[test]
    fn finite_class_matches_explicit_scan() {
        let mut rng = rng_from_seed(7);
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let members: Vec<Hypothesis> = (0..50)
            .map(|_| Hypothesis::Table {
                ids: ids.clone(),
                values: (0..10).map(|_| rng.gen()).collect(),
            })
            .collect();
        let class = FunctionClass::finite(members.clone()).unwrap();
        let mut data = LabeledDataset::new(Arity::Context);
        for _ in 0..200 {
            let i = rng.gen_range(0..10);
            data.push(Input::context(ctx(&ids[i], &[0.0])), rng.gen()).unwrap();
        }
        for loss in [Loss::L1, Loss::L2] {
            let scan = members
                .iter()
                .map(|h| h.empirical_loss(&data, loss))
                .fold(f64::INFINITY, f64::min);
            let f = erm_fit(&class, &data, loss).unwrap();
            assert_eq!(f.empirical_loss(&data, loss), scan);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: true });
        let data = LabeledDataset::new(Arity::Context);
        assert!(matches!(erm_fit(&class, &data, Loss::L2), Err(LabError::EmptyDataset)));
    }

    #[test]
    fn rank_deficiency_is_a_warning() {
        let data = scalar_data(&[(1.0, 0.3), (1.0, 0.5)]);
        let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: true });
        let f = erm_fit(&class, &data, Loss::L2).unwrap();
        let prov = f.provenance.unwrap();
        assert!(prov.warning.is_some());
        assert!((prov.empirical_loss - 0.01).abs() < 1e-12);
    }

    /// An L1 line fit is optimal among lines through two data points.
    #[test]
    fn l1_line_matches_pairwise_enumeration() {
        let mut rng = rng_from_seed(11);
        for _ in 0..20 {
            let points: Vec<(f64, f64)> = (0..15)
                .map(|_| {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let y = (0.5 + 0.3 * x + rng.gen_range(-0.15..0.15_f64)).clamp(0.0, 1.0);
                    (x, y)
                })
                .collect();
            let data = scalar_data(&points);
            let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: true });
            let f = erm_fit(&class, &data, Loss::L1).unwrap();
            let Hypothesis::Linear { weights, .. } = &f.hypothesis else {
                unreachable!()
            };
            let obj = |a: f64, b: f64| points.iter().map(|(x, y)| (y - a * x - b).abs()).sum::<f64>();
            let mut best = f64::INFINITY;
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    let (x1, y1) = points[i];
                    let (x2, y2) = points[j];
                    if (x1 - x2).abs() > 1e-12 {
                        let a = (y2 - y1) / (x2 - x1);
                        best = best.min(obj(a, y1 - a * x1));
                    }
                }
            }
            let got = obj(weights[0], weights[1]);
            assert!(got <= best + 1e-6 * points.len() as f64, "irls {got} vs enumeration {best}");
        }
    }

    #[test]
    fn block_features_fit_cells_independently() {
        let features = FeatureMap::Block {
            dim: 1,
            bias: true,
            states: 2,
            actions: 1,
            next_states: None,
        };
        let class = FunctionClass::linear(features);
        let mut data = LabeledDataset::new(Arity::StateAction);
        for k in 0..4 {
            let x = k as f64 / 4.0;
            let c = ctx(&format!("c{k}"), &[x]);
            data.push(Input::pair(c.clone(), 0, 0), 0.5 * x).unwrap();
            data.push(Input::pair(c, 1, 0), 1.0 - 0.5 * x).unwrap();
        }
        let f = erm_fit(&class, &data, Loss::L2).unwrap();
        assert!(f.empirical_loss(&data, Loss::L2) < 1e-20);
        assert_eq!(f.eval(&Input::pair(ctx("q", &[0.0]), 5, 0)), 0.0);
    }

    #[test]
    fn norm_bound_is_respected() {
        let data = scalar_data(&[(0.1, 0.0), (0.2, 1.0)]);
        let class = FunctionClass::linear(FeatureMap::Context { dim: 1, bias: false }).with_norm_bound(2.0);
        let f = erm_fit(&class, &data, Loss::L2).unwrap();
        let Hypothesis::Linear { weights, .. } = &f.hypothesis else {
            unreachable!()
        };
        assert!((weights[0].abs() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn reward_budget_example() {
        let class = FunctionClass::finite(vec![Hypothesis::zero()]).unwrap();
        assert_eq!(class.dim, 1.0);
        assert_eq!(n_rewards(&class, 0.5, 0.5, 1.0).unwrap(), 6);
        let small = n_rewards(&class, 0.25, 0.5, 1.0).unwrap();
        assert!(small >= 4 * 6);
        assert_eq!(n_rewards(&class, 0.5, 0.5, 100.0).unwrap(), 555);
        assert!(n_rewards(&class, 1.5, 0.5, 1.0).is_err());
        assert!(n_rewards(&class, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn fat_shattering_form_uses_squared_log() {
        let class = FunctionClass::finite(vec![Hypothesis::zero()])
            .unwrap()
            .with_dim(2.0, DimKind::FatShattering);
        let l = 10.0_f64.ln();
        let expected = (100.0 * (2.0 * l * l + 2.0_f64.ln())).ceil() as u64;
        assert_eq!(n_rewards(&class, 0.1, 0.5, 1.0).unwrap(), expected);
        assert_eq!(fat_shattering_linear(0.1).unwrap(), 100.0);
    }

    #[test]
    fn tabular_budget_example() {
        assert_eq!(n_dynamics_tabular(0.1, 0.01, 4).unwrap(), 1615);
        let a = n_dynamics_tabular(0.1, 0.01, 4).unwrap() as f64;
        let b = n_dynamics_tabular(0.2, 0.01, 4).unwrap() as f64;
        assert!((a / 4.0 - b).abs() <= 1.0);
        let floor = (200.0 * 5.0 * std::f64::consts::LN_2).ceil() as u64;
        assert!(n_dynamics_tabular(0.1, 1.0 - 1e-12, 4).unwrap() >= floor);
    }

    #[test]
    fn visit_budget_examples() {
        assert_eq!(episodes_for_visits(0.5, 0.1, 100).unwrap(), 410);
        assert_eq!(episodes_for_visits(1.0, 1.0, 5).unwrap(), 10);
        let a = episodes_for_visits(0.5, 0.1, 100).unwrap();
        let b = episodes_for_visits(0.25, 0.1, 100).unwrap();
        assert!(b == 2 * a || b + 1 == 2 * a);
        assert!(episodes_for_visits(0.0, 0.1, 1).is_err());
        assert!(episodes_for_visits(0.5, 0.1, 0).is_err());
    }

    #[test]
    fn generalization_error_examples() {
        let c = ctx("c", &[0.0]);
        let dist = vec![(Input::context(c), 1.0)];
        let half = Predictor::from_hypothesis(Hypothesis::Constant(0.5));
        assert_eq!(generalization_error(&half, |_| 0.0, &dist, Loss::L1), 0.5);
        assert_eq!(generalization_error(&half, |_| 0.5, &dist, Loss::L2), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut data = LabeledDataset::new(Arity::Transition);
        let c = ctx("alpha", &[0.25, -0.5]);
        data.push(Input::transition(c.clone(), 1, 0, 2), 1.0).unwrap();
        data.push(Input::transition(c, 1, 0, 0), 0.0).unwrap();
        let mut buf = Vec::new();
        data.dump_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"context":"alpha","x":[0.25,-0.5,1.0,0.0,2.0],"y":1.0}"#));
        let back = LabeledDataset::load_jsonl(&buf[..], Arity::Transition, 2).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn hypothesis_serializes_with_class_tag() {
        let h = Hypothesis::Constant(0.25);
        assert_eq!(serde_json::to_string(&h).unwrap(), r#"{"class":"constant","params":0.25}"#);
    }
}
