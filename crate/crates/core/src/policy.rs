//! Policy representations, training, pointwise aggregation, and evaluation.
//!
//! Policies map encoded states (vectors) to action distributions. Knowledge
//! sharing averages policies *pointwise* — `π(a|v) = (1/N) Σ πᵢ(a|v)` — which
//! is exact by construction, and a distillation step snaps the average back
//! to a parametric form on the anchor set. Each continuous representation
//! carries an analytic Lipschitz constant (total-variation output metric,
//! Euclidean input metric) used by the perturbation-bound checker.

use crate::env::{value_iteration, Action, Anchors, Cell, GridMdp, StateEncoding};
use crate::linalg::{self, Projector};
use crate::seed;
use rand::Rng as _;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

/// Number of actions every policy emits probabilities for.
pub const ACTIONS: usize = Action::COUNT;

/// Default smoothing temperature as a fraction of the encoding's minimum
/// anchor separation. Small enough that cross-anchor leakage is far below
/// the distillation tolerance, large enough to keep weights finite.
pub const DEFAULT_TAU_FRACTION: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    /// Training produced non-finite or unbounded parameters.
    #[error("training diverged: {0}")]
    DivergedTraining(String),
    /// Policies cannot be averaged (mixed families or unequal anchors).
    #[error("aggregation mismatch: {0}")]
    AggregationMismatch(String),
    /// Target anchor set does not cover the states the policy distinguishes.
    #[error("incomplete anchors: {0}")]
    IncompleteAnchors(String),
    /// The representation has no finite Lipschitz constant.
    #[error("not Lipschitz: {0}")]
    NotLipschitz(String),
    /// Policy file is malformed; 1-based line number.
    #[error("policy parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    /// Argument violates a documented precondition.
    #[error("invalid policy operation: {0}")]
    Invalid(String),
}

/// A state-conditional action distribution over encoded states.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Piecewise-constant: the row of the nearest anchor. Not Lipschitz.
    Tabular {
        anchors: Arc<Anchors>,
        rows: Vec<[f64; ACTIONS]>,
    },
    /// Distance-softmax blend of anchor rows with temperature `tau`;
    /// Lipschitz with constant `2/tau`.
    SmoothedTabular {
        anchors: Arc<Anchors>,
        rows: Vec<[f64; ACTIONS]>,
        tau: f64,
    },
    /// Softmax of a linear score `θ v`; Lipschitz with constant
    /// `max_{i,j} ‖θᵢ − θⱼ‖₂`.
    LinearSoftmax { theta: Vec<Vec<f64>> },
    /// Equal-weight pointwise average of the components.
    Mixture { components: Vec<Policy> },
    /// Convex blend `(1−g)·base + g·bad` with a radial gate
    /// `g(v) = exp(−(max(0, threshold − ‖P v‖))² / bandwidth²)`:
    /// fully `bad` once the detector energy `‖P v‖` reaches `threshold`,
    /// exponentially close to `base` when it is absent.
    GatedBlend {
        base: Box<Policy>,
        bad: Box<Policy>,
        detector: Projector,
        threshold: f64,
        bandwidth: f64,
    },
}

impl Policy {
    pub fn tabular(anchors: Arc<Anchors>, rows: Vec<[f64; ACTIONS]>) -> Policy {
        assert_eq!(anchors.len(), rows.len(), "one row per anchor");
        Policy::Tabular { anchors, rows }
    }

    pub fn smoothed(anchors: Arc<Anchors>, rows: Vec<[f64; ACTIONS]>, tau: f64) -> Policy {
        assert_eq!(anchors.len(), rows.len(), "one row per anchor");
        assert!(tau > 0.0, "temperature must be positive");
        Policy::SmoothedTabular { anchors, rows, tau }
    }

    pub fn linear(theta: Vec<Vec<f64>>) -> Policy {
        assert_eq!(theta.len(), ACTIONS, "one score row per action");
        let dim = theta[0].len();
        assert!(theta.iter().all(|r| r.len() == dim));
        Policy::LinearSoftmax { theta }
    }

    pub fn mixture(components: Vec<Policy>) -> Policy {
        assert!(!components.is_empty(), "mixture needs components");
        Policy::Mixture { components }
    }

    pub fn gated_blend(
        base: Policy,
        bad: Policy,
        detector: Projector,
        threshold: f64,
        bandwidth: f64,
    ) -> Policy {
        assert!(threshold > 0.0 && bandwidth > 0.0);
        Policy::GatedBlend {
            base: Box::new(base),
            bad: Box::new(bad),
            detector,
            threshold,
            bandwidth,
        }
    }

    /// Uniform tabular policy (the round-zero initialization).
    pub fn uniform_tabular(anchors: Arc<Anchors>) -> Policy {
        let n = anchors.len();
        Policy::tabular(anchors, vec![[1.0 / ACTIONS as f64; ACTIONS]; n])
    }

    /// Uniform smoothed-tabular policy.
    pub fn uniform_smoothed(anchors: Arc<Anchors>, tau: f64) -> Policy {
        let n = anchors.len();
        Policy::smoothed(anchors, vec![[1.0 / ACTIONS as f64; ACTIONS]; n], tau)
    }

    /// Zero-parameter linear policy (uniform everywhere).
    pub fn zero_linear(dim: usize) -> Policy {
        Policy::linear(vec![vec![0.0; dim]; ACTIONS])
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Tabular { .. } => "tabular",
            Policy::SmoothedTabular { .. } => "smoothed-tabular",
            Policy::LinearSoftmax { .. } => "linear-softmax",
            Policy::Mixture { .. } => "mixture",
            Policy::GatedBlend { .. } => "gated-blend",
        }
    }

    /// Action distribution at encoded state `v`.
    pub fn act(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Policy::Tabular { anchors, rows } => rows[anchors.nearest(v)].to_vec(),
            Policy::SmoothedTabular { anchors, rows, tau } => {
                let n = anchors.len();
                let mut dists = Vec::with_capacity(n);
                let mut min_d = f64::INFINITY;
                for i in 0..n {
                    let d = linalg::norm2(&linalg::sub(v, anchors.point(i)));
                    min_d = min_d.min(d);
                    dists.push(d);
                }
                let mut weights = Vec::with_capacity(n);
                let mut total = 0.0;
                for d in &dists {
                    let w = (-(d - min_d) / tau).exp();
                    total += w;
                    weights.push(w);
                }
                let mut out = vec![0.0; ACTIONS];
                for (w, row) in weights.iter().zip(rows) {
                    let w = w / total;
                    for (o, r) in out.iter_mut().zip(row) {
                        *o += w * r;
                    }
                }
                out
            }
            Policy::LinearSoftmax { theta } => {
                let mut logits: Vec<f64> =
                    theta.iter().map(|row| linalg::dot(row, v)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                logits.iter().map(|l| l / total).collect()
            }
            Policy::Mixture { components } => {
                let k = components.len() as f64;
                let mut out = vec![0.0; ACTIONS];
                for c in components {
                    let p = c.act(v);
                    for (o, x) in out.iter_mut().zip(&p) {
                        *o += x / k;
                    }
                }
                out
            }
            Policy::GatedBlend { base, bad, .. } => {
                let g = self.gate(v);
                let pb = base.act(v);
                let pd = bad.act(v);
                pb.iter()
                    .zip(&pd)
                    .map(|(b, d)| (1.0 - g) * b + g * d)
                    .collect()
            }
        }
    }

    /// Gate value of a [`Policy::GatedBlend`]; 0 for other variants.
    pub fn gate(&self, v: &[f64]) -> f64 {
        match self {
            Policy::GatedBlend { detector, threshold, bandwidth, .. } => {
                let energy = linalg::norm2(&detector.apply(v));
                let gap = (threshold - energy).max(0.0);
                (-(gap * gap) / (bandwidth * bandwidth)).exp()
            }
            _ => 0.0,
        }
    }

    /// The anchor set of an anchor-based representation.
    pub fn anchors(&self) -> Option<&Arc<Anchors>> {
        match self {
            Policy::Tabular { anchors, .. } | Policy::SmoothedTabular { anchors, .. } => {
                Some(anchors)
            }
            _ => None,
        }
    }

    /// All cells referenced by anchor sets anywhere inside this policy.
    fn referenced_cells(&self, out: &mut BTreeSet<Cell>) {
        match self {
            Policy::Tabular { anchors, .. } | Policy::SmoothedTabular { anchors, .. } => {
                out.extend(anchors.cells().iter().copied());
            }
            Policy::LinearSoftmax { .. } => {}
            Policy::Mixture { components } => {
                for c in components {
                    c.referenced_cells(out);
                }
            }
            Policy::GatedBlend { base, bad, .. } => {
                base.referenced_cells(out);
                bad.referenced_cells(out);
            }
        }
    }

    /// One-hot argmax version of a tabular-family policy (ties: first action).
    pub fn sharpened(&self) -> Result<Policy, PolicyError> {
        let sharpen = |rows: &[[f64; ACTIONS]]| -> Vec<[f64; ACTIONS]> {
            rows.iter()
                .map(|row| {
                    let mut best = 0;
                    for a in 1..ACTIONS {
                        if row[a] > row[best] {
                            best = a;
                        }
                    }
                    let mut out = [0.0; ACTIONS];
                    out[best] = 1.0;
                    out
                })
                .collect()
        };
        match self {
            Policy::Tabular { anchors, rows } => {
                Ok(Policy::tabular(Arc::clone(anchors), sharpen(rows)))
            }
            Policy::SmoothedTabular { anchors, rows, tau } => {
                Ok(Policy::smoothed(Arc::clone(anchors), sharpen(rows), *tau))
            }
            other => Err(PolicyError::Invalid(format!(
                "cannot sharpen a {} policy",
                other.kind()
            ))),
        }
    }
}

/// Something that emits action distributions along a trajectory. Plain
/// policies are stateless; trigger-composed policies carry history.
pub trait Actor {
    /// Forget any accumulated history (called at episode start).
    fn reset(&mut self);
    /// Action distribution for the current encoded state.
    fn action_distribution(&mut self, v: &[f64]) -> Vec<f64>;
}

impl Actor for Policy {
    fn reset(&mut self) {}

    fn action_distribution(&mut self, v: &[f64]) -> Vec<f64> {
        self.act(v)
    }
}

/// Draw an index from a distribution (assumed normalized).
pub(crate) fn sample_index<R: rand::Rng>(dist: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.gen();
    for (i, p) in dist.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= *p;
    }
    dist.len() - 1
}

// ---------------------------------------------------------------------------
// training

/// Local-training hyperparameters. `steps` counts environment transitions
/// across all episodes; zero steps returns the input policy unchanged.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Exploration rate; the returned tabular rows are ε-soft at this rate.
    /// Ignored by the policy-gradient path (it explores via its own softmax).
    pub epsilon: f64,
    pub seed: u64,
    pub max_episode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, lr: 0.1, epsilon: 0.1, seed: 0, max_episode_len: 400 }
    }
}

/// Train `policy` on `mdp` and return an improved policy of the same
/// representation. Tabular families run Q-learning; the linear-softmax
/// family runs a score-function policy-gradient loop. Mixtures and gated
/// blends are aggregation artifacts and cannot be trained directly.
pub fn local_train(
    policy: &Policy,
    mdp: &GridMdp,
    enc: &StateEncoding,
    cfg: &TrainConfig,
) -> Result<Policy, PolicyError> {
    if cfg.steps == 0 {
        return Ok(policy.clone());
    }
    match policy {
        Policy::Tabular { anchors, .. } => {
            let rows = q_learning(mdp, anchors, cfg)?;
            Ok(Policy::tabular(Arc::clone(anchors), rows))
        }
        Policy::SmoothedTabular { anchors, tau, .. } => {
            let rows = q_learning(mdp, anchors, cfg)?;
            Ok(Policy::smoothed(Arc::clone(anchors), rows, *tau))
        }
        Policy::LinearSoftmax { theta } => reinforce(mdp, enc, theta, cfg),
        other => Err(PolicyError::Invalid(format!(
            "cannot train a {} policy directly",
            other.kind()
        ))),
    }
}

/// Tabular Q-learning over the anchor cells; returns ε-soft greedy rows.
fn q_learning(
    mdp: &GridMdp,
    anchors: &Anchors,
    cfg: &TrainConfig,
) -> Result<Vec<[f64; ACTIONS]>, PolicyError> {
    let index: BTreeMap<Cell, usize> = anchors
        .cells()
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let lookup = |c: Cell| -> Result<usize, PolicyError> {
        index.get(&c).copied().ok_or_else(|| {
            PolicyError::IncompleteAnchors(format!(
                "visited cell ({},{}) has no anchor",
                c.x, c.y
            ))
        })
    };
    let mut q = vec![[0.0f64; ACTIONS]; anchors.len()];
    let mut rng = seed::stream(cfg.seed, "q-learning", 0);
    let mut used = 0usize;
    while used < cfg.steps {
        let mut cell = mdp.draw_start(&mut rng);
        let mut len = 0usize;
        while used < cfg.steps && len < cfg.max_episode_len && !mdp.is_terminal(cell) {
            let si = lookup(cell)?;
            let a = if rng.gen::<f64>() < cfg.epsilon {
                Action::from_index(rng.gen_range(0..ACTIONS))
            } else {
                greedy_action(&q[si])
            };
            let t = mdp
                .step(cell, a, &[])
                .map_err(|e| PolicyError::Invalid(e.to_string()))?;
            let ni = lookup(t.next)?;
            let bootstrap = if t.terminal {
                mdp.goal_reward(t.next)
            } else {
                q[ni].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = t.reward + mdp.gamma() * bootstrap;
            let qe = &mut q[si][a.index()];
            *qe += cfg.lr * (target - *qe);
            if !qe.is_finite() {
                return Err(PolicyError::DivergedTraining(format!(
                    "non-finite action value at cell ({},{})",
                    cell.x, cell.y
                )));
            }
            cell = t.next;
            used += 1;
            len += 1;
        }
    }
    let eps = cfg.epsilon;
    let rows = q
        .iter()
        .enumerate()
        .map(|(i, qrow)| {
            if mdp.is_terminal(anchors.cell(i)) {
                return [1.0 / ACTIONS as f64; ACTIONS];
            }
            let mut row = [eps / ACTIONS as f64; ACTIONS];
            row[greedy_action(qrow).index()] += 1.0 - eps;
            row
        })
        .collect();
    Ok(rows)
}

fn greedy_action(qrow: &[f64; ACTIONS]) -> Action {
    let mut best = 0;
    for a in 1..ACTIONS {
        if qrow[a] > qrow[best] {
            best = a;
        }
    }
    Action::from_index(best)
}

/// Monte-Carlo policy gradient with a running-mean baseline.
fn reinforce(
    mdp: &GridMdp,
    enc: &StateEncoding,
    theta0: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Policy, PolicyError> {
    let mut theta: Vec<Vec<f64>> = theta0.to_vec();
    let mut rng = seed::stream(cfg.seed, "reinforce", 0);
    let mut baseline = 0.0f64;
    let mut episodes = 0usize;
    let mut used = 0usize;
    while used < cfg.steps {
        // roll out one episode
        let mut cell = mdp.draw_start(&mut rng);
        let mut traj: Vec<(Vec<f64>, usize, f64, Vec<f64>)> = Vec::new();
        let mut bootstrap = 0.0;
        let mut len = 0usize;
        while len < cfg.max_episode_len && !mdp.is_terminal(cell) {
            let v = enc.encode(cell).to_vec();
            let probs = Policy::LinearSoftmax { theta: theta.clone() }.act(&v);
            let a = sample_index(&probs, &mut rng);
            let t = mdp
                .step(cell, Action::from_index(a), &[])
                .map_err(|e| PolicyError::Invalid(e.to_string()))?;
            traj.push((v, a, t.reward, probs));
            if t.terminal {
                bootstrap = mdp.goal_reward(t.next);
            }
            cell = t.next;
            used += 1;
            len += 1;
        }
        // discounted returns, counting the terminal value once more step in
        let mut g = bootstrap;
        let mut returns = vec![0.0; traj.len()];
        for (i, (_, _, r, _)) in traj.iter().enumerate().rev() {
            g = r + mdp.gamma() * g;
            returns[i] = g;
        }
        if let Some(g0) = returns.first() {
            episodes += 1;
            baseline += (g0 - baseline) / episodes as f64;
        }
        for ((v, a, _, probs), g_t) in traj.iter().zip(&returns) {
            let adv = g_t - baseline;
            for (j, row) in theta.iter_mut().enumerate() {
                let indicator = if j == *a { 1.0 } else { 0.0 };
                let coeff = cfg.lr * adv * (indicator - probs[j]);
                for (t, x) in row.iter_mut().zip(v) {
                    *t += coeff * x;
                }
            }
        }
        for row in &theta {
            for x in row {
                if !x.is_finite() || x.abs() > 1e8 {
                    return Err(PolicyError::DivergedTraining(format!(
                        "score parameter reached {x}"
                    )));
                }
            }
        }
    }
    Ok(Policy::linear(theta))
}

// ---------------------------------------------------------------------------
// aggregation and distillation

/// Pointwise equal-weight average of the given policies.
///
/// All-tabular inputs on one anchor set average exactly into a tabular
/// policy; inputs that are all continuous (finite Lipschitz constant) become
/// a [`Policy::Mixture`], which *is* the exact pointwise average. Mixing the
/// two families, or tabular policies on different anchors, is an error.
pub fn aggregate(policies: &[Policy]) -> Result<Policy, PolicyError> {
    if policies.is_empty() {
        return Err(PolicyError::AggregationMismatch("no policies given".into()));
    }
    let tabular_count = policies
        .iter()
        .filter(|p| matches!(p, Policy::Tabular { .. }))
        .count();
    if tabular_count == policies.len() {
        let (first_anchors, n_rows) = match &policies[0] {
            Policy::Tabular { anchors, rows } => (anchors, rows.len()),
            _ => unreachable!(),
        };
        let mut mean = vec![[0.0f64; ACTIONS]; n_rows];
        let k = policies.len() as f64;
        for p in policies {
            let (anchors, rows) = match p {
                Policy::Tabular { anchors, rows } => (anchors, rows),
                _ => unreachable!(),
            };
            let same = Arc::ptr_eq(anchors, first_anchors)
                || anchors.as_ref() == first_anchors.as_ref();
            if !same {
                return Err(PolicyError::AggregationMismatch(
                    "tabular policies use different anchor sets".into(),
                ));
            }
            for (m, r) in mean.iter_mut().zip(rows) {
                for (ma, ra) in m.iter_mut().zip(r) {
                    *ma += ra / k;
                }
            }
        }
        return Ok(Policy::tabular(Arc::clone(first_anchors), mean));
    }
    if tabular_count > 0 {
        return Err(PolicyError::AggregationMismatch(
            "cannot average tabular with continuous policies".into(),
        ));
    }
    Ok(Policy::mixture(policies.to_vec()))
}

/// Output representation for [`distill`].
#[derive(Debug, Clone, Copy)]
pub enum DistillTarget {
    Tabular,
    Smoothed { tau: f64 },
}

/// Snap a policy back to a parametric form by evaluating it at every anchor
/// point and copying the rows. The target anchors must cover every cell the
/// source policy distinguishes.
pub fn distill(
    policy: &Policy,
    anchors: &Arc<Anchors>,
    target: DistillTarget,
) -> Result<Policy, PolicyError> {
    if anchors.is_empty() {
        return Err(PolicyError::IncompleteAnchors("empty anchor set".into()));
    }
    let mut referenced = BTreeSet::new();
    policy.referenced_cells(&mut referenced);
    let covered: BTreeSet<Cell> = anchors.cells().iter().copied().collect();
    if let Some(missing) = referenced.difference(&covered).next() {
        return Err(PolicyError::IncompleteAnchors(format!(
            "cell ({},{}) used by the policy is not an anchor",
            missing.x, missing.y
        )));
    }
    let rows: Vec<[f64; ACTIONS]> = (0..anchors.len())
        .map(|i| {
            let p = policy.act(anchors.point(i));
            let mut row = [0.0; ACTIONS];
            row.copy_from_slice(&p);
            row
        })
        .collect();
    for row in &rows {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::Invalid("non-finite distilled row".into()));
        }
    }
    Ok(match target {
        DistillTarget::Tabular => Policy::tabular(Arc::clone(anchors), rows),
        DistillTarget::Smoothed { tau } => Policy::smoothed(Arc::clone(anchors), rows, tau),
    })
}

/// ε-soft optimal policy for the exact plan of `mdp`, in smoothed form:
/// each non-terminal anchor row spreads `1 − ε` evenly across every
/// value-iteration-optimal action (several shortest routes tie on open
/// grids) plus `ε/4` everywhere; terminal anchors get uniform rows.
/// Spreading over the whole tied set makes the policy route like the
/// population of independently trained agents, which breaks the same ties
/// in different directions, instead of hugging one arbitrary scan order.
pub fn soft_optimal_policy(mdp: &GridMdp, enc: &StateEncoding, epsilon: f64, tau: f64) -> Policy {
    let plan = value_iteration(mdp, 1e-10);
    let rows: Vec<[f64; ACTIONS]> = enc
        .anchors()
        .cells()
        .iter()
        .map(|c| {
            if mdp.is_terminal(*c) {
                return [0.25; ACTIONS];
            }
            let mut row = [epsilon / ACTIONS as f64; ACTIONS];
            let best = plan.greedy_actions(mdp, *c);
            for a in &best {
                row[a.index()] += (1.0 - epsilon) / best.len() as f64;
            }
            row
        })
        .collect();
    Policy::smoothed(enc.anchors(), rows, tau)
}

/// Deterministic optimal policy in smoothed form: every non-terminal anchor
/// row commits all probability to one value-iteration-optimal action, ties
/// broken by the fixed scan order. A planted route policy must concentrate
/// like this: with half the shares behind it, a full row (1.0) outvotes any
/// ε-soft row (≤ 1 − 3ε/4) in the aggregate's argmax at every state, which
/// an even split over tied actions (0.5 each) cannot guarantee.
pub fn committed_optimal_policy(mdp: &GridMdp, enc: &StateEncoding, tau: f64) -> Policy {
    let plan = value_iteration(mdp, 1e-10);
    let rows: Vec<[f64; ACTIONS]> = enc
        .anchors()
        .cells()
        .iter()
        .map(|c| {
            if mdp.is_terminal(*c) {
                return [0.25; ACTIONS];
            }
            let mut row = [0.0; ACTIONS];
            row[plan.greedy_action(*c).index()] = 1.0;
            row
        })
        .collect();
    Policy::smoothed(enc.anchors(), rows, tau)
}

// ---------------------------------------------------------------------------
// evaluation

/// Exact state values of a stationary policy on an MDP.
#[derive(Debug, Clone)]
pub struct PolicyValues {
    cells: Vec<Cell>,
    pos: BTreeMap<Cell, usize>,
    values: Vec<f64>,
}

impl PolicyValues {
    pub fn at(&self, cell: Cell) -> f64 {
        self.values[self.pos[&cell]]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn start_value(&self, mdp: &GridMdp) -> f64 {
        mdp.start_distribution()
            .iter()
            .map(|(c, p)| p * self.at(*c))
            .sum()
    }
}

/// Solve the linear Bellman system for the policy's state values. Terminal
/// cells are pinned to their goal reward.
pub fn policy_values(mdp: &GridMdp, enc: &StateEncoding, policy: &Policy) -> PolicyValues {
    let cells = mdp.free_cells();
    let pos: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = cells.len();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (i, c) in cells.iter().enumerate() {
        if mdp.is_terminal(*c) {
            a[i][i] = 1.0;
            b[i] = mdp.goal_reward(*c);
            continue;
        }
        let probs = policy.act(enc.encode(*c));
        a[i][i] = 1.0;
        for act in Action::ALL {
            let w = probs[act.index()];
            if w == 0.0 {
                continue;
            }
            let t = mdp
                .step(*c, act, &[])
                .expect("non-terminal free cell steps");
            b[i] += w * t.reward;
            a[i][pos[&t.next]] -= mdp.gamma() * w;
        }
    }
    let values = linalg::solve_dense(a, b).expect("Bellman system is non-singular for gamma < 1");
    PolicyValues { cells, pos, values }
}

/// Expected discounted return from the start distribution, solved exactly.
pub fn value_exact(mdp: &GridMdp, enc: &StateEncoding, policy: &Policy) -> f64 {
    policy_values(mdp, enc, policy).start_value(mdp)
}

/// Monte-Carlo value estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo return estimate for an [`Actor`] (which may carry history,
/// e.g. a trigger-composed policy). Episodes truncate at `max_steps`; the
/// tail bias is at most `γ^max_steps · max|V|`.
pub fn value_triggered(
    mdp: &GridMdp,
    enc: &StateEncoding,
    actor: &mut dyn Actor,
    episodes: usize,
    max_steps: usize,
    seed_master: u64,
) -> ValueEstimate {
    assert!(episodes > 0);
    let mut rng = seed::stream(seed_master, "value-triggered", 0);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        actor.reset();
        let mut cell = mdp.draw_start(&mut rng);
        let mut ret = 0.0;
        let mut disc = 1.0;
        if mdp.is_terminal(cell) {
            ret = mdp.goal_reward(cell);
        } else {
            for _ in 0..max_steps {
                let probs = actor.action_distribution(enc.encode(cell));
                let a = Action::from_index(sample_index(&probs, &mut rng));
                let t = mdp.step(cell, a, &[]).expect("stepping non-terminal cell");
                ret += disc * t.reward;
                if t.terminal {
                    ret += disc * mdp.gamma() * mdp.goal_reward(t.next);
                    break;
                }
                disc *= mdp.gamma();
                cell = t.next;
            }
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = ((sum_sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);
    ValueEstimate { mean, std_error: (var / n).sqrt() }
}

// ---------------------------------------------------------------------------
// Lipschitz analysis

/// Analytic Lipschitz constant: total-variation (ℓ1) change of the action
/// distribution per unit Euclidean change of the state.
pub fn lipschitz_analytic(policy: &Policy) -> Result<f64, PolicyError> {
    match policy {
        Policy::Tabular { .. } => Err(PolicyError::NotLipschitz(
            "tabular policies jump at decode boundaries".into(),
        )),
        Policy::SmoothedTabular { tau, .. } => Ok(2.0 / tau),
        Policy::LinearSoftmax { theta } => {
            let mut worst = 0.0f64;
            for i in 0..theta.len() {
                for j in (i + 1)..theta.len() {
                    let d = linalg::norm2(&linalg::sub(&theta[i], &theta[j]));
                    worst = worst.max(d);
                }
            }
            Ok(worst)
        }
        Policy::Mixture { components } => {
            let mut total = 0.0;
            for c in components {
                total += lipschitz_analytic(c)?;
            }
            Ok(total / components.len() as f64)
        }
        Policy::GatedBlend { base, bad, bandwidth, .. } => {
            let lb = lipschitz_analytic(base)?;
            let ld = lipschitz_analytic(bad)?;
            // gate gradient peaks at √(2/e)/bandwidth; the swap term moves
            // at most total-variation 2
            Ok(lb.max(ld) + 2.0 * (2.0f64 / std::f64::consts::E).sqrt() / bandwidth)
        }
    }
}

/// Empirical Lipschitz ratio: max ℓ1/ℓ2 slope over sampled pairs around the
/// probe anchors, including near-coincident pairs that expose steep spots.
pub fn lipschitz_estimate(policy: &Policy, probe: &Anchors, pairs: usize, seed_master: u64) -> f64 {
    let mut rng = seed::stream(seed_master, "lipschitz-estimate", 0);
    let mut scale = 0.0f64;
    for i in 0..probe.len() {
        scale = scale.max(linalg::norm2(probe.point(i)));
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let sample_point = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        let i = rng.gen_range(0..probe.len());
        let mut v = probe.point(i).to_vec();
        for x in v.iter_mut() {
            *x += crate::testing::gaussian(rng) * 0.3 * scale;
        }
        v
    };
    let mut worst = 0.0f64;
    for k in 0..pairs {
        let v1 = sample_point(&mut rng);
        let v2 = if k % 2 == 0 {
            sample_point(&mut rng)
        } else {
            // jittered close pair
            let mut v = v1.clone();
            for x in v.iter_mut() {
                *x += crate::testing::gaussian(&mut rng) * 1e-4 * scale;
            }
            v
        };
        let dv = linalg::norm2(&linalg::sub(&v1, &v2));
        if dv < 1e-12 {
            continue;
        }
        let dp = linalg::l1_dist(&policy.act(&v1), &policy.act(&v2));
        worst = worst.max(dp / dv);
    }
    worst
}

// ---------------------------------------------------------------------------
// serialization

/// Serialize a policy to the versioned line-based text format. Floats use
/// the shortest representation that round-trips exactly, so
/// `from_text(to_text(p))` reproduces `p` bit for bit.
pub fn to_text(policy: &Policy) -> String {
    let mut out = String::from("decrl-policy v1\n");
    write_node(policy, &mut out);
    out
}

fn write_floats(out: &mut String, xs: &[f64]) {
    for x in xs {
        write!(out, " {x}").unwrap();
    }
    out.push('\n');
}

fn write_anchor_block(out: &mut String, anchors: &Anchors, rows: &[[f64; ACTIONS]]) {
    for i in 0..anchors.len() {
        let c = anchors.cell(i);
        write!(out, "a {} {}", c.x, c.y).unwrap();
        write_floats(out, anchors.point(i));
    }
    for row in rows {
        out.push('r');
        write_floats(out, row);
    }
}

fn write_node(policy: &Policy, out: &mut String) {
    match policy {
        Policy::Tabular { anchors, rows } => {
            writeln!(out, "begin tabular {} {}", anchors.len(), anchors.dim()).unwrap();
            write_anchor_block(out, anchors, rows);
            out.push_str("end\n");
        }
        Policy::SmoothedTabular { anchors, rows, tau } => {
            writeln!(
                out,
                "begin smoothed-tabular {} {} {tau}",
                anchors.len(),
                anchors.dim()
            )
            .unwrap();
            write_anchor_block(out, anchors, rows);
            out.push_str("end\n");
        }
        Policy::LinearSoftmax { theta } => {
            writeln!(out, "begin linear-softmax {} {}", theta.len(), theta[0].len()).unwrap();
            for row in theta {
                out.push('t');
                write_floats(out, row);
            }
            out.push_str("end\n");
        }
        Policy::Mixture { components } => {
            writeln!(out, "begin mixture {}", components.len()).unwrap();
            for c in components {
                write_node(c, out);
            }
            out.push_str("end\n");
        }
        Policy::GatedBlend { base, bad, detector, threshold, bandwidth } => {
            writeln!(
                out,
                "begin gated-blend {} {} {threshold} {bandwidth}",
                detector.dim(),
                detector.rank()
            )
            .unwrap();
            for i in 0..detector.dim() {
                out.push('p');
                let row: Vec<f64> =
                    (0..detector.dim()).map(|j| detector.get(i, j)).collect();
                write_floats(out, &row);
            }
            write_node(base, out);
            write_node(bad, out);
            out.push_str("end\n");
        }
    }
}

struct Lines<'a> {
    lines: Vec<&'a str>,
    next: usize,
}

impl<'a> Lines<'a> {
    fn peek_number(&self) -> usize {
        self.next + 1
    }

    fn take(&mut self) -> Result<&'a str, PolicyError> {
        let line = self.lines.get(self.next).copied().ok_or(PolicyError::ParseError {
            line: self.next + 1,
            msg: "unexpected end of file".into(),
        })?;
        self.next += 1;
        Ok(line)
    }

    fn error(&self, msg: impl Into<String>) -> PolicyError {
        PolicyError::ParseError { line: self.next, msg: msg.into() }
    }
}

fn parse_floats(lines: &Lines, parts: &[&str], expect: usize) -> Result<Vec<f64>, PolicyError> {
    if parts.len() != expect {
        return Err(lines.error(format!("expected {expect} numbers, found {}", parts.len())));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| lines.error(format!("bad number {p:?}")))
        })
        .collect()
}

/// Parse a policy produced by [`to_text`].
pub fn from_text(text: &str) -> Result<Policy, PolicyError> {
    let mut lines = Lines {
        lines: text.lines().collect(),
        next: 0,
    };
    let header = lines.take()?;
    if header != "decrl-policy v1" {
        return Err(PolicyError::ParseError {
            line: 1,
            msg: format!("bad header {header:?}"),
        });
    }
    let policy = parse_node(&mut lines)?;
    if lines.next != lines.lines.len() {
        return Err(PolicyError::ParseError {
            line: lines.peek_number(),
            msg: "trailing content after policy".into(),
        });
    }
    Ok(policy)
}

fn parse_anchor_block(
    lines: &mut Lines,
    n: usize,
    dim: usize,
) -> Result<(Arc<Anchors>, Vec<[f64; ACTIONS]>), PolicyError> {
    let mut cells = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.take()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&"a") || parts.len() != 3 + dim {
            return Err(lines.error("expected anchor line `a <x> <y> <coords…>`"));
        }
        let x: usize = parts[1]
            .parse()
            .map_err(|_| lines.error("bad anchor x"))?;
        let y: usize = parts[2]
            .parse()
            .map_err(|_| lines.error("bad anchor y"))?;
        cells.push(Cell::new(x, y));
        points.push(parse_floats(lines, &parts[3..], dim)?);
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.take()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&"r") {
            return Err(lines.error("expected row line `r <4 probabilities>`"));
        }
        let vals = parse_floats(lines, &parts[1..], ACTIONS)?;
        let mut row = [0.0; ACTIONS];
        row.copy_from_slice(&vals);
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| *p < -1e-12) || (total - 1.0).abs() > 1e-6 {
            return Err(lines.error(format!("row is not a distribution (sum {total})")));
        }
        rows.push(row);
    }
    Ok((Arc::new(Anchors::new(dim, cells, points)), rows))
}

fn expect_end(lines: &mut Lines) -> Result<(), PolicyError> {
    let line = lines.take()?;
    if line != "end" {
        return Err(lines.error(format!("expected `end`, found {line:?}")));
    }
    Ok(())
}

fn parse_node(lines: &mut Lines) -> Result<Policy, PolicyError> {
    let line = lines.take()?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.first() != Some(&"begin") || parts.len() < 2 {
        return Err(lines.error(format!("expected `begin <kind> …`, found {line:?}")));
    }
    match parts[1] {
        "tabular" | "smoothed-tabular" => {
            let smoothed = parts[1] == "smoothed-tabular";
            let want = if smoothed { 5 } else { 4 };
            if parts.len() != want {
                return Err(lines.error("bad tabular header"));
            }
            let n: usize = parts[2].parse().map_err(|_| lines.error("bad count"))?;
            let dim: usize = parts[3].parse().map_err(|_| lines.error("bad dim"))?;
            let tau = if smoothed {
                let t: f64 = parts[4].parse().map_err(|_| lines.error("bad tau"))?;
                if !(t > 0.0) {
                    return Err(lines.error("tau must be positive"));
                }
                Some(t)
            } else {
                None
            };
            if n == 0 || dim == 0 {
                return Err(lines.error("empty anchor set"));
            }
            let (anchors, rows) = parse_anchor_block(lines, n, dim)?;
            expect_end(lines)?;
            Ok(match tau {
                Some(t) => Policy::smoothed(anchors, rows, t),
                None => Policy::tabular(anchors, rows),
            })
        }
        "linear-softmax" => {
            if parts.len() != 4 {
                return Err(lines.error("bad linear-softmax header"));
            }
            let actions: usize = parts[2].parse().map_err(|_| lines.error("bad count"))?;
            let dim: usize = parts[3].parse().map_err(|_| lines.error("bad dim"))?;
            if actions != ACTIONS {
                return Err(lines.error(format!("expected {ACTIONS} action rows")));
            }
            let mut theta = Vec::with_capacity(actions);
            for _ in 0..actions {
                let line = lines.take()?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.first() != Some(&"t") {
                    return Err(lines.error("expected score line `t <coords…>`"));
                }
                theta.push(parse_floats(lines, &parts[1..], dim)?);
            }
            expect_end(lines)?;
            Ok(Policy::linear(theta))
        }
        "mixture" => {
            if parts.len() != 3 {
                return Err(lines.error("bad mixture header"));
            }
            let k: usize = parts[2].parse().map_err(|_| lines.error("bad count"))?;
            if k == 0 {
                return Err(lines.error("mixture needs at least one component"));
            }
            let mut components = Vec::with_capacity(k);
            for _ in 0..k {
                components.push(parse_node(lines)?);
            }
            expect_end(lines)?;
            Ok(Policy::mixture(components))
        }
        "gated-blend" => {
            if parts.len() != 6 {
                return Err(lines.error("bad gated-blend header"));
            }
            let dim: usize = parts[2].parse().map_err(|_| lines.error("bad dim"))?;
            let rank: usize = parts[3].parse().map_err(|_| lines.error("bad rank"))?;
            let threshold: f64 =
                parts[4].parse().map_err(|_| lines.error("bad threshold"))?;
            let bandwidth: f64 =
                parts[5].parse().map_err(|_| lines.error("bad bandwidth"))?;
            if !(threshold > 0.0 && bandwidth > 0.0) {
                return Err(lines.error("threshold and bandwidth must be positive"));
            }
            let mut entries = Vec::with_capacity(dim * dim);
            for _ in 0..dim {
                let line = lines.take()?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.first() != Some(&"p") {
                    return Err(lines.error("expected projector line `p <row…>`"));
                }
                entries.extend(parse_floats(lines, &parts[1..], dim)?);
            }
            let detector = Projector::from_raw(dim, rank, entries)
                .map_err(|e| lines.error(format!("bad projector: {e}")))?;
            let base = parse_node(lines)?;
            let bad = parse_node(lines)?;
            expect_end(lines)?;
            Ok(Policy::gated_blend(base, bad, detector, threshold, bandwidth))
        }
        other => Err(lines.error(format!("unknown policy kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_maze, value_iteration, GridMdpBuilder};
    use proptest::prelude::*;

    fn open_grid(side: usize) -> GridMdp {
        GridMdpBuilder::new(side, side)
            .start(Cell::new(0, 0))
            .goal(Cell::new(side - 1, side - 1), 0.0)
            .build()
            .unwrap()
    }

    fn maze_fixture() -> (GridMdp, StateEncoding) {
        let text = "\
.....G.....
...........
####..#####
...........
.....S.....";
        let mdp = make_maze(text).unwrap();
        let enc = StateEncoding::for_mdp(&mdp, 8).unwrap();
        (mdp, enc)
    }

    fn random_rows<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<[f64; ACTIONS]> {
        (0..n)
            .map(|_| {
                let mut row = [0.0; ACTIONS];
                let mut total = 0.0;
                for r in row.iter_mut() {
                    *r = rng.gen_range(0.01..1.0);
                    total += *r;
                }
                for r in row.iter_mut() {
                    *r /= total;
                }
                row
            })
            .collect()
    }

    fn random_state<R: rand::Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_distribution(p: &[f64]) {
        assert_eq!(p.len(), ACTIONS);
        assert!(p.iter().all(|x| *x >= -1e-15), "negative probability in {p:?}");
        let sum: f64 = p.iter().sum();
        assert!(
            (sum - 1.0).abs() <= crate::tol::DISTRIBUTION_SUM,
            "probabilities sum to {sum}"
        );
    }

    fn sample_gated(enc: &StateEncoding, rng: &mut rand_chacha::ChaCha12Rng) -> Policy {
        let anchors = enc.anchors();
        let base = Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), rng), 0.01);
        let bad = Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), rng), 0.01);
        let mut e3 = vec![0.0; enc.dim()];
        e3[3] = 1.0;
        let det = Projector::from_orthonormal_columns(enc.dim(), &[&e3]).unwrap();
        Policy::gated_blend(base, bad, det, 0.1, 0.02)
    }

    #[test]
    fn every_representation_emits_distributions_on_random_states() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(42, "act-validity", 0);
        let tab = Policy::tabular(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng));
        let smooth = Policy::smoothed(
            Arc::clone(&anchors),
            random_rows(anchors.len(), &mut rng),
            DEFAULT_TAU_FRACTION * enc.delta_sep(),
        );
        let theta: Vec<Vec<f64>> = (0..ACTIONS)
            .map(|_| (0..enc.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let lin = Policy::linear(theta);
        let mix = Policy::mixture(vec![tab.clone(), smooth.clone()]);
        let gated = sample_gated(&enc, &mut rng);
        let policies = [tab, smooth, lin, mix, gated];
        for _ in 0..2000 {
            let v = random_state(enc.dim(), &mut rng);
            for p in &policies {
                assert_distribution(&p.act(&v));
            }
        }
    }

    #[test]
    fn tabular_act_returns_nearest_anchor_row() {
        let (mdp, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(1, "tab-nearest", 0);
        let rows = random_rows(anchors.len(), &mut rng);
        let pol = Policy::tabular(Arc::clone(&anchors), rows.clone());
        for (i, c) in mdp.free_cells().iter().enumerate() {
            assert_eq!(pol.act(enc.encode(*c)), rows[i].to_vec());
        }
        // slightly perturbed states still decode to the same anchor
        let v = enc.encode(Cell::new(0, 0));
        let mut v2 = v.to_vec();
        v2[0] += 0.25 * enc.delta_sep();
        assert_eq!(pol.act(&v2), rows[anchors.index_of(Cell::new(0, 0)).unwrap()].to_vec());
    }

    #[test]
    fn smoothed_act_at_anchor_matches_row_within_leakage_budget() {
        let (mdp, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(2, "smooth-anchor", 0);
        let rows = random_rows(anchors.len(), &mut rng);
        let tau = DEFAULT_TAU_FRACTION * enc.delta_sep();
        let pol = Policy::smoothed(Arc::clone(&anchors), rows.clone(), tau);
        for (i, c) in mdp.free_cells().iter().enumerate() {
            let p = pol.act(enc.encode(*c));
            for a in 0..ACTIONS {
                assert!(
                    (p[a] - rows[i][a]).abs() < crate::tol::ANCHOR_MATCH,
                    "leakage at anchor {i} action {a}"
                );
            }
        }
    }

    #[test]
    fn linear_softmax_matches_closed_form() {
        let mut theta = vec![vec![0.0; 4]; ACTIONS];
        theta[0][0] = 1.0;
        theta[1][1] = 1.0;
        let pol = Policy::linear(theta);
        let v = vec![2.0f64.ln(), 0.0, 0.0, 0.0];
        let p = pol.act(&v);
        // logits (ln 2, 0, 0, 0) → weights (2,1,1,1)/5
        assert!((p[0] - 0.4).abs() < 1e-12);
        for a in 1..ACTIONS {
            assert!((p[a] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_act_is_exact_component_mean() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(3, "mixture-mean", 0);
        let comps: Vec<Policy> = (0..3)
            .map(|_| {
                Policy::smoothed(
                    Arc::clone(&anchors),
                    random_rows(anchors.len(), &mut rng),
                    0.02,
                )
            })
            .collect();
        let mix = Policy::mixture(comps.clone());
        for _ in 0..200 {
            let v = random_state(enc.dim(), &mut rng);
            let p = mix.act(&v);
            let mut mean = vec![0.0; ACTIONS];
            for c in &comps {
                for (m, x) in mean.iter_mut().zip(c.act(&v)) {
                    *m += x / comps.len() as f64;
                }
            }
            assert!(linalg::l1_dist(&p, &mean) < 1e-14);
        }
    }

    #[test]
    fn gated_blend_is_base_without_energy_and_bad_at_saturation() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(4, "gate-extremes", 0);
        let base = Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng), 0.01);
        let bad = Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng), 0.01);
        let mut e3 = vec![0.0; enc.dim()];
        e3[3] = 1.0;
        let det = Projector::from_orthonormal_columns(enc.dim(), &[&e3]).unwrap();
        let threshold = 0.1;
        let bandwidth = threshold / 5.0; // gate at rest: e^{-25}
        let pol = Policy::gated_blend(base.clone(), bad.clone(), det, threshold, bandwidth);
        for _ in 0..100 {
            let mut v = random_state(enc.dim(), &mut rng);
            v[3] = 0.0; // no detector energy
            assert!(linalg::l1_dist(&pol.act(&v), &base.act(&v)) < 1e-9);
            assert!(pol.gate(&v) < 1e-10);
            v[3] = threshold * (1.0 + rng.gen_range(0.0..2.0)); // saturated
            assert_eq!(pol.gate(&v), 1.0);
            assert!(linalg::l1_dist(&pol.act(&v), &bad.act(&v)) < 1e-15);
        }
    }

    #[test]
    fn q_learning_reaches_value_iteration_optimum_on_open_grid() {
        let mdp = open_grid(5);
        let enc = StateEncoding::for_mdp(&mdp, 4).unwrap();
        let anchors = enc.anchors();
        let start = Policy::uniform_tabular(Arc::clone(&anchors));
        let cfg = TrainConfig { steps: 60_000, seed: 7, ..TrainConfig::default() };
        let trained = local_train(&start, &mdp, &enc, &cfg).unwrap();
        // the greedy version of the learned policy is optimal within 5%
        let greedy = trained.sharpened().unwrap();
        let v_opt = value_iteration(&mdp, 1e-10).value(Cell::new(0, 0));
        let v_greedy = value_exact(&mdp, &enc, &greedy);
        assert!(
            v_greedy >= v_opt - v_opt.abs() * 0.05,
            "greedy value {v_greedy} misses optimum {v_opt}"
        );
        // representation is preserved and rows are ε-soft
        match &trained {
            Policy::Tabular { rows, .. } => {
                for row in rows {
                    let max = row.iter().cloned().fold(0.0f64, f64::max);
                    assert!((max - 0.925).abs() < 1e-12 || (max - 0.25).abs() < 1e-12);
                }
            }
            other => panic!("unexpected representation {}", other.kind()),
        }
    }

    #[test]
    fn zero_step_training_is_identity() {
        let (mdp, enc) = maze_fixture();
        let pol = Policy::uniform_smoothed(enc.anchors(), 0.02);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let out = local_train(&pol, &mdp, &enc, &cfg).unwrap();
        assert_eq!(out, pol);
    }

    #[test]
    fn policy_gradient_training_improves_start_value() {
        let mdp = open_grid(5);
        let enc = StateEncoding::for_mdp(&mdp, 4).unwrap();
        let start = Policy::zero_linear(enc.dim());
        let v_before = value_exact(&mdp, &enc, &start);
        let cfg = TrainConfig {
            steps: 150_000,
            lr: 0.05,
            seed: 11,
            max_episode_len: 200,
            ..TrainConfig::default()
        };
        let trained = local_train(&start, &mdp, &enc, &cfg).unwrap();
        let v_after = value_exact(&mdp, &enc, &trained);
        assert!(
            v_after > v_before + 3.0,
            "no improvement: {v_before} -> {v_after}"
        );
    }

    #[test]
    fn training_mixture_directly_is_rejected() {
        let (mdp, enc) = maze_fixture();
        let pol = Policy::mixture(vec![Policy::uniform_smoothed(enc.anchors(), 0.02)]);
        let err = local_train(&pol, &mdp, &enc, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, PolicyError::Invalid(_)));
    }

    #[test]
    fn aggregate_tabular_is_exact_row_mean() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(5, "agg-exact", 0);
        let pols: Vec<Policy> = (0..4)
            .map(|_| Policy::tabular(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng)))
            .collect();
        let agg = aggregate(&pols).unwrap();
        let rows: Vec<&Vec<[f64; ACTIONS]>> = pols
            .iter()
            .map(|p| match p {
                Policy::Tabular { rows, .. } => rows,
                _ => unreachable!(),
            })
            .collect();
        match &agg {
            Policy::Tabular { rows: mean, .. } => {
                for i in 0..anchors.len() {
                    for a in 0..ACTIONS {
                        let expect: f64 = rows.iter().map(|r| r[i][a] / 4.0).sum();
                        assert!(
                            (mean[i][a] - expect).abs() <= crate::tol::AGGREGATE_MATCH,
                            "row {i} action {a}"
                        );
                    }
                }
            }
            other => panic!("expected tabular, got {}", other.kind()),
        }
    }

    #[test]
    fn aggregate_continuous_returns_pointwise_mean_mixture() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(6, "agg-mixture", 0);
        let pols = vec![
            Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng), 0.02),
            Policy::zero_linear(enc.dim()),
            sample_gated(&enc, &mut rng),
        ];
        let agg = aggregate(&pols).unwrap();
        assert_eq!(agg.kind(), "mixture");
        for _ in 0..100 {
            let v = random_state(enc.dim(), &mut rng);
            let p = agg.act(&v);
            let mut mean = vec![0.0; ACTIONS];
            for c in &pols {
                for (m, x) in mean.iter_mut().zip(c.act(&v)) {
                    *m += x / pols.len() as f64;
                }
            }
            assert!(linalg::l1_dist(&p, &mean) < 1e-14);
        }
    }

    #[test]
    fn aggregate_rejects_mixed_families_and_unequal_anchors() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(7, "agg-mismatch", 0);
        let tab = Policy::tabular(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng));
        let lin = Policy::zero_linear(enc.dim());
        assert!(matches!(
            aggregate(&[tab.clone(), lin]).unwrap_err(),
            PolicyError::AggregationMismatch(_)
        ));
        // different anchor sets
        let half = Arc::new(Anchors::new(
            anchors.dim(),
            anchors.cells()[..anchors.len() - 1].to_vec(),
            (0..anchors.len() - 1).map(|i| anchors.point(i).to_vec()).collect(),
        ));
        let tab2 = Policy::tabular(Arc::clone(&half), random_rows(half.len(), &mut rng));
        assert!(matches!(
            aggregate(&[tab, tab2]).unwrap_err(),
            PolicyError::AggregationMismatch(_)
        ));
        assert!(matches!(
            aggregate(&[]).unwrap_err(),
            PolicyError::AggregationMismatch(_)
        ));
    }

    #[test]
    fn distill_matches_source_at_every_anchor() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(8, "distill", 0);
        let tau = DEFAULT_TAU_FRACTION * enc.delta_sep();
        let comps: Vec<Policy> = (0..5)
            .map(|_| {
                Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng), tau)
            })
            .collect();
        let mix = Policy::mixture(comps);
        let out = distill(&mix, &anchors, DistillTarget::Smoothed { tau }).unwrap();
        for i in 0..anchors.len() {
            let d = linalg::l1_dist(&out.act(anchors.point(i)), &mix.act(anchors.point(i)));
            assert!(d <= crate::tol::ANCHOR_MATCH, "anchor {i} deviates by {d}");
        }
    }

    #[test]
    fn distill_onto_missing_anchor_is_incomplete() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let pol = Policy::uniform_smoothed(Arc::clone(&anchors), 0.02);
        let partial = Arc::new(Anchors::new(
            anchors.dim(),
            anchors.cells()[..anchors.len() - 1].to_vec(),
            (0..anchors.len() - 1).map(|i| anchors.point(i).to_vec()).collect(),
        ));
        assert!(matches!(
            distill(&pol, &partial, DistillTarget::Tabular).unwrap_err(),
            PolicyError::IncompleteAnchors(_)
        ));
    }

    #[test]
    fn value_exact_matches_hand_computations() {
        // 2-cell chain, γ = 0.5, always right: value −1
        let chain = GridMdpBuilder::new(2, 1)
            .start(Cell::new(0, 0))
            .goal(Cell::new(1, 0), 0.0)
            .gamma(0.5)
            .build()
            .unwrap();
        let enc = StateEncoding::for_mdp(&chain, 2).unwrap();
        let rows = vec![[0.0, 0.0, 0.0, 1.0]; enc.anchors().len()];
        let right = Policy::tabular(enc.anchors(), rows);
        assert!((value_exact(&chain, &enc, &right) + 1.0).abs() < 1e-10);

        // 5×5 open grid: greedy optimal policy matches value iteration
        let grid = open_grid(5);
        let enc = StateEncoding::for_mdp(&grid, 4).unwrap();
        let plan = value_iteration(&grid, 1e-12);
        let rows: Vec<[f64; ACTIONS]> = enc
            .anchors()
            .cells()
            .iter()
            .map(|c| {
                let mut row = [0.0; ACTIONS];
                row[plan.greedy_action(*c).index()] = 1.0;
                row
            })
            .collect();
        let pol = Policy::tabular(enc.anchors(), rows);
        let v = value_exact(&grid, &enc, &pol);
        assert!((v - plan.value(Cell::new(0, 0))).abs() < 1e-8);
    }

    #[test]
    fn monte_carlo_value_agrees_with_exact_solution() {
        let grid = open_grid(5);
        let enc = StateEncoding::for_mdp(&grid, 4).unwrap();
        let plan = value_iteration(&grid, 1e-12);
        let rows: Vec<[f64; ACTIONS]> = enc
            .anchors()
            .cells()
            .iter()
            .map(|c| {
                let mut row = [0.025; ACTIONS];
                row[plan.greedy_action(*c).index()] += 0.9;
                row
            })
            .collect();
        let mut pol = Policy::tabular(enc.anchors(), rows);
        let exact = value_exact(&grid, &enc, &pol);
        let est = value_triggered(&grid, &enc, &mut pol, 4000, 500, 21);
        assert!(
            (est.mean - exact).abs() <= 4.0 * est.std_error + 0.02,
            "MC {} ± {} vs exact {exact}",
            est.mean,
            est.std_error
        );
        // deterministic chain: zero variance, exact mean
        let chain = GridMdpBuilder::new(2, 1)
            .start(Cell::new(0, 0))
            .goal(Cell::new(1, 0), 0.0)
            .gamma(0.5)
            .build()
            .unwrap();
        let enc = StateEncoding::for_mdp(&chain, 2).unwrap();
        let rows = vec![[0.0, 0.0, 0.0, 1.0]; enc.anchors().len()];
        let mut right = Policy::tabular(enc.anchors(), rows);
        let est = value_triggered(&chain, &enc, &mut right, 50, 100, 22);
        assert!((est.mean + 1.0).abs() < 1e-12);
        assert!(est.std_error < 1e-12);
    }

    #[test]
    fn analytic_lipschitz_bounds_every_empirical_slope() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(9, "lipschitz", 0);
        let smooth = Policy::smoothed(
            Arc::clone(&anchors),
            random_rows(anchors.len(), &mut rng),
            0.05,
        );
        let theta: Vec<Vec<f64>> = (0..ACTIONS)
            .map(|_| (0..enc.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let lin = Policy::linear(theta);
        let mix = Policy::mixture(vec![smooth.clone(), lin.clone()]);
        let gated = sample_gated(&enc, &mut rng);
        for pol in [&smooth, &lin, &mix, &gated] {
            let l_ana = lipschitz_analytic(pol).unwrap();
            for s in 0..5 {
                let l_emp = lipschitz_estimate(pol, &anchors, 2000, 100 + s);
                assert!(
                    l_emp <= l_ana * (1.0 + 1e-9),
                    "{}: empirical {l_emp} exceeds analytic {l_ana}",
                    pol.kind()
                );
            }
        }
        // mixture constant is the component mean
        let lm = lipschitz_analytic(&mix).unwrap();
        let ls = lipschitz_analytic(&smooth).unwrap();
        let ll = lipschitz_analytic(&lin).unwrap();
        assert!((lm - (ls + ll) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tabular_has_no_lipschitz_constant() {
        let (_, enc) = maze_fixture();
        let pol = Policy::uniform_tabular(enc.anchors());
        assert!(matches!(
            lipschitz_analytic(&pol).unwrap_err(),
            PolicyError::NotLipschitz(_)
        ));
    }

    #[test]
    fn text_roundtrip_reproduces_every_representation_bit_for_bit() {
        let (_, enc) = maze_fixture();
        let anchors = enc.anchors();
        let mut rng = seed::stream(10, "serde", 0);
        let tau = DEFAULT_TAU_FRACTION * enc.delta_sep();
        let tab = Policy::tabular(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng));
        let smooth =
            Policy::smoothed(Arc::clone(&anchors), random_rows(anchors.len(), &mut rng), tau);
        let theta: Vec<Vec<f64>> = (0..ACTIONS)
            .map(|_| (0..enc.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let lin = Policy::linear(theta);
        let gated = sample_gated(&enc, &mut rng);
        let mix = Policy::mixture(vec![smooth.clone(), lin.clone(), gated.clone()]);
        for pol in [tab, smooth, lin, gated, mix] {
            let text = to_text(&pol);
            let back = from_text(&text).unwrap();
            assert_eq!(back, pol, "{} roundtrip", pol.kind());
            assert_eq!(to_text(&back), text, "{} text stability", pol.kind());
            // behavior identical on random states
            for _ in 0..50 {
                let v = random_state(enc.dim(), &mut rng);
                assert_eq!(back.act(&v), pol.act(&v));
            }
        }
    }

    #[test]
    fn malformed_policy_text_reports_line() {
        let err = from_text("nonsense\n").unwrap_err();
        assert!(matches!(err, PolicyError::ParseError { line: 1, .. }));
        let err = from_text("decrl-policy v1\nbegin tabular 2 2\n").unwrap_err();
        assert!(matches!(err, PolicyError::ParseError { .. }));
        let bad_row = "decrl-policy v1\nbegin tabular 1 2\na 0 0 0 0\nr 0.5 0.5 0.5 0.5\nend\n";
        match from_text(bad_row).unwrap_err() {
            PolicyError::ParseError { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn smoothed_policies_always_emit_distributions(
            seed in 0u64..1000,
            tau in 1e-3f64..0.5,
        ) {
            let mdp = open_grid(4);
            let enc = StateEncoding::for_mdp(&mdp, 3).unwrap();
            let anchors = enc.anchors();
            let mut rng = seed::stream(seed, "prop-validity", 0);
            let pol = Policy::smoothed(
                Arc::clone(&anchors),
                random_rows(anchors.len(), &mut rng),
                tau,
            );
            for _ in 0..10 {
                let v = random_state(enc.dim(), &mut rng);
                let p = pol.act(&v);
                prop_assert!(p.iter().all(|x| *x >= 0.0));
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() <= crate::tol::DISTRIBUTION_SUM);
            }
        }

        #[test]
        fn linear_policies_roundtrip_through_text(seed in 0u64..1000) {
            let mut rng = seed::stream(seed, "prop-serde", 0);
            let theta: Vec<Vec<f64>> = (0..ACTIONS)
                .map(|_| (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let pol = Policy::linear(theta);
            let back = from_text(&to_text(&pol)).unwrap();
            prop_assert_eq!(back, pol);
        }
    }
}
