//! Trigger subspaces, trigger functions, and their additive decomposition.
//!
//! The pipeline: sample the consensus policy's discounted occupancy, estimate
//! the second-moment matrix of the encoded states, and split the state space
//! into a high-variance *safe* subspace `E` (where clean states live) and its
//! orthogonal complement (where they don't). A trigger function writes a
//! bounded perturbation into the complement; cooperating attackers split it
//! into per-attacker components supported on mutually orthogonal blocks, so
//! the components recompose exactly under agent averaging while each one
//! stays invisible outside its own block.

use crate::env::{Cell, GridMdp, StateEncoding};
use crate::linalg::{self, Eigensystem, LinalgError, Projector};
use crate::policy::{Actor, Policy};
use crate::seed;
use crate::tol;
use rand::Rng as _;
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// More attackers than orthogonal trigger dimensions.
    #[error("{requested} attackers need {requested} trigger dimensions, only {capacity} exist")]
    TooManyAttackers { requested: usize, capacity: usize },
    /// Custom block boundaries are malformed.
    #[error("invalid partition boundaries: {0}")]
    InvalidBoundaries(String),
    /// The safe subspace swallowed every dimension.
    #[error("no trigger space: {0}")]
    NoTriggerSpace(String),
    /// A trigger writes outside its declared subspace.
    #[error("range violation: {0}")]
    RangeViolation(String),
    #[error("invalid trigger operation: {0}")]
    Invalid(String),
}

/// Draw `n` encoded states from the policy's discounted occupancy by
/// geometric-horizon sampling: each trajectory continues with probability γ
/// and yields the state where it stopped (terminals absorb).
pub fn sample_occupancy(
    mdp: &GridMdp,
    enc: &StateEncoding,
    policy: &Policy,
    n: usize,
    seed_master: u64,
) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(seed_master, "trigger-occupancy", 0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cell = mdp.draw_start(&mut rng);
        while !mdp.is_terminal(cell) && rng.gen::<f64>() < mdp.gamma() {
            let probs = policy.act(enc.encode(cell));
            let a = crate::env::Action::from_index(crate::policy::sample_index(&probs, &mut rng));
            cell = mdp.step(cell, a, &[]).expect("non-terminal step").next;
        }
        out.push(enc.encode(cell).to_vec());
    }
    out
}

/// How many leading eigendirections the safe subspace keeps.
#[derive(Debug, Clone, Copy)]
pub enum DimensionRule {
    Fixed(usize),
    /// Smallest `d` whose eigenvalues cover the given fraction of the trace
    /// (clamped to a floor of 2 so the plane of positions stays safe).
    TraceFraction(f64),
}

/// Eigendecomposition of the clean-state second moment, split into the safe
/// span `E` (top `d` eigendirections) and its orthogonal complement.
#[derive(Debug, Clone)]
pub struct SafeSubspace {
    eigen: Eigensystem,
    d: usize,
    safe: Projector,
    complement: Projector,
    /// Largest complement-residual norm observed on the input samples.
    c0: f64,
    /// Largest Euclidean norm among the input samples.
    max_clean_norm: f64,
}

impl SafeSubspace {
    pub fn dim(&self) -> usize {
        self.eigen.dim()
    }

    pub fn safe_dim(&self) -> usize {
        self.d
    }

    pub fn trigger_dim(&self) -> usize {
        self.eigen.dim() - self.d
    }

    pub fn safe_projector(&self) -> &Projector {
        &self.safe
    }

    pub fn trigger_projector(&self) -> &Projector {
        &self.complement
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.values
    }

    pub fn basis_vector(&self, k: usize) -> &[f64] {
        &self.eigen.vectors[k]
    }

    /// Observed bound on how far clean states stick out of the safe span.
    pub fn residual_bound(&self) -> f64 {
        self.c0
    }

    pub fn max_clean_norm(&self) -> f64 {
        self.max_clean_norm
    }
}

/// Estimate the safe subspace from occupancy samples of encoded states.
pub fn safe_subspace(
    samples: &[Vec<f64>],
    rule: DimensionRule,
) -> Result<SafeSubspace, TriggerError> {
    let moment = linalg::covariance(samples, false)?;
    let eigen = linalg::sym_eig(&moment)?;
    let dim = eigen.dim();
    let d = match rule {
        DimensionRule::Fixed(d) => {
            if d == 0 || d > dim {
                return Err(TriggerError::Invalid(format!(
                    "fixed safe dimension {d} outside 1..={dim}"
                )));
            }
            d
        }
        DimensionRule::TraceFraction(frac) => {
            if !(0.0 < frac && frac <= 1.0) {
                return Err(TriggerError::Invalid(format!(
                    "trace fraction {frac} outside (0, 1]"
                )));
            }
            let clamped: Vec<f64> = eigen.values.iter().map(|v| v.max(0.0)).collect();
            let total: f64 = clamped.iter().sum();
            let mut d = dim;
            if total > 0.0 {
                let mut acc = 0.0;
                for (i, v) in clamped.iter().enumerate() {
                    acc += v;
                    if acc >= frac * total {
                        d = i + 1;
                        break;
                    }
                }
            }
            d.max(2).min(dim)
        }
    };
    let safe = eigen.projector_onto(0..d);
    let tail: Vec<&[f64]> = (d..dim).map(|k| eigen.vectors[k].as_slice()).collect();
    let complement = Projector::from_orthonormal_columns(dim, &tail)?;
    let mut c0 = 0.0f64;
    let mut max_norm = 0.0f64;
    for s in samples {
        c0 = c0.max(linalg::norm2(&complement.apply(s)));
        max_norm = max_norm.max(linalg::norm2(s));
    }
    Ok(SafeSubspace { eigen, d, safe, complement, c0, max_clean_norm: max_norm })
}

/// The complement split into per-attacker orthogonal blocks.
#[derive(Debug, Clone)]
pub struct SubspacePartition {
    /// Eigenvector indices delimiting the blocks: `boundaries[0] = d`,
    /// `boundaries[M] = dim`; block `i` spans `boundaries[i]..boundaries[i+1]`.
    boundaries: Vec<usize>,
    blocks: Vec<Projector>,
    /// First eigenbasis vector of each block (the trigger axes).
    axes: Vec<Vec<f64>>,
}

impl SubspacePartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, i: usize) -> &Projector {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Projector] {
        &self.blocks
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        &self.axes[i]
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }
}

/// Split the trigger space into `attackers` contiguous orthogonal blocks of
/// near-equal size, or at explicit `boundaries` (the full delimiter vector
/// starting at the safe dimension and ending at the embedding dimension).
pub fn partition_orthogonal(
    subspace: &SafeSubspace,
    attackers: usize,
    boundaries: Option<&[usize]>,
) -> Result<SubspacePartition, TriggerError> {
    let dim = subspace.dim();
    let d = subspace.safe_dim();
    let capacity = dim - d;
    if capacity == 0 {
        return Err(TriggerError::NoTriggerSpace(format!(
            "safe subspace keeps all {dim} dimensions"
        )));
    }
    if attackers == 0 {
        return Err(TriggerError::Invalid("zero attackers".into()));
    }
    if attackers > capacity {
        return Err(TriggerError::TooManyAttackers { requested: attackers, capacity });
    }
    let bounds: Vec<usize> = match boundaries {
        Some(b) => {
            if b.len() != attackers + 1 {
                return Err(TriggerError::InvalidBoundaries(format!(
                    "need {} delimiters for {attackers} blocks, got {}",
                    attackers + 1,
                    b.len()
                )));
            }
            if b[0] != d {
                return Err(TriggerError::InvalidBoundaries(format!(
                    "first delimiter {} must equal the safe dimension {d}",
                    b[0]
                )));
            }
            if *b.last().unwrap() != dim {
                return Err(TriggerError::InvalidBoundaries(format!(
                    "last delimiter {} must equal the embedding dimension {dim}",
                    b.last().unwrap()
                )));
            }
            for w in b.windows(2) {
                if w[1] <= w[0] {
                    return Err(TriggerError::InvalidBoundaries(format!(
                        "delimiters must strictly increase, got {} then {}",
                        w[0], w[1]
                    )));
                }
            }
            b.to_vec()
        }
        None => {
            let base = capacity / attackers;
            let extra = capacity % attackers;
            let mut bounds = vec![d];
            for i in 0..attackers {
                let size = base + usize::from(i < extra);
                bounds.push(bounds[i] + size);
            }
            bounds
        }
    };
    let mut blocks = Vec::with_capacity(attackers);
    let mut axes = Vec::with_capacity(attackers);
    for w in bounds.windows(2) {
        let cols: Vec<&[f64]> = (w[0]..w[1]).map(|k| subspace.basis_vector(k)).collect();
        blocks.push(Projector::from_orthonormal_columns(dim, &cols)?);
        axes.push(subspace.basis_vector(w[0]).to_vec());
    }
    Ok(SubspacePartition { boundaries: bounds, blocks, axes })
}

/// When a trigger function fires along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationRule {
    Always,
    Never,
    /// Fires when the (decoded) agent position is within Chebyshev `radius`
    /// of any listed cell; with `latch` it keeps firing for the rest of the
    /// trajectory once it has fired.
    NearCells {
        cells: BTreeSet<Cell>,
        radius: usize,
        latch: bool,
    },
}

impl ActivationRule {
    fn near(&self, cell: Cell) -> bool {
        match self {
            ActivationRule::NearCells { cells, radius, .. } => {
                cells.iter().any(|c| c.chebyshev(cell) <= *radius)
            }
            _ => false,
        }
    }
}

/// A history-dependent additive state perturbation confined to a subspace.
///
/// When its activation rule fires, the trigger emits `magnitude · direction`
/// clipped to the hard `budget`; otherwise it emits zero. The direction is a
/// unit vector inside `range`, so the output never leaves the subspace.
#[derive(Debug, Clone)]
pub struct TriggerFunction {
    range: Projector,
    direction: Vec<f64>,
    magnitude: f64,
    budget: f64,
    rule: ActivationRule,
    anchors: Arc<crate::env::Anchors>,
}

impl TriggerFunction {
    pub fn range(&self) -> &Projector {
        &self.range
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn rule(&self) -> &ActivationRule {
        &self.rule
    }

    /// Whether the rule fires for the given encoded history (current state
    /// last). Empty histories never fire.
    pub fn active(&self, history: &[Vec<f64>]) -> bool {
        match &self.rule {
            ActivationRule::Always => !history.is_empty(),
            ActivationRule::Never => false,
            ActivationRule::NearCells { latch, .. } => {
                if history.is_empty() {
                    return false;
                }
                if *latch {
                    history
                        .iter()
                        .any(|v| self.rule.near(self.anchors.cell(self.anchors.nearest(v))))
                } else {
                    let last = history.last().unwrap();
                    self.rule.near(self.anchors.cell(self.anchors.nearest(last)))
                }
            }
        }
    }

    /// The perturbation added to the current state for this history.
    pub fn evaluate(&self, history: &[Vec<f64>]) -> Vec<f64> {
        if !self.active(history) {
            return vec![0.0; self.direction.len()];
        }
        let mut v = linalg::scale(&self.direction, self.magnitude);
        let n = linalg::norm2(&v);
        if n > self.budget {
            v = linalg::scale(&v, self.budget / n);
        }
        v
    }
}

/// Build the full cooperative trigger: a perturbation of norm `magnitude`
/// spread with equal energy across the partition blocks, budget-capped at
/// `max_clean_norm + magnitude`.
pub fn make_trigger(
    subspace: &SafeSubspace,
    partition: &SubspacePartition,
    anchors: Arc<crate::env::Anchors>,
    rule: ActivationRule,
    magnitude: f64,
) -> Result<TriggerFunction, TriggerError> {
    if !(magnitude > 0.0) {
        return Err(TriggerError::Invalid(format!(
            "trigger magnitude {magnitude} must be positive"
        )));
    }
    let m = partition.len() as f64;
    let dim = subspace.dim();
    let mut direction = vec![0.0; dim];
    for i in 0..partition.len() {
        for (dst, x) in direction.iter_mut().zip(partition.axis(i)) {
            *dst += x / m.sqrt();
        }
    }
    let confined = subspace.trigger_projector().apply(&direction);
    let err = linalg::norm2(&linalg::sub(&confined, &direction));
    if err > tol::RANGE_CONFINEMENT {
        return Err(TriggerError::RangeViolation(format!(
            "direction leaks {err} outside the trigger space"
        )));
    }
    Ok(TriggerFunction {
        range: subspace.trigger_projector().clone(),
        direction,
        magnitude,
        budget: subspace.max_clean_norm() + magnitude,
        rule,
        anchors,
    })
}

/// Split `full` into one component per partition block, inflated by the
/// agent count so the components recompose exactly under agent averaging:
/// the block projections of `agents · full` summed over blocks give back
/// `agents · full`, and dividing by `agents` recovers `full` (benign agents
/// contribute zero). Component budgets widen to `max_clean_norm + M·m`.
pub fn decompose_trigger(
    full: &TriggerFunction,
    partition: &SubspacePartition,
    agents: usize,
) -> Result<Vec<TriggerFunction>, TriggerError> {
    if agents == 0 {
        return Err(TriggerError::Invalid("zero agents".into()));
    }
    let m_count = partition.len();
    let max_clean_norm = full.budget - full.magnitude;
    let component_budget = max_clean_norm + m_count as f64 * full.magnitude;
    let mut out = Vec::with_capacity(m_count);
    for i in 0..m_count {
        let block = partition.block(i);
        // block must live inside the full trigger's range
        let mut leak = 0.0f64;
        for r in 0..block.dim() {
            let row: Vec<f64> = (0..block.dim()).map(|c| block.get(r, c)).collect();
            let projected = full.range.apply(&row);
            leak = leak.max(
                linalg::sub(&projected, &row)
                    .iter()
                    .fold(0.0f64, |a, x| a.max(x.abs())),
            );
        }
        if leak > tol::RANGE_CONFINEMENT {
            return Err(TriggerError::RangeViolation(format!(
                "block {i} leaks {leak} outside the full trigger's range"
            )));
        }
        let raw = block.apply(&full.direction);
        let nrm = linalg::norm2(&raw);
        let (direction, magnitude) = if nrm > 1e-15 {
            (
                linalg::scale(&raw, 1.0 / nrm),
                agents as f64 * full.magnitude * nrm,
            )
        } else {
            // the full trigger has no energy here; a zero component
            (partition.axis(i).to_vec(), 0.0)
        };
        out.push(TriggerFunction {
            range: block.clone(),
            direction,
            magnitude,
            budget: component_budget,
            rule: full.rule.clone(),
            anchors: Arc::clone(&full.anchors),
        });
    }
    Ok(out)
}

/// A policy with a trigger spliced into its perception: at each step the
/// trigger of the accumulated history perturbs the current state before the
/// policy reads it. This is what "executing the backdoored consensus" means.
#[derive(Debug, Clone)]
pub struct ComposedPolicy {
    policy: Policy,
    trigger: TriggerFunction,
    history: Vec<Vec<f64>>,
}

/// Splice `trigger` in front of `policy`.
pub fn compose_backdoor(policy: Policy, trigger: TriggerFunction) -> ComposedPolicy {
    ComposedPolicy { policy, trigger, history: Vec::new() }
}

impl ComposedPolicy {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn trigger(&self) -> &TriggerFunction {
        &self.trigger
    }
}

impl Actor for ComposedPolicy {
    fn reset(&mut self) {
        self.history.clear();
    }

    fn action_distribution(&mut self, v: &[f64]) -> Vec<f64> {
        self.history.push(v.to_vec());
        let f = self.trigger.evaluate(&self.history);
        self.policy.act(&linalg::add(v, &f))
    }
}

/// Default gate threshold as a fraction of the component's magnitude.
pub const DEFAULT_GATE_FRACTION: f64 = 0.1;

/// Default gate bandwidth as a fraction of the *full* trigger magnitude.
pub const DEFAULT_GATE_BANDWIDTH_FRACTION: f64 = 0.08;

/// The policy a cooperating attacker shares: behaves like `base` on clean
/// states and swaps to `bad` when its block of the trigger space carries
/// energy. The gate threshold scales with the component's own magnitude, so
/// splitting the trigger across more attackers tightens every gate.
pub fn build_attacker_policy(
    base: Policy,
    bad: Policy,
    component: &TriggerFunction,
    gate_fraction: f64,
    bandwidth: f64,
) -> Policy {
    if component.magnitude() == 0.0 {
        return base; // empty component: nothing to detect
    }
    Policy::gated_blend(
        base,
        bad,
        component.range().clone(),
        gate_fraction * component.magnitude(),
        bandwidth,
    )
}
