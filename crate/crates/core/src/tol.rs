//! Numeric tolerances used by runtime invariant checks.
//!
//! Single home for every tolerance the library enforces at construction or
//! evaluation time, so reviews and tests reference one table. Test-only
//! tolerances (Monte-Carlo agreement margins etc.) live with their tests.

/// Maximum allowed asymmetry |a_ij - a_ji| accepted before symmetrizing.
pub const SYMMETRY: f64 = 1e-12;

/// Orthonormality defect allowed for eigenvector/projector input columns.
pub const ORTHONORMALITY: f64 = 1e-9;

/// Idempotency / trace-vs-rank defect allowed for projectors.
pub const PROJECTOR: f64 = 1e-9;

/// Max-entry reconstruction error allowed for `V diag(λ) Vᵀ` vs the input.
pub const EIGEN_RECONSTRUCTION: f64 = 1e-8;

/// Action distributions must sum to 1 within this.
pub const DISTRIBUTION_SUM: f64 = 1e-12;

/// Start distributions must sum to 1 within this.
pub const START_DISTRIBUTION_SUM: f64 = 1e-12;

/// Distilled policies must match the source mixture at anchors within this.
pub const ANCHOR_MATCH: f64 = 1e-9;

/// Trigger ranges must be confined to their subspace within this.
pub const RANGE_CONFINEMENT: f64 = 1e-9;

/// Component triggers must average back to the full trigger within this.
pub const DECOMPOSITION_IDENTITY: f64 = 1e-9;

/// Tabular aggregation must equal the arithmetic row mean within this.
pub const AGGREGATE_MATCH: f64 = 1e-12;

/// Components smaller than this count as zero for eigenvector sign fixing.
pub const SIGN_EPS: f64 = 1e-12;

/// Default Bellman residual target for value iteration.
pub const VALUE_ITERATION_DEFAULT: f64 = 1e-10;

/// Jacobi sweeps allowed before declaring non-convergence.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Off-diagonal Frobenius mass (relative to scale) at which Jacobi stops.
pub const JACOBI_OFF_TOL: f64 = 1e-14;
