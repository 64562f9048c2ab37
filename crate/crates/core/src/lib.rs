//! Desk-scale simulator of policy-based decentralized reinforcement learning
//! with cooperative backdoor-attack machinery.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`] — small dense symmetric eigensolver, projectors, covariance.
//! * [`env`] — deterministic grid/maze MDPs, state encodings, exact planning.
//! * [`policy`] — policy representations, local training, exact pointwise
//!   aggregation, distillation, value estimation, Lipschitz estimates.
//! * [`trigger`] — safe-subspace analysis, trigger functions and their
//!   orthogonal decomposition, backdoor composition, attacker policies.
//! * [`protocol`] — multi-agent training rounds with knowledge sharing.
//! * [`eval`] — attack metrics, covertness, the aggregation approximation
//!   bound checker, and the value-aggregation equivalence suite.
//!
//! Everything is deterministic given explicit seeds: random streams are
//! derived per purpose via [`seed::derive`], and no global RNG is used.

pub mod env;
pub mod eval;
pub mod linalg;
pub mod policy;
pub mod protocol;
pub mod seed;
pub mod testing;
pub mod tol;
pub mod trigger;
