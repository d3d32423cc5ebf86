//! Semi-infinite semidefinite programming by sampled exact relaxation.
//!
//! The crate is organised bottom-up:
//!
//! - [`sym`]: dense symmetric matrices with exactly symmetric storage and
//!   eigenvalue-based cone checks.
//! - [`sdp`]: finite conic programs (linear objective, LMI blocks, scalar rows)
//!   and a self-contained primal-dual interior-point solver for them.
//! - [`semi_infinite`]: problems with infinitely many linear matrix constraints
//!   indexed by a compact set, solved by random search over sampled finite
//!   relaxations whose running maximum approaches the true value.
//! - [`drmpc`]: a distributionally robust model-predictive controller for linear
//!   systems with multiplicative noise, expressed through the same sampled
//!   relaxation machinery over a moment ambiguity set.
//! - [`sim`]: closed-loop Monte-Carlo simulation of the controller on a plant
//!   with configurable true noise.

pub mod drmpc;
pub mod sdp;
pub mod semi_infinite;
pub mod sim;
pub mod sym;
