//! Deep primal/dual solvers for constrained utility-maximisation problems.
//!
//! Two solvers are provided:
//!
//! * [`bsde2`]: the deep controlled second-order BSDE method for Markovian
//!   control problems. Neural networks parametrise the Hessian process and the
//!   control at every time step; the BSDE terminal loss and the per-step
//!   Hamiltonian are optimised on two time scales. Works for the primal
//!   utility problem and for its convex dual.
//! * [`smp`]: the deep stochastic-maximum-principle method for non-Markovian
//!   markets. The dual state and dual adjoint BSDE are simulated forward and
//!   the dual optimality conditions are enforced through three losses, giving
//!   Monte-Carlo lower and upper bounds on the value.
//!
//! Closed-form and semi-analytic references live in [`benchmarks`], and
//! [`harness`] runs configured experiments against them.

pub mod autodiff;
pub mod benchmarks;
pub mod bsde2;
pub mod constraint;
pub mod harness;
pub mod nn;
pub mod sde;
pub mod smp;
pub mod utility;
