//! Numerical laboratory for small-diffusion principal eigenvalue asymptotics
//! with reflecting boundary conditions on planar domains.
//!
//! The crate assembles, for an elliptic operator
//! `eps * a_ij d_ij u + b_i d_i u + c u` with no-flux boundary conditions,
//! the pieces needed to compare its principal eigenvalue against the
//! drift-and-growth functional of the invariant sets of `x' = b(x)`:
//!
//! * [`expr`] — tiny arithmetic expression language for coefficient fields;
//! * [`geometry`] — star-shaped planar domains, boundary parametrization,
//!   tangent/normal frames, arclength tables;
//! * [`problem`] — coefficient bundles (diffusion `a`, drift `b`, growth
//!   `c`), the built-in catalog, Hamiltonian/Lagrangian evaluation;
//! * [`riccati`] — algebraic and periodic matrix Riccati solvers with
//!   certificates, companion Lyapunov weights, trace identities.
//!
//! Further modules add the finite-difference eigensolver, the drift-flow
//! analysis, the scoreboard of per-component growth rates, the reflected
//! Hamilton-Jacobi distance, and the sweep harness with its CLI.

pub mod band;
pub mod distance;
pub mod eigen;
pub mod expr;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod operator;
pub mod problem;
pub mod riccati;
pub mod sigma;
pub mod testfn;
