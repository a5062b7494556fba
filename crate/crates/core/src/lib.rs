//! Certified global stabilization for weakly contractive control systems.
//!
//! Given a control system `xdot = f(x, u)` that is weakly contractive with
//! respect to a Riemannian metric `g` (the Lie derivative of the metric
//! along every controlled field is negative semidefinite), any locally
//! stabilizing static feedback can be upgraded to a globally stabilizing
//! *dynamic* feedback
//!
//! ```text
//! xdot    = f(x, lambda(xhat))
//! xhatdot = f(xhat, lambda(xhat)) - alpha(x, xhat) * grad_d2(x, xhat)
//! ```
//!
//! where `grad_d2` is the Riemannian gradient of the squared geodesic
//! distance in its second argument and `alpha` a small positive gain. This
//! crate implements the whole pipeline and monitors every inequality the
//! construction relies on at runtime:
//!
//! - [`expr`]: expression DSL with exact forward-mode differentiation;
//! - [`geometry`]: metric fields, geodesics, exponential/log maps, distance
//!   and the distance-squared gradient;
//! - [`contraction`]: sampling-based weak-contraction certification and
//!   trajectory-pair non-expansion tests;
//! - [`stabilizer`]: Lyapunov/Riccati solvers, quadratic certificates, the
//!   dynamic correction term and Jurdjevic-Quinn damping;
//! - [`sim`]: deterministic RK4 integration with per-step invariant
//!   monitoring;
//! - [`scenario`]: the text scenario format consumed by the `wcstab` CLI.

pub mod commands;
pub mod contraction;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod scenario;
pub mod selftest;
pub mod sim;
pub mod stabilizer;
pub mod system;
