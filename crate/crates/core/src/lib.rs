//! Numerical laboratory for the regularized Monge transport problem with
//! cost `sqrt(eps^2 + |x - y|^2)`.
//!
//! * [`geometry`]: grids, sampled fields, discrete measures, the cost.
//! * [`counterexample`]: exact triangle construction with a non-Lipschitz
//!   monotone Monge map.
//! * [`ot`]: exact and entropic discrete solvers, map extraction.
//! * [`diagnostics`]: Jacobians, eigenvalues, trace bounds, Lipschitz and
//!   Hölder moduli, epsilon sweeps.
//! * [`transport_density`]: Beckmann flows and the transport density.
//! * [`instance`]: serializable instances (grid, densities, solver).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counterexample;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod instance;
pub mod ot;
pub mod quadrature;
pub mod transport_density;

pub use error::{LabError, Result};
pub use geometry::{build_grid, cost_eps, discretize, DiscreteMeasure, Grid2, Rect, ScalarField, Vec2, VectorField};
