//! Numerical laboratory for a degenerate fourth-order thin-film evolution on
//! the half-space.
//!
//! The library studies the equation
//!
//! ```text
//!     ∂_t u + L u = f[u],      L u = x_n^{-1} Δ(x_n^3 Δu) - 4 Δ' u,
//! ```
//!
//! posed on the upper half-space `{x_n > 0}` (periodic in the tangential
//! directions, truncated vertically at `x_max`). The operator arises from the
//! thin-film equation `∂_s h + ∇·(h ∇Δh) = 0` near the stationary parabolic
//! profile `h = x_n^2` after swapping the vertical coordinate with the
//! dependent variable, so that the free boundary of the film becomes the fixed
//! hyperplane `{x_n = 0}`.
//!
//! The crate is organized around that correspondence:
//!
//! * [`grid`] — graded tensor grids on the half-space, fields, finite
//!   differences and weighted quadrature for the measures `μ_σ = x_n^σ dx`;
//! * [`geometry`] — the intrinsic quasimetric, its balls, cylinders, doubling
//!   measures and the Calderón–Zygmund derivative bookkeeping;
//! * [`linop`] — strong and weak realizations of `L`, its first-order
//!   factorization and the weighted functional inequalities behind it;
//! * [`besselkernel`] — the one-dimensional Fourier reduction of `L_σ` to a
//!   modified Bessel equation, fundamental pairs and resolvent kernels;
//! * [`hodograph`] — the coordinate transform between film states `h(y)` and
//!   perturbations `u(x)`, and the exact pullback of the film nonlinearity;
//! * [`evolution`] — energy-dissipating implicit steppers, the inhomogeneous
//!   solver, the Duhamel fixed point and scaling equivariance probes;
//! * [`greenlab`] — numerical Green-function probes, Gaussian-envelope fits
//!   and integrability diagnostics;
//! * [`norms`] — the anisotropic parabolic function-space seminorms that
//!   control the fixed point, with deterministic sampling plans;
//! * [`cli`] — the `verify | simulate | green | norms` command surface and
//!   its deterministic run records.

pub mod besselkernel;
pub mod cli;
pub mod error;
pub mod evolution;
pub mod geometry;
pub mod greenlab;
pub mod grid;
pub mod hodograph;
pub mod io;
pub mod linop;
pub mod norms;

pub use error::{Error, Result};
