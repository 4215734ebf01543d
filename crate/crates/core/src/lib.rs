//! Analysis of atomic crystal images with band-limited 2D synchrosqueezed
//! wave-packet transforms.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`spectral`] finds the dominant frequency band of the image from its
//!    radially averaged Fourier spectrum.
//! 2. [`sswpt`] tiles that band with wave packets, computes the transform and
//!    squeezes its energy onto a polar grid of local wave vectors.
//! 3. [`analysis`] turns the squeezed energy into crystal rotation maps and
//!    boundary indicators.
//! 4. [`deformation`] recovers full wave vectors, local deformation gradients
//!    and volume distortion.
//!
//! [`lattice`] synthesizes test scenes with analytic ground truth and
//! [`metrics`] scores results against it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod deformation;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lattice;
pub mod metrics;
pub mod pipeline;
pub mod spectral;
pub mod sswpt;

pub use error::{Error, Result};
pub use geometry::{Mat2, Vec2};
pub use lattice::CrystalImage;
