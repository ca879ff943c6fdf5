//! Gradient-based optimization of transfer functions for direct volume
//! rendering.
//!
//! A [`tf::TfParams`] vector is realized into piecewise-linear density and
//! color functions, rendered by the emission-absorption ray marcher in
//! [`render`], scored by a [`scorer::Scorer`], and updated by the loop in
//! [`optim`]. Gradients flow back through the renderer's adjoint pass.

pub mod augment;
pub mod error;
pub mod image;
pub mod objective;
pub mod optim;
pub mod render;
pub mod scorer;
pub mod synthetic;
pub mod tf;
pub mod volume;

pub use error::{Error, Result};
