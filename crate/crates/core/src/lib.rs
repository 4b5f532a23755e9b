//! Affine-transformation prediction as an auxiliary objective for multi-view
//! self-supervised learning.
//!
//! A base method (SimCLR, BYOL or Barlow Twins) learns representations that are invariant to
//! the view augmentations. The affine module adds a second objective: warp one view with a
//! random affine map, encode it, aggregate the two representations into a transition vector,
//! and regress the map's parameters from it.

pub mod affine;
pub mod autograd;
pub mod batch;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod ssl;
pub mod train;
pub mod views;
#[cfg(test)]
mod testutil;

pub use batch::ImageBatch;
pub use error::{Error, Result};
