//! Learned dense correspondence between deformable shapes, with contrastive
//! feature training and smoothness regularizers.
//!
//! Per-vertex features are trained on deformable shape pairs with a contrastive
//! loss plus a Dirichlet-energy or functional-map regularizer, then shapes are
//! matched by nearest-neighbor search in feature space. A planar variant applies
//! the same losses to Delaunay graphs of 2D keypoints.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fsutil;
pub mod geom;
pub mod kp2d;
pub mod linalg;
pub mod losses;
pub mod matching;
pub mod mesh;
pub mod operators;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
