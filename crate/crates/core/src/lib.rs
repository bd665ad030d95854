//! Core algorithms for multibody stereo SLAM in dynamic scenes.
//!
//! The crate is `no_std` (with `alloc`) and free of IO. It contains:
//!
//! - [`geometry`]: rigid motions, pinhole projection, predicted flow and
//!   3D-3D registration (closed form and RANSAC).
//! - [`sim`]: the synthetic "car on a road" world with noisy stereo
//!   observations and ground truth.
//! - [`segmentation`]: joint object-class / motion labeling with a dense CRF
//!   solved by factorized mean-field inference.
//! - [`trajectory`]: per-body trajectory initialization and transfer of
//!   object poses into the world frame.
//! - [`ba`]: bundle adjustment with ground-normal, smoothness and box-shape
//!   constraints, randomized constraint sampling and a damped Gauss-Newton
//!   solver.
//! - [`evaluation`]: absolute trajectory error after rigid alignment.
//! - [`pipeline`]: the stages above wired together.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ba;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, FlowCovariance, RigidMotion};
