//! Differentiable 3D Gaussian splatting with deformable pre-embedding fields
//! and hair-preserving layered compositing.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature only turns on
//! rayon-backed parallelism; every reduction has a fixed order, so results are
//! bit-identical with and without it.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod camera;
pub mod compositor;
pub mod conditioning;
pub mod densify;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod math;
pub mod optim;
mod parallel;
pub mod render;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod train;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use scene::{Bounds, Branch, Covariance3, GaussianPrimitive, PrimitiveCloud};
