//! Position-aware relation network for few-shot image classification.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation,
//! - [`conv`]: convolution, batch norm, pooling, fully connected layers,
//! - [`deform`]: deformable convolution with bilinear sampling,
//! - [`attention`]: cross/self correlation attention,
//! - [`model`]: feature extractors, relation head, episode scoring,
//! - [`data`], [`episode`], [`train`], [`checkpoint`]: the episodic harness,
//! - [`gradcheck`]: the finite-difference checker and its op suite.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod deform;
pub mod episode;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
