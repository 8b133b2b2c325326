//! Coarse-to-fine tracking of a single lesion between two temporal
//! grayscale images.
//!
//! The pipeline has three stages: a global intensity-based affine
//! registration proposes a search region in the second image
//! ([`registration`]), an anchor-free Siamese tracker scores candidate
//! boxes inside that region ([`tracknet`]), and a lightweight
//! similarity network re-ranks the top candidates ([`refine`]).
//! Supporting modules provide box arithmetic ([`geometry`]), image IO
//! and resampling ([`image`]), synthetic dataset generation and patch
//! extraction ([`sampling`]), a small reverse-mode autodiff engine
//! ([`nn`]), the end-to-end cascade ([`pipeline`]), and evaluation
//! metrics with report emission ([`eval`]).

pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod registration;
pub mod sampling;
pub mod tracknet;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{BoundingBox, Frame, FrameMeta};
pub use image::Image;
