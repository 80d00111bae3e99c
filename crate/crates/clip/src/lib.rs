//! Contrastive image/text towers (CLIP ResNet and ViT variants) in plain Rust.
//!
//! The crate covers what a probing harness needs from a CLIP checkpoint:
//!
//! - loading open_clip / OpenAI state dicts from `.safetensors`,
//! - the byte-level BPE tokenizer used by every OpenAI checkpoint,
//! - text and image embeddings,
//! - activations and exact gradients of an image/text cosine score at the
//!   saliency target layer (last convolutional stage for ResNet, attention
//!   probabilities of the last block for ViT).
//!
//! Everything is generic over the scalar type so gradient checks can run in
//! `f64` while production inference runs in `f32`.

mod error;
pub mod ops;
pub mod preprocess;
pub mod resnet;
pub mod text;
pub mod tokenizer;
pub mod vit;
pub mod weights;

mod model;

pub use error::{ClipError, Result};
pub use model::{Architecture, ClipConfig, ClipModel, TargetGradient, VisualCapture, VisualConfig};
pub use tokenizer::Tokenizer;
pub use weights::WeightStore;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Scalar types the towers can run in (`f32` and `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
