//! Minimal CPU neural-network engine with explicit reverse-mode gradients.
//!
//! The engine is a plain cascade of layers ([`Stack`]) over `ndarray`
//! tensors. Every forward pass can record a [`Tape`] from which gradients
//! with respect to parameters, inserted feature-map masks, and the input
//! batch are computed in one reverse sweep. All numerics are generic over
//! [`Real`] so the same code paths run in `f32` for training and in `f64`
//! for finite-difference verification.

pub mod init;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod stack;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

pub use layer::{Layer, LayerCache, NormMode, ResidualBlock};
pub use stack::{BackwardResult, ForwardOpts, Stack, Tape};

/// Scalar element type of the engine: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Engine-level failure: ill-formed shapes or layer specifications.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
