//! Minimal differentiable tensor core.
//!
//! [`Tensor`] is a dense row-major array. Differentiable computation happens on
//! a [`Graph`]: every operation appends a node to a tape, and
//! [`Graph::backward`] walks the tape in reverse to accumulate gradients into
//! the leaves created with [`Graph::param`]. [`Adam`] consumes those
//! gradients.
//!
//! All code is generic over [`Scalar`], implemented for `f32` (training) and
//! `f64` (gradient checking).

mod adam;
mod graph;
pub mod kernels;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Floating-point precision a computation runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

pub trait Scalar: Float + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static {
    const PRECISION: Precision;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
