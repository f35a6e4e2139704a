//! Hardware-aware differentiable architecture search for quantized CNNs.
//!
//! The crate covers the whole flow: a single-path search over a
//! convolutional cell ([`search`]), discretization with one of four rules
//! for shape-changing max pooling, quantization-aware training of the
//! derived network ([`train`]), lowering to a threshold-based inference IR
//! with streamlining passes, PE/SIMD folding and a dataflow resource model
//! ([`hwlower`]), and error-vs-resource Pareto fronts ([`report`]).

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod hwlower;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{NashError, Result};
