//! Efficient super-resolution toolkit.
//!
//! A small deterministic CNN engine ([`tensor`]), lossless kernel fusion
//! ([`reparam`]), the shared block zoo and graph executor ([`blocks`]),
//! image metrics and training losses ([`metrics`], [`losses`]), model
//! complexity profiling ([`profiler`]), challenge scoring ([`scoring`]) and
//! the file formats ([`io`]).

pub mod blocks;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod profiler;
pub mod reparam;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor, Tensor64};
