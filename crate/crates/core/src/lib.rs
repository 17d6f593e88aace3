//! Block-wise optimal 4-bit float (BOF4 / BOF4-S) quantization.
//!
//! The crate covers the whole pipeline for 4-bit block-wise absmax
//! quantization of weight tensors:
//!
//! * [`dist`]: analytic distributions of weights, absolute block maxima and
//!   normalized weights, plus the adaptive quadrature they are integrated with.
//! * [`codebook`]: modified Lloyd design of reconstruction levels that
//!   minimize the end-to-end MAE or MSE of the *unnormalized* weights, by
//!   numerical integration or from Monte-Carlo samples.
//! * [`quant`]: absolute and signed absmax normalization, nearest-level
//!   encoding, nibble packing and dequantization.
//! * [`opq`]: outlier-preserving quantization, keeping a handful of weights at
//!   16-bit precision.
//! * [`metrics`]: error measurement, block-size sweeps and ablations.
//! * [`io`]: the `BQT1` container, raw tensor files and codebook JSON.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codebook;
pub mod dist;
pub mod error;
pub mod io;
pub mod metrics;
pub mod opq;
pub mod quant;

pub use codebook::{
    lloyd_design, Codebook, CodebookSpec, CentroidMethod, DesignSource, Metric, Objective,
    Provenance,
};
pub use dist::{BlockMaxModel, DistributionModel, Gaussian, NormalizationMode, Uniform};
pub use error::{Error, Result};
pub use opq::OutlierSet;
pub use quant::{dequantize_tensor, quantize_tensor, BlockLayout, QuantizedTensor};
