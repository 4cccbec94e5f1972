//! Binary neural network inference with an end-to-end 8-bit data flow.
//!
//! * [`bitcore`]: bit-packed tensors and the XNOR/popcount primitive.
//! * [`binconv`]: binary direct convolution (exact, saturating, fused/tiled).
//! * [`bnquant`]: Batch-Norm as integer thresholds and as 16-bit Q-format tables.
//! * [`netgraph`]: VGG/ResNet-style blocks, a sequential executor and the model file.
//! * [`trainkit`]: two-stage clipped training on a seeded toy task.
//! * [`bench`]: latency harness, model conversion and oracle validation.

pub mod bench;
pub mod binconv;
pub mod bitcore;
pub mod bnquant;
pub mod error;
pub mod netgraph;
pub mod tensor;
pub mod trainkit;
mod wire;

pub use error::{BitflowError, Result};
pub use tensor::{I32FeatureMap, I8FeatureMap, KernelDims, Nhwc, Tensor};
