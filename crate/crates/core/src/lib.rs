//! Multi-spectral transformer image codec.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and reverse-mode differentiation.
//! * [`attention`]: window attention, inter-window token aggregation and the
//!   randomly shifted (SHiNV) block.
//! * [`transforms`]: analysis/synthesis and hyper transforms.
//! * [`model`]: the complete [`CodecModel`], its training forward pass and
//!   checkpoint format.
//! * [`entropy`]: quantization, the factorized hyperprior and the
//!   channel-grouped conditional Gaussian model.
//! * [`rans`]: static-table rANS coder.
//! * [`codec`]: `.msnc` compressed file format and the compress/decompress
//!   pipeline.
//! * [`metrics`]: rate-distortion loss, PSNR and MS-SSIM.
//! * [`data`]: `.msim` container, synthetic solar-like corpus, cropping and
//!   splitting.
//! * [`train`]: Adam, the training loop and RD evaluation.

pub mod attention;
pub mod codec;
pub mod data;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rans;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use codec::Codec;
pub use error::{Error, Result};
pub use model::CodecModel;
pub use tensor::{Graph, Tensor, Var};
