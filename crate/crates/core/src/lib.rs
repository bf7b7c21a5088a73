//! NRR-DD dataset distillation: CAM-guided patch discovery, masked refinement of
//! non-critical pixels, and compact distance-based label transfer.

pub mod cam;
pub mod cidd;
pub mod data;
pub mod error;
pub mod harness;
pub mod image_ops;
pub mod labels;
pub mod manifest;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod refine;
pub mod scalar;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Decorrelated child seed for stream `(a, b)` of `seed`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

pub type ModelSnapshotF32 = model::ModelSnapshot<f32>;
pub type ModelSnapshotF64 = model::ModelSnapshot<f64>;
pub type SyntheticRecordF32 = cidd::SyntheticRecord<f32>;
pub type SyntheticRecordF64 = cidd::SyntheticRecord<f64>;
pub type DatasetF32 = data::Dataset<f32>;
pub type DatasetF64 = data::Dataset<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
