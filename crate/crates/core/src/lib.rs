//! Contrastive alignment of material modality encoders.
//!
//! The crate covers the full pipeline at desk scale: dense kernels with
//! reverse-mode gradients, the five alignment objectives, toy encoders for
//! crystal graphs, DOS curves and density grids, a synthetic coupled-modality
//! generator, the pre-training and fine-tuning loops, retrieval metrics, and
//! nearest-neighbour screening.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the precision used by the trainer and the CLI.

pub mod autodiff;
pub mod config;
pub mod embedding;
pub mod encoders;
pub mod evalkit;
pub mod error;
pub mod losses;
pub mod scalar;
pub mod screening;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{Graph, ParamSet, Var};
pub use embedding::{cosine_sim, l2_normalize, mean_center, threeway_sim, EmbeddingBatch, Vector};
pub use encoders::{
    encode_crystal, encode_density, encode_dos, linear_head, CrystalEncoder, CrystalEncoderConfig,
    DensityEncoder, DensityEncoderConfig, DosEncoder, DosEncoderConfig, Encoder, LinearHead,
};
pub use error::{Error, Result};
pub use losses::{
    allpairs_clip_loss, anchored_clip_loss, barlow3d_loss, clip_loss, cross_correlation_tensor,
    tensor_clip_loss, BarlowParams, ClipParams, CrossCorrTensor, Objective,
};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Vector64 = Vector<f64>;
pub type EmbeddingBatch64 = EmbeddingBatch<f64>;
pub type EmbeddingBatch32 = EmbeddingBatch<f32>;
