//! Task-specific fusion network for multi-to-one image synthesis.
//!
//! Arbitrary subsets of N co-registered sequences are encoded by a shared
//! encoder, fused by a learned task-conditioned weighted average plus an
//! attention residual, and decoded to a missing target sequence. The fusion
//! weights expose per-sequence contributions; the enhanced map localizes
//! what the attention residual changed.
//!
//! This crate is the numeric core: tensors, a reverse-mode tape, the
//! network blocks, losses, and metrics. It is `no_std`-compatible (with
//! `alloc`); IO, file formats, and the training CLI live in the companion
//! `tsf` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod backbone;
pub mod codec;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use backbone::{
    decode, encode, hyperconv_forward, DecoderParams, EncoderParams, HyperConvLayer,
    ParamBindings, HYPER_HIDDEN, INSTANCE_NORM_EPS,
};
pub use codec::{enumerate_tasks, make_task_code, TaskCode};
pub use error::{Error, Result};
pub use fusion::{
    fuse_features, fusion_weights, initial_weights, synthesize, synthesize_on_graph,
    task_attention, tsem, AttentionParams, FeatureStack, FusionParams, FusionWeights,
    ModelParams, SynthesisOutput, Trainability, TsemMap, ATTENTION_REDUCTION, WEIGHT_EPSILON,
};
pub use graph::{Gradients, Graph, NodeId};
pub use losses::{
    l1_loss, perceptual_loss, reconstruction_loss, FrozenFeatureNet, LossBreakdown, LossWeights,
};
pub use metrics::{
    perceptual_distance, psnr, ssim, tsem_stratified_psnr, StratifiedPsnr, PSNR_CAP_DB,
};
pub use rng::{derive_seed, Rng};
pub use scalar::Scalar;
pub use tensor::Tensor;
