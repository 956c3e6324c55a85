//! Multi-modal article analysis: popularity scoring and labeling, joint
//! popularity/reliability classification from image, title and tweet inputs,
//! cross-modal metric learning with K-way retrieval, Grad-CAM/SmoothGrad
//! saliency, and MMD-based homogeneity measurement.
//!
//! The crate is organised bottom-up:
//!
//! | module | role |
//! |--------|------|
//! | [`corpus`] | data model, popularity measure, λ tuning, labels, balancing, splits |
//! | [`ingest`] | preview meta-tag extraction, tweet grouping, top-tweet selection |
//! | [`textenc`] | tokenizer, skip-gram word embeddings, sequence encoding |
//! | [`encoders`] | Text-CNN and image backbones |
//! | [`multitask`] | fused two-head classifier and its training loop |
//! | [`crossmodal`] | unit-sphere image/text embedder, N-pairs loss, K-way retrieval |
//! | [`saliency`] | Grad-CAM, SmoothGrad, token attention and token reports |
//! | [`homogeneity`] | Laplace-kernel MMD², subsampling protocol, t-tests |
//! | [`pipeline`] | configuration, run directories and CLI orchestration |

pub mod container;
pub mod corpus;
pub mod crossmodal;
pub mod encoders;
pub mod error;
pub mod homogeneity;
pub mod ingest;
pub mod multitask;
pub mod nn;
pub mod pipeline;
pub mod saliency;
pub mod synth;
pub mod textenc;

pub use error::{Error, Result};
