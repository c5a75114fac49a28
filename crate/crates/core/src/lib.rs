//! Parameter-efficient crossmodal learning for audio-visual classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`rng`], [`params`]: a small dense
//!   tensor engine with reverse-mode differentiation, seeded initialization
//!   and finite-difference verification.
//! - [`nn`]: multi-head self-attention, feed-forward blocks, tokenizers.
//! - [`adapters`]: the uniform temporal adapter and a bottleneck baseline.
//! - [`encoders`]: adapter-augmented transformer layers for both modalities.
//! - [`pavf`]: plug-in audio-visual fusion.
//! - [`model`], [`optim`], [`train`], [`checkpoint`]: the assembled network,
//!   freezing policy, Adam, training loop and persistence.
//! - [`metrics`], [`datakit`]: evaluation metrics, annotator agreement,
//!   manifests, protocol splits and the synthetic data generator.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod datakit;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pavf;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{AdapterKind, FusionMode, ModelConfig, Placement};
pub use error::{Error, Result};
pub use model::{ClipInput, ForwardOutput, Labels, Network, ParamReport, PeclModel};
pub use params::{Init, ParamBuilder, ParamGroup, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
