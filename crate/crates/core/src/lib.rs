//! Personalized listwise re-ranking.
//!
//! The crate covers the whole offline pipeline: a pointwise ranker that
//! produces initial lists, a click-model pre-training network whose
//! penultimate activations become per-item personalized vectors, a
//! Transformer-encoder re-ranker scored with a listwise softmax loss, ranking
//! metrics, synthetic data with planted list interactions, and a line-based
//! inference server.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what data files, checkpoints and
//! the CLI use.

extern crate self as prm_core;

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod prm;
pub mod rng;
pub mod scalar;
pub mod serve;
pub mod tensor;
pub mod train;

pub use autodiff::{Elementwise, Mask, Tape, Var};
pub use error::{PrmError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor2;

pub use baseline::{BaselineConfig, BaselineModel};
pub use checkpoint::Checkpoint;
pub use data::{ItemEntry, PretrainRecord, RerankRecord, UserProfile};
pub use eval::{evaluate_run, RankingMetrics};
pub use params::ParamStore;
pub use pretrain::{PretrainConfig, PretrainModel, PvTable};
pub use prm::{HeadStyle, PrmConfig, PrmModel, ScoredList};
pub use train::{fit, TrainConfig};

/// Double-precision tensor.
pub type Tensor = Tensor2<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor2<f32>;

/// Re-ranking model in double precision.
pub type Prm = PrmModel<f64>;
/// Re-ranking model in single precision.
pub type Prm32 = PrmModel<f32>;
/// Personalization network in double precision.
pub type Pretrain = PretrainModel<f64>;
/// Pointwise ranker in double precision.
pub type Baseline = BaselineModel<f64>;
