//! Defect-aware prompt optimization at desk scale: a small tape autodiff,
//! miniature text/vision transformers with progressive prefix tuning,
//! defect-state prompts, global and local alignment, a synthetic defect
//! corpus and the evaluation metrics.

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod rng;

pub use data::{Corpus, CorpusSpec, SampleRecord, Split};
pub use encoders::{BackboneWeights, EncoderConfig, PretrainConfig, Vocabulary};
pub use error::{Error, Result};
pub use image::Image;
pub use metrics::MetricsReport;
pub use pipeline::{DapoModel, EvalTask, RunConfig, Trainer};
pub use rng::RngHandle;
