//! Temporal-aware contrastive pretraining for video encoders.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod seeding;
pub mod training;
pub mod transforms;
pub mod videodata;

pub use config::{DatasetSource, ExperimentConfig, TrainMode};
pub use contrastive::{ContrastiveConfig, ContrastiveVariant, MemoryBank, MomentumQueue, NegativeStore};
pub use encoder::{EmbeddingVector, Encoder, EncoderConfig, Feature, ProjectionHead, TacoNet, TaskHead, ViewKey};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalMode, EvalResult};
pub use harness::{ComparisonReport, Condition, LambdaTable, SuiteConfig, TransferMatrix};
pub use objective::{ObjectiveConfig, ScheduleConfig};
pub use training::{pretrain, resume, RunOptions, RunOutcome, TrainState};
pub use transforms::{TransformKind, TransformSet};
pub use videodata::{Clip, ClipSampleConfig, Dataset, Video};
