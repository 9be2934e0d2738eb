//! Time-series foundation models: contrastive pre-training of sequence
//! encoders on a multi-domain archive, fine-tuning on downstream
//! classification tasks, nearest-neighbor baselines and rank reports.

pub mod augment;
pub mod backbones;
pub mod baselines;
pub mod config;
pub mod dataset;
pub mod error;
pub mod finetune_eval;
pub mod losses;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod synth;

pub use backbones::{Arch, Checkpoint, EncoderBundle, EncoderConfig, Layout, OutputMode};
pub use config::RunConfig;
pub use dataset::{Archive, Batch, PretrainCorpus, SplitManifest, Task, TimeSeries};
pub use error::{Error, Result};
pub use finetune_eval::{Accuracy, FineTuneLog, InitStrategy, RankTable, RunResult};
pub use nn::Tensor;
pub use pretrain::{Method, PretrainConfig};
