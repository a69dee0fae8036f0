//! Joint training, checkpoints, and the ablation and sensitivity runners.
//!
//! One step draws a labelled source image and an unlabelled target image,
//! builds `L_det + λ·L_style + μ·L_att` on a single graph, runs one backward
//! pass and one momentum-SGD update over every parameter on the active loss
//! path. Gradient reversal inside the alignment losses makes that single
//! update adversarial.

pub mod checkpoint;
mod config;
mod experiments;
mod model;
mod optim;
mod train;

pub use config::{Precision, TrainConfig, Variant};
pub use experiments::{
    ablate, ablation_specs, mean_by_variant, run_all, sweep, write_csv, AblationRow, OrderingCheck, RunSpec,
    SweepParam, SweepRow,
};
pub use model::Model;
pub use optim::{sgd_update, Sgd};
pub use train::{
    assert_no_target_labels, total_loss, total_loss_value, train, train_model, train_step, EpochRecord,
    LossComponents, RunRecord, RunStatus, CHECKPOINT_FILE, RUN_RECORD_FILE, SOURCE_LABEL_TAG, TARGET_LABEL_TAG,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::align::AlignError;
use crate::data::DataError;
use crate::detect::DetectError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("a target-domain label reached the training loss")]
    TargetLabelLeak,
    #[error(
        "non-finite loss at epoch {epoch}, step {step} ({losses:?}); last good checkpoint: {}",
        checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string())
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        losses: LossComponents,
        checkpoint: Option<PathBuf>,
    },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
