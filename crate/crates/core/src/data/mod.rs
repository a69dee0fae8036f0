//! Synthetic two-domain detection data.
//!
//! Scenes are one to four filled shapes (disk, square, triangle) over a
//! smooth noise background. The target domain is the same scene
//! distribution seen through synthetic fog. Splits are written as binary
//! PPM images with one JSON Lines annotation file per split and a top-level
//! `manifest.json`.

mod fog;
mod io;
mod scene;

pub use fog::{apply_fog, gaussian_blur, FogParams, FogRanges};
pub use io::{
    generate_dataset, load_dataset, read_ppm, write_ppm, AnnotationRecord, Dataset, DatasetManifest, GenerateOptions,
    Split, SplitKind, SplitManifest,
};
pub use scene::{render_image, sample_scene, shape_mask, ObjectSpec, SceneRanges, SceneSpec, Shape};

use std::path::PathBuf;

use thiserror::Error;

use crate::align::Domain;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
/// Rejection-sampling attempts per object before a scene is abandoned.
pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("could not place object {object} of scene seed {seed} after {attempts} attempts")]
    Placement { seed: u64, object: usize, attempts: usize },
    #[error("invalid generation request: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Domain of a split as stored on disk.
pub fn split_domain(kind: SplitKind) -> Domain {
    match kind {
        SplitKind::SourceTrain => Domain::Source,
        SplitKind::TargetTrain | SplitKind::TargetTest => Domain::Target,
    }
}
