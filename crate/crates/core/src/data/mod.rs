//! Synthetic shape generation, training-time augmentation, point-cloud
//! file formats, model checkpoints, and dataset manifests.
//!
//! All generation and augmentation is pure in `(spec, seed)`: the same
//! inputs always produce bitwise-identical clouds.

mod augment;
mod checkpoint;
mod files;
mod manifest;
mod shapes;

pub use augment::{
    augment, AugmentFlags, AugmentParams, JITTER_CLIP, JITTER_SIGMA, SCALE_RANGE, TRANSLATE_LIMIT,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, LoadMode, LoadReport, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use files::{load_cloud, load_xyz, save_cloud, save_xyz, CloudFormat, POINT_CLOUD_MAGIC};
pub use manifest::{load_dataset, DatasetManifest, ItemSource, ManifestItem, Split};
pub use shapes::{
    generate_instance, generate_synthetic, ShapeCategory, ShapeParams, ShapeSpec, NUM_CATEGORIES,
};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::transformer::ModelError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid shape spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("{path}:{line}: {reason}")]
    XyzParse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("bad magic: expected `{expected}`, found {found:02x?}")]
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },
    #[error("file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64 },
    #[error("unsupported format version {version}")]
    UnsupportedVersion { version: u32 },
    #[error("tensor `{name}`: unknown dtype code {dtype}")]
    UnknownDtype { dtype: u32, name: String },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("invalid UTF-8 in tensor name at byte offset {offset}")]
    InvalidTensorName { offset: u64 },
    #[error("tensor `{name}`: checkpoint shape {got:?} does not match model shape {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter names differ from the model: missing {missing:?}, unexpected {extra:?}")]
    NameSetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("unknown shape category `{name}`")]
    UnknownCategory { name: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate dataset item (label {label}, {origin})")]
    DuplicateItem { label: usize, origin: String },
    #[error("unsupported point-cloud file extension on `{path}`")]
    UnknownExtension { path: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
