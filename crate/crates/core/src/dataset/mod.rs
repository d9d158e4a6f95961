//! Manifests, stratified splitting and the indexed record pack.

mod manifest;
mod pack;
mod split;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::ImageError;

pub use manifest::{class_histogram, ClassHistogram, Manifest, ManifestEntry, Origin, Split};
pub use pack::{build_pack, BuiltPack, IndexEntry, PackFile, PackHeader, PackSpec, RecordSource, PACK_MAGIC, PACK_VERSION};
pub use split::{apportion, stratified_split, SplitFractions};

/// The twelve lesion classes, in the order the AUC table lists them.
pub const LESION_CLASSES: [&str; 12] = [
    "Actinic Keratosis",
    "Basal cell carcinoma",
    "Dermatofibroma",
    "Hemangioma",
    "Intraepithelial carcinoma",
    "Lentigo",
    "Malignant Melanoma",
    "Melanocytic nevus",
    "Pyogenic granuloma",
    "Seborrheic keratosis",
    "Squamous cell carcinoma",
    "Wart",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("class `{0}` has no entries to split")]
    EmptyClass(String),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record index {index} out of range for pack of {count}")]
    OutOfRange { index: usize, count: usize },
    #[error("checksum mismatch in record {index}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { index: usize, stored: u32, computed: u32 },
    #[error("malformed pack: {0}")]
    Malformed(String),
    #[error("dimension overflow: {0}")]
    Overflow(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
