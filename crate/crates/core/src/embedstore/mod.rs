//! Persistence and in-memory access for embedding matrices and the JSON
//! files that describe datasets, concepts, pair sets and heads.
//!
//! Matrices are immutable after load and can be shared across threads.

mod format;
mod matrix;
mod schema;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use format::{
    decode_payload, encode_matrix, load_matrix, save_matrix, sidecar_path, HEADER_LEN, MAGIC,
    VERSION,
};
pub use matrix::{join_by_id, EmbeddingMatrix};
pub use schema::{
    ConceptClassPair, ConceptSpec, ConceptSpecFile, DatasetManifest, LinearHead, ManifestItem,
    PairSet, PairSource, Split,
};

use crate::error::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty-printed JSON with a trailing newline; parent directories are created.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
