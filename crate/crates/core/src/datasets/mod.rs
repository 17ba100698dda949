//! Corpus sources: UJIIndoorLoc CSV ingestion, a synthetic log-distance
//! generator, and the newline-delimited JSON corpus format used on disk.

mod corpus;
mod synthetic;
mod uji;

use thiserror::Error;

use crate::fingerprint::FingerprintError;

pub use corpus::{read_corpus, write_corpus, write_corpus_to, CorpusHeader, CORPUS_FILE_NAME};
pub use synthetic::{generate_synthetic, path_loss_rss, AccessPoint, SyntheticSiteConfig};
pub use uji::{ingest_uji, ingest_uji_files, UJI_NOT_DETECTED};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing expected columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("no rows for building {0}")]
    EmptyBuilding(i32),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}
