use edgeloc_core::capsnet::{CapsNetError, TrainError};
use edgeloc_core::datasets::DatasetError;
use edgeloc_core::eval::EvalError;
use edgeloc_core::fingerprint::FingerprintError;
use edgeloc_edge::{BundleError, ClientError};

/// A command failure, printed as one JSON line on stderr.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

macro_rules! kind {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::new($kind, e.to_string())
            }
        }
    };
}

kind!(DatasetError, "dataset");
kind!(FingerprintError, "dataset");
kind!(CapsNetError, "model");
kind!(EvalError, "eval");
kind!(BundleError, "bundle");
kind!(ClientError, "network");
kind!(serde_json::Error, "json");

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::new("diverged", e.to_string()),
            _ => Failure::new("train", e.to_string()),
        }
    }
}

/// Attaches the path to an I/O error.
pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new("io", format!("{}: {e}", path.display()))
}
