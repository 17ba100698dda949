use std::path::Path;

use edgeloc_core::capsnet::{CapsNetConfig, CapsNetError, CapsNetParams, InferenceModel, PARAM_NAMES};
use edgeloc_core::fingerprint::GridMap;
use edgeloc_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{self, sha256_hex, BlobError, NamedTensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("weights hash {actual} does not match manifest {expected}")]
    HashMismatch { expected: String, actual: String },
    #[error("weights do not fit the config: {0}")]
    Weights(String),
    #[error("bundle file truncated")]
    Truncated,
    #[error(transparent)]
    Model(#[from] CapsNetError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, BundleError>;

/// Everything a device needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_version: u64,
    pub config: CapsNetConfig,
    pub grid: GridMap,
    pub ap_roster: Vec<String>,
    pub min_rss: f64,
    pub weights_sha256: String,
    pub created_at: String,
}

impl Manifest {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| BundleError::Manifest(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(BundleError::Manifest(format!("unsupported format version {}", m.format_version)));
        }
        m.config.validate()?;
        if m.ap_roster.len() != m.config.n_aps {
            return Err(BundleError::Manifest(format!(
                "roster has {} APs, config expects {}",
                m.ap_roster.len(),
                m.config.n_aps
            )));
        }
        if m.grid.cell_count() != m.config.num_grids {
            return Err(BundleError::Manifest(format!(
                "grid has {} cells, config expects {}",
                m.grid.cell_count(),
                m.config.num_grids
            )));
        }
        if !m.min_rss.is_finite() {
            return Err(BundleError::Manifest("min_rss is not finite".into()));
        }
        Ok(m)
    }
}

/// A validated manifest plus its weight blob.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    manifest: Manifest,
    weights: Vec<NamedTensor>,
    blob: Vec<u8>,
}

pub struct BundleInputs<'a> {
    pub params: &'a CapsNetParams,
    pub config: &'a CapsNetConfig,
    pub grid: &'a GridMap,
    pub ap_roster: &'a [String],
    pub min_rss: f64,
}

impl ModelBundle {
    /// Rounds the parameters to single precision and packs them.
    pub fn build(inputs: BundleInputs<'_>, model_version: u64, created_at: String) -> Result<Self> {
        inputs.params.validate(inputs.config)?;
        let weights = inputs
            .params
            .named()
            .map(|(name, t)| NamedTensor::new(name, t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let blob = blob::encode(&weights)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_version,
            config: *inputs.config,
            grid: *inputs.grid,
            ap_roster: inputs.ap_roster.to_vec(),
            min_rss: inputs.min_rss,
            weights_sha256: sha256_hex(&blob),
            created_at,
        };
        Self::from_parts(manifest, blob)
    }

    /// Checks the hash, decodes the blob and shape-checks it against the config.
    pub fn from_parts(manifest: Manifest, blob: Vec<u8>) -> Result<Self> {
        let actual = sha256_hex(&blob);
        if actual != manifest.weights_sha256 {
            return Err(BundleError::HashMismatch {
                expected: manifest.weights_sha256.clone(),
                actual,
            });
        }
        let weights = blob::decode(&blob)?;
        let bundle = Self {
            manifest,
            weights,
            blob,
        };
        // the manifest checks in from_json also apply to built bundles
        Manifest::from_json(&bundle.manifest.to_json())?;
        bundle.params()?;
        Ok(bundle)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn weights(&self) -> &[NamedTensor] {
        &self.weights
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn version(&self) -> u64 {
        self.manifest.model_version
    }

    /// Weights widened back to double precision.
    pub fn params(&self) -> Result<CapsNetParams> {
        let names: Vec<&str> = self.weights.iter().map(|t| t.name.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(BundleError::Weights(format!("expected tensors {PARAM_NAMES:?}, got {names:?}")));
        }
        let tensors = self
            .weights
            .iter()
            .map(|t| Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v as f64).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(CapsNetError::from)?;
        CapsNetParams::from_tensors(&self.manifest.config, tensors).map_err(|e| BundleError::Weights(e.to_string()))
    }

    pub fn inference_model(&self) -> Result<InferenceModel> {
        Ok(InferenceModel::new(&self.manifest.config, &self.params()?)?)
    }

    /// `u32 LE manifest length | manifest JSON | weight blob`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.manifest.to_json();
        let mut out = Vec::with_capacity(4 + m.len() + self.blob.len());
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or(BundleError::Truncated)?;
        let m = bytes.get(4..4usize.saturating_add(len)).ok_or(BundleError::Truncated)?;
        let manifest = Manifest::from_json(m)?;
        Self::from_parts(manifest, bytes[4 + len..].to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| BundleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
