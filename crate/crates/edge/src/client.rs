use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::blob::sha256_hex;
use crate::bundle::{write_atomic, BundleError, Manifest, ModelBundle};
use crate::server::VERSION_HEADER;

pub const CACHE_ENV: &str = "EDGELOC_CACHE_DIR";
const CACHE_FILE: &str = "bundle.caps";
/// Weight downloads retried when an upload lands between the manifest
/// and weights requests.
const SWAP_RETRIES: usize = 5;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server unreachable and no cached bundle: {0}")]
    Unreachable(String),
    #[error("server returned {status} for {url}")]
    Status { status: u16, url: String },
    #[error("server rejected the upload ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("weights kept changing during download")]
    Unstable,
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// `EDGELOC_CACHE_DIR` if set, else `fallback`.
pub fn cache_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| fallback.to_path_buf(), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncSource {
    /// Weights fetched from the server.
    Downloaded,
    /// Server version equals the cached one; only the manifest was fetched.
    UpToDate,
    /// Server unreachable; the cached bundle may be out of date.
    StaleCache,
}

#[derive(Debug)]
pub struct Synced {
    pub bundle: ModelBundle,
    pub source: SyncSource,
}

pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `server` is `host:port` or a full `http://` URL.
    pub fn new(server: &str) -> Self {
        let base = if server.starts_with("http://") || server.starts_with("https://") {
            server.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", server.trim_end_matches('/'))
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        Self { http, base }
    }

    async fn get(&self, path: &str) -> std::result::Result<reqwest::Response, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ClientError::Status {
                status: resp.status().as_u16(),
                url,
            });
        }
        Ok(resp)
    }

    pub async fn manifest(&self) -> Result<Manifest> {
        let bytes = self
            .get("/v1/model/manifest")
            .await?
            .bytes()
            .await
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok(Manifest::from_json(&bytes)?)
    }

    /// Raw weights and the version the server attached to them.
    pub async fn weights(&self) -> Result<(Option<u64>, Vec<u8>)> {
        let resp = self.get("/v1/model/weights").await?;
        let version = resp
            .headers()
            .get(VERSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let bytes = resp.bytes().await.map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok((version, bytes.to_vec()))
    }

    /// Manifest then weights; refetches both if the server swapped models
    /// in between.
    pub async fn download(&self) -> Result<ModelBundle> {
        for _ in 0..SWAP_RETRIES {
            let manifest = self.manifest().await?;
            let (version, blob) = self.weights().await?;
            if version.is_some_and(|v| v != manifest.model_version) || sha256_hex(&blob) != manifest.weights_sha256 {
                log::info!("model changed during download, retrying");
                continue;
            }
            return Ok(ModelBundle::from_parts(manifest, blob)?);
        }
        Err(ClientError::Unstable)
    }

    /// Uploads a bundle; the server keeps it only if its version is newer.
    pub async fn publish(&self, bundle: &ModelBundle) -> Result<()> {
        let resp = self
            .http
            .post(format!("{}/v1/model", self.base))
            .body(bundle.to_bytes())
            .send()
            .await
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 200 {
            return Ok(());
        }
        let message = resp.text().await.unwrap_or_default();
        Err(ClientError::Rejected { status, message })
    }

    /// Brings `cache_dir` up to date with the server and returns the bundle.
    pub async fn sync(&self, cache_dir: &Path) -> Result<Synced> {
        let path = cache_dir.join(CACHE_FILE);
        let cached = match ModelBundle::read(&path) {
            Ok(b) => Some(b),
            Err(BundleError::Io { .. }) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache {}: {e}", path.display());
                None
            }
        };
        let manifest = match self.manifest().await {
            Ok(m) => m,
            Err(ClientError::Unreachable(msg)) => {
                return match cached {
                    Some(bundle) => {
                        log::warn!(
                            "server unreachable ({msg}); using cached model version {}, which may be stale",
                            bundle.version()
                        );
                        Ok(Synced {
                            bundle,
                            source: SyncSource::StaleCache,
                        })
                    }
                    None => Err(ClientError::Unreachable(msg)),
                };
            }
            Err(e) => return Err(e),
        };
        if let Some(bundle) = cached {
            let m = bundle.manifest();
            if m.model_version == manifest.model_version && m.weights_sha256 == manifest.weights_sha256 {
                return Ok(Synced {
                    bundle,
                    source: SyncSource::UpToDate,
                });
            }
        }
        let bundle = self.download().await?;
        write_atomic(&path, &bundle.to_bytes())?;
        Ok(Synced {
            bundle,
            source: SyncSource::Downloaded,
        })
    }
}
