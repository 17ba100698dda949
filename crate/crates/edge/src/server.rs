use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::Mutex;

use crate::bundle::ModelBundle;

/// Response header carrying the model version of a weights download.
pub const VERSION_HEADER: &str = "x-edgeloc-model-version";
/// Response header carrying the SHA-256 of a weights download.
pub const HASH_HEADER: &str = "x-edgeloc-weights-sha256";

const MAX_UPLOAD: usize = 1 << 30;

/// One served version; never mutated after creation.
struct Snapshot {
    version: u64,
    manifest_json: Bytes,
    blob: Bytes,
    hash: String,
}

impl Snapshot {
    fn new(bundle: &ModelBundle) -> Self {
        Self {
            version: bundle.version(),
            manifest_json: Bytes::from(bundle.manifest().to_json()),
            blob: Bytes::copy_from_slice(bundle.blob()),
            hash: bundle.manifest().weights_sha256.clone(),
        }
    }
}

#[derive(Clone)]
pub struct ServerState {
    current: Arc<RwLock<Arc<Snapshot>>>,
    uploads: Arc<Mutex<()>>,
}

impl ServerState {
    pub fn new(bundle: &ModelBundle) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(Snapshot::new(bundle)))),
            uploads: Arc::new(Mutex::new(())),
        }
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }
}

pub fn router(state: ServerState) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { "ok" }))
        .route("/v1/model/manifest", get(manifest))
        .route("/v1/model/weights", get(weights))
        .route("/v1/model", axum::routing::post(upload))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

async fn manifest(State(state): State<ServerState>) -> Response {
    let snap = state.snapshot();
    ([(header::CONTENT_TYPE, "application/json")], snap.manifest_json.clone()).into_response()
}

async fn weights(State(state): State<ServerState>) -> Response {
    // the Arc keeps this version alive until the body is sent, even if an
    // upload swaps the current snapshot meanwhile
    let snap = state.snapshot();
    let mut resp = ([(header::CONTENT_TYPE, "application/octet-stream")], snap.blob.clone()).into_response();
    let h = resp.headers_mut();
    h.insert(VERSION_HEADER, HeaderValue::from(snap.version));
    h.insert(HASH_HEADER, HeaderValue::from_str(&snap.hash).expect("hex is a valid header"));
    resp
}

fn error(status: StatusCode, message: String) -> Response {
    let body = serde_json::json!({ "error": message }).to_string();
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn upload(State(state): State<ServerState>, body: Bytes) -> Response {
    let bundle = match ModelBundle::from_bytes(&body) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("rejected upload: {e}");
            return error(StatusCode::BAD_REQUEST, e.to_string());
        }
    };
    let _guard = state.uploads.lock().await;
    let current = state.version();
    if bundle.version() <= current {
        return error(
            StatusCode::CONFLICT,
            format!("version {} is not newer than {current}", bundle.version()),
        );
    }
    let snap = Arc::new(Snapshot::new(&bundle));
    *state.current.write().expect("snapshot lock") = snap.clone();
    log::info!("installed model version {}", snap.version);
    ([(header::CONTENT_TYPE, "application/json")], snap.manifest_json.clone()).into_response()
}

/// A server bound to a port and running on the current tokio runtime.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: ServerState,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub async fn start(bundle: &ModelBundle, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let state = ServerState::new(bundle);
        let app = router(state.clone());
        let handle = tokio::spawn(async move { axum::serve(listener, app).await });
        log::info!("serving model version {} on {addr}", bundle.version());
        Ok(Self { addr, state, handle })
    }

    pub async fn wait(self) -> std::io::Result<()> {
        self.handle.await.map_err(std::io::Error::other)?
    }

    pub fn stop(self) {
        self.handle.abort();
    }
}
