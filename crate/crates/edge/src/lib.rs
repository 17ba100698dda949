//! Edge deployment: the weight blob format, model bundles, the HTTP edge
//! server and the device-side client.

pub mod blob;
pub mod bundle;
pub mod client;
pub mod locate;
pub mod server;

pub use blob::{BlobError, NamedTensor};
pub use bundle::{now_rfc3339, BundleError, BundleInputs, Manifest, ModelBundle};
pub use client::{cache_dir, Client, ClientError, SyncSource, Synced, CACHE_ENV};
pub use locate::{Location, Locator, RawSample};
pub use server::{router, RunningServer, ServerState};
