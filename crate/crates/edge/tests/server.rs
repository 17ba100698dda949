use std::collections::HashSet;

use edgeloc_core::capsnet::{CapsNetConfig, CapsNetParams};
use edgeloc_core::fingerprint::{GridMap, Site};
use edgeloc_edge::blob::sha256_hex;
use edgeloc_edge::{BundleInputs, Client, ClientError, ModelBundle, RunningServer, SyncSource};

fn bundle(version: u64) -> ModelBundle {
    let config = CapsNetConfig::new(6, 4, 16, 4, 8);
    let params = CapsNetParams::init(&config, version).unwrap();
    let grid = GridMap::build(Site { width: 3.2, height: 3.2 }, 1.6).unwrap();
    let roster: Vec<String> = (0..6).map(|k| format!("AP{k}")).collect();
    ModelBundle::build(
        BundleInputs {
            params: &params,
            config: &config,
            grid: &grid,
            ap_roster: &roster,
            min_rss: -90.0,
        },
        version,
        format!("2026-01-0{version}T00:00:00Z"),
    )
    .unwrap()
}

async fn post(addr: std::net::SocketAddr, body: Vec<u8>) -> u16 {
    reqwest::Client::new()
        .post(format!("http://{addr}/v1/model"))
        .body(body)
        .send()
        .await
        .unwrap()
        .status()
        .as_u16()
}

#[tokio::test]
async fn endpoints_and_consistency() {
    let server = RunningServer::start(&bundle(1), "127.0.0.1:0").await.unwrap();
    let addr = server.addr;
    let health = reqwest::get(format!("http://{addr}/v1/health")).await.unwrap();
    assert_eq!(health.status().as_u16(), 200);
    assert_eq!(health.text().await.unwrap(), "ok");

    let client = Client::new(&addr.to_string());
    let manifest = client.manifest().await.unwrap();
    let resp = reqwest::get(format!("http://{addr}/v1/model/weights")).await.unwrap();
    let len: usize = resp.headers()["content-length"].to_str().unwrap().parse().unwrap();
    let blob = resp.bytes().await.unwrap();
    assert_eq!(len, blob.len());
    assert_eq!(sha256_hex(&blob), manifest.weights_sha256);
    assert_eq!(client.download().await.unwrap(), bundle(1));
    server.stop();
}

#[tokio::test]
async fn uploads_are_versioned() {
    let server = RunningServer::start(&bundle(1), "127.0.0.1:0").await.unwrap();
    let addr = server.addr;
    let client = Client::new(&addr.to_string());
    assert_eq!(post(addr, bundle(2).to_bytes()).await, 200);
    assert_eq!(post(addr, bundle(3).to_bytes()).await, 200);
    assert_eq!(client.manifest().await.unwrap().model_version, 3);

    assert_eq!(post(addr, bundle(2).to_bytes()).await, 409);
    assert_eq!(post(addr, bundle(3).to_bytes()).await, 409);
    let mut corrupt = bundle(4).to_bytes();
    let last = corrupt.len() - 40;
    corrupt[last] ^= 1;
    assert_eq!(post(addr, corrupt).await, 400);
    assert_eq!(post(addr, b"not a bundle".to_vec()).await, 400);
    assert_eq!(post(addr, Vec::new()).await, 400);
    assert_eq!(client.manifest().await.unwrap().model_version, 3);
    assert_eq!(client.download().await.unwrap(), bundle(3));
    server.stop();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_downloads_never_see_torn_weights() {
    let server = RunningServer::start(&bundle(1), "127.0.0.1:0").await.unwrap();
    let addr = server.addr;
    let served: HashSet<String> = (1..=3).map(|v| bundle(v).manifest().weights_sha256.clone()).collect();
    let mut downloads = Vec::new();
    for _ in 0..16 {
        downloads.push(tokio::spawn(async move {
            let mut seen = Vec::new();
            for _ in 0..8 {
                let body = reqwest::get(format!("http://{addr}/v1/model/weights"))
                    .await
                    .unwrap()
                    .bytes()
                    .await
                    .unwrap();
                seen.push(sha256_hex(&body));
            }
            seen
        }));
    }
    let uploads = tokio::spawn(async move {
        assert_eq!(post(addr, bundle(2).to_bytes()).await, 200);
        assert_eq!(post(addr, bundle(3).to_bytes()).await, 200);
    });
    for d in downloads {
        for hash in d.await.unwrap() {
            assert!(served.contains(&hash), "torn or unknown weights {hash}");
        }
    }
    uploads.await.unwrap();
    server.stop();
}

#[tokio::test]
async fn sync_uses_cache_and_falls_back_when_offline() {
    let dir = tempfile::tempdir().unwrap();
    let server = RunningServer::start(&bundle(1), "127.0.0.1:0").await.unwrap();
    let addr = server.addr;
    let client = Client::new(&addr.to_string());

    let first = client.sync(dir.path()).await.unwrap();
    assert_eq!(first.source, SyncSource::Downloaded);
    let second = client.sync(dir.path()).await.unwrap();
    assert_eq!(second.source, SyncSource::UpToDate);
    assert_eq!(second.bundle, first.bundle);

    assert_eq!(post(addr, bundle(2).to_bytes()).await, 200);
    let third = client.sync(dir.path()).await.unwrap();
    assert_eq!(third.source, SyncSource::Downloaded);
    assert_eq!(third.bundle.version(), 2);

    server.stop();
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    let offline = client.sync(dir.path()).await.unwrap();
    assert_eq!(offline.source, SyncSource::StaleCache);
    assert_eq!(offline.bundle.version(), 2);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(client.sync(empty.path()).await, Err(ClientError::Unreachable(_))));
}

#[test]
fn cache_dir_honours_environment() {
    let fallback = std::path::Path::new("/nonexistent/fallback");
    std::env::remove_var(edgeloc_edge::CACHE_ENV);
    assert_eq!(edgeloc_edge::cache_dir(fallback), fallback);
    std::env::set_var(edgeloc_edge::CACHE_ENV, "/tmp/edgeloc-cache-test");
    assert_eq!(edgeloc_edge::cache_dir(fallback), std::path::Path::new("/tmp/edgeloc-cache-test"));
    std::env::remove_var(edgeloc_edge::CACHE_ENV);
}
