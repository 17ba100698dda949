use std::io::Write;
use std::path::{Path, PathBuf};

use edgeloc_core::capsnet::{
    prepare_examples, train as train_model, AdamConfig, CapsNetConfig, EpochLog, Example, InferenceModel, TrainError,
    TrainOptions,
};
use edgeloc_core::datasets::{
    generate_synthetic, ingest_uji_files, read_corpus, write_corpus, SyntheticSiteConfig, CORPUS_FILE_NAME,
};
use edgeloc_core::eval::{
    evaluate_capsnet, evaluate_knn, grid_search as run_grid_search, measure_positioning_time, to_f32_inputs,
    EvalReport, SearchOutcome, SearchSpace,
};
use edgeloc_core::fingerprint::{corpus_min_rss, split, FingerprintDataset, GridMap, RssSample};
use edgeloc_edge::{
    cache_dir, now_rfc3339, BundleInputs, Client, Locator, ModelBundle, RawSample, RunningServer, SyncSource,
};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::failure::{io, Failure, Result};
use crate::{
    BenchArgs, DataArgs, EvalArgs, GenArgs, GridSearchArgs, IngestUjiArgs, LocateArgs, PublishArgs, ServeArgs,
    TrainArgs,
};

const DEFAULT_CACHE_DIR: &str = ".edgeloc-cache";

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io(dir))?;
            }
            std::fs::write(path, text).map_err(io(path))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(|e| Failure::new("io", e.to_string()))
        }
    }
}

fn corpus_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CORPUS_FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Train and test samples plus the hashes of the files they came from.
struct Data {
    train: FingerprintDataset,
    test: FingerprintDataset,
    hashes: Value,
}

fn load_data(args: &DataArgs) -> Result<Data> {
    let file = corpus_file(&args.data);
    let dataset = read_corpus(&file)?;
    let mut hashes = json!({ "corpus_sha256": sha256_file(&file)? });
    let (train, test) = match &args.test_data {
        Some(t) => {
            let tfile = corpus_file(t);
            let test = read_corpus(&tfile)?;
            if test.ap_roster != dataset.ap_roster {
                return Err(Failure::new("dataset", "train and test corpora have different AP rosters"));
            }
            hashes["test_corpus_sha256"] = json!(sha256_file(&tfile)?);
            (dataset, test)
        }
        None => {
            let parts = split(&dataset, args.train_fraction, args.seed)?;
            (parts.train, parts.test)
        }
    };
    if test.samples.is_empty() {
        return Err(Failure::new("dataset", "test split is empty"));
    }
    Ok(Data { train, test, hashes })
}

/// Readings weaker than `min_rss` are raised to it, so that data outside
/// the training range can be normalized with the training minimum.
fn clamp_readings(samples: &[RssSample], min_rss: f64) -> Vec<RssSample> {
    samples
        .iter()
        .map(|s| RssSample {
            readings: s.readings.iter().map(|r| r.map(|v| v.max(min_rss))).collect(),
            ..s.clone()
        })
        .collect()
}

fn examples(samples: &[RssSample], min_rss: f64, grid: &GridMap) -> Result<Vec<Example>> {
    Ok(prepare_examples(&clamp_readings(samples, min_rss), min_rss, grid)?)
}

fn provenance(command: &str, effective: &impl Serialize, seed: u64, hashes: &Value) -> Result<Value> {
    let mut p = json!({
        "command": command,
        "effective_config": serde_json::to_value(effective)?,
        "seed": seed,
    });
    if let (Some(p), Some(h)) = (p.as_object_mut(), hashes.as_object()) {
        p.extend(h.clone());
    }
    Ok(p)
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut cfg = match args.preset.as_str() {
        "desk" => SyntheticSiteConfig::desk(),
        other => return Err(Failure::new("config", format!("unknown preset {other:?} (available: desk)"))),
    };
    cfg.seed = args.seed;
    if let Some(n) = args.samples_per_rp {
        cfg.samples_per_rp = n;
    }
    if let Some(s) = args.shadowing_db {
        cfg.shadowing_std_db = s;
    }
    let dataset = generate_synthetic(&cfg)?;
    let path = write_corpus(&dataset, &args.out)?;
    let grid = dataset.grid()?;
    emit(
        &json!({
            "corpus": path,
            "samples": dataset.len(),
            "aps": dataset.n_aps(),
            "cells": grid.cell_count(),
            "provenance": provenance("gen", &args, args.seed, &json!({ "corpus_sha256": sha256_file(&path)? }))?,
        }),
        None,
    )
}

pub fn ingest_uji(args: IngestUjiArgs) -> Result<()> {
    let mut paths = vec![args.train.as_path()];
    if let Some(v) = &args.validation {
        paths.push(v.as_path());
    }
    let mut sets = ingest_uji_files(&paths, args.building)?;
    for s in &mut sets {
        s.grid_cell_size = args.cell_size;
    }
    if let Some(n) = args.top_aps {
        let top = edgeloc_core::fingerprint::select_top_aps(&sets[0], n)?;
        let index: Vec<usize> = top
            .ap_roster
            .iter()
            .map(|id| sets[0].ap_roster.iter().position(|a| a == id).expect("selected AP is in the roster"))
            .collect();
        for s in sets.iter_mut().skip(1) {
            s.samples = s
                .samples
                .iter()
                .map(|x| RssSample {
                    readings: index.iter().map(|&k| x.readings[k]).collect(),
                    ..x.clone()
                })
                .collect();
            s.ap_roster = top.ap_roster.clone();
        }
        sets[0] = top;
    }
    let mut written = Vec::new();
    for (name, set) in ["train", "test"].iter().zip(&sets) {
        let path = write_corpus(set, &args.out.join(name))?;
        written.push(json!({ "corpus": path, "samples": set.len(), "sha256": sha256_file(&path)? }));
    }
    emit(
        &json!({
            "building": args.building,
            "aps": sets[0].n_aps(),
            "cells": sets[0].grid()?.cell_count(),
            "site": sets[0].site,
            "corpora": written,
            "provenance": provenance("ingest-uji", &args, 0, &Value::Null)?,
        }),
        None,
    )
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    model_version: u64,
    weights_sha256: String,
    num_parameters: usize,
    train_samples: usize,
    test_samples: usize,
    log: Vec<EpochLog>,
    provenance: Value,
}

pub fn train(args: TrainArgs, data_args: DataArgs) -> Result<()> {
    let data = load_data(&data_args)?;
    let grid = data.train.grid()?;
    let min_rss = corpus_min_rss(&data.train.samples)?;
    let tr = examples(&data.train.samples, min_rss, &grid)?;
    let te = examples(&data.test.samples, min_rss, &grid)?;
    let mut config = CapsNetConfig::new(data.train.n_aps(), grid.cell_count(), args.filters, args.channels, args.dim);
    config.routing_iterations = args.routing_iterations;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        adam: AdamConfig {
            learning_rate: args.learning_rate,
            ..AdamConfig::default()
        },
    };
    let (params, log, diverged) = match train_model(&tr, &te, &config, &opts) {
        Ok(run) => (run.params, run.log, None),
        Err(TrainError::Diverged { epoch, last_good, log }) => (*last_good, log, Some(epoch)),
        Err(e) => return Err(e.into()),
    };
    let bundle = ModelBundle::build(
        BundleInputs {
            params: &params,
            config: &config,
            grid: &grid,
            ap_roster: &data.train.ap_roster,
            min_rss,
        },
        args.model_version,
        now_rfc3339(),
    )?;
    bundle.write(&args.out)?;
    let summary = TrainSummary {
        model: args.out.clone(),
        model_version: args.model_version,
        weights_sha256: bundle.manifest().weights_sha256.clone(),
        num_parameters: params.num_parameters(),
        train_samples: tr.len(),
        test_samples: te.len(),
        log,
        provenance: provenance("train", &args, args.seed, &data.hashes)?,
    };
    if let Some(path) = &args.log {
        emit(&summary, Some(path))?;
    }
    emit(&summary, None)?;
    match diverged {
        Some(epoch) => Err(Failure::new(
            "diverged",
            format!("training diverged in epoch {epoch}; wrote the last finite checkpoint to {}", args.out.display()),
        )),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    capsnet: EvalReport,
    baselines: Vec<EvalReport>,
}

pub fn eval(args: EvalArgs, data_args: DataArgs) -> Result<()> {
    let bundle = ModelBundle::read(&args.model)?;
    let data = load_data(&data_args)?;
    let m = bundle.manifest();
    if data.test.ap_roster != m.ap_roster {
        return Err(Failure::new("dataset", "corpus AP roster differs from the model's"));
    }
    let mut hashes = data.hashes.clone();
    hashes["weights_sha256"] = json!(m.weights_sha256);
    hashes["model_version"] = json!(m.model_version);
    let prov = provenance("eval", &args, args.seed, &hashes)?;
    let test = examples(&data.test.samples, m.min_rss, &m.grid)?;
    let model = bundle.inference_model()?;
    let capsnet = evaluate_capsnet(&model, &test, &m.grid, args.batch_size, args.repetitions, prov.clone())?;
    let mut baselines = Vec::new();
    if args.knn > 0 {
        baselines.push(evaluate_knn(
            &clamp_readings(&data.train.samples, m.min_rss),
            &clamp_readings(&data.test.samples, m.min_rss),
            args.knn,
            m.min_rss,
            &m.grid,
            prov,
        )?);
    }
    if let Some(path) = &args.cdf {
        let f = std::fs::File::create(path).map_err(io(path))?;
        capsnet.write_cdf_csv(f)?;
    }
    emit(&EvalOutput { capsnet, baselines }, args.out.as_deref())
}

pub fn grid_search(args: GridSearchArgs, data_args: DataArgs) -> Result<()> {
    let space: SearchSpace = match args.space.as_str() {
        "default" => SearchSpace::default(),
        path => {
            let p = Path::new(path);
            serde_json::from_str(&std::fs::read_to_string(p).map_err(io(p))?)?
        }
    };
    let data = load_data(&data_args)?;
    let grid = data.train.grid()?;
    let min_rss = corpus_min_rss(&data.train.samples)?;
    let tr = examples(&data.train.samples, min_rss, &grid)?;
    let te = examples(&data.test.samples, min_rss, &grid)?;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        adam: AdamConfig {
            learning_rate: args.learning_rate,
            ..AdamConfig::default()
        },
    };
    let result = run_grid_search(
        &tr,
        &te,
        &grid,
        data.train.n_aps(),
        &space,
        &opts,
        args.eval_batch_size,
        args.repetitions,
    )?;
    let mut table = String::from("rank  filters  channels  dim  params      accuracy  mean_err_m  time_ms   status\n");
    for (rank, e) in result.ranked.iter().enumerate() {
        let (acc, err, t, status) = match &e.outcome {
            SearchOutcome::Completed {
                accuracy,
                mean_error_m,
                mean_positioning_time_ms,
                ..
            } => (
                format!("{accuracy:.4}"),
                format!("{mean_error_m:.3}"),
                format!("{mean_positioning_time_ms:.4}"),
                "ok".to_string(),
            ),
            SearchOutcome::Diverged { epoch } => ("-".into(), "-".into(), "-".into(), format!("diverged@{epoch}")),
            SearchOutcome::Failed { .. } => ("-".into(), "-".into(), "-".into(), "failed".into()),
        };
        table += &format!(
            "{:<5} {:<8} {:<9} {:<4} {:<11} {:<9} {:<11} {:<9} {}\n",
            rank + 1,
            e.filters,
            e.channels,
            e.dim,
            e.num_parameters,
            acc,
            err,
            t,
            status
        );
    }
    print!("{table}");
    if let Some(path) = &args.out {
        let out = json!({
            "ranked": result.ranked,
            "frontier": result.frontier,
            "provenance": provenance("grid-search", &args, args.seed, &data.hashes)?,
        });
        emit(&out, Some(path))?;
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new("io", e.to_string()))
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let bundle = ModelBundle::read(&args.model)?;
    runtime()?.block_on(async {
        let server = RunningServer::start(&bundle, &args.bind).await.map_err(|e| Failure::new("io", e.to_string()))?;
        emit(
            &json!({ "listening": server.addr.to_string(), "model_version": bundle.version() }),
            None,
        )?;
        server.wait().await.map_err(|e| Failure::new("io", e.to_string()))
    })
}

pub fn publish(args: PublishArgs) -> Result<()> {
    let bundle = ModelBundle::read(&args.model)?;
    runtime()?.block_on(async {
        let client = Client::new(&args.server);
        client.publish(&bundle).await?;
        emit(&json!({ "published": bundle.version() }), None)
    })
}

pub fn locate(args: LocateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.sample).map_err(io(&args.sample))?;
    let sample: RawSample = serde_json::from_str(&text)?;
    let (bundle, source) = match (&args.server, &args.model) {
        (Some(server), _) => {
            let dir = args.cache_dir.clone().unwrap_or_else(|| cache_dir(Path::new(DEFAULT_CACHE_DIR)));
            let synced = runtime()?.block_on(Client::new(server).sync(&dir))?;
            let source = match synced.source {
                SyncSource::Downloaded => "downloaded",
                SyncSource::UpToDate => "cache",
                SyncSource::StaleCache => "stale-cache",
            };
            (synced.bundle, source)
        }
        (None, Some(path)) => (ModelBundle::read(path)?, "file"),
        (None, None) => return Err(Failure::new("config", "locate needs --server or --model")),
    };
    let version = bundle.version();
    let loc = Locator::new(bundle)?.locate(&sample)?;
    emit(
        &json!({
            "grid_index": loc.grid_index,
            "cell_center": loc.cell_center,
            "elapsed_ms": loc.elapsed_ms,
            "model_version": version,
            "bundle_source": source,
            "ignored_aps": loc.ignored_aps,
        }),
        None,
    )
}

pub fn bench_latency(args: BenchArgs, data_args: DataArgs) -> Result<()> {
    if args.batch_sizes.is_empty() {
        return Err(Failure::new("config", "no batch sizes given"));
    }
    let bundle = ModelBundle::read(&args.model)?;
    let data = load_data(&data_args)?;
    let m = bundle.manifest();
    let inputs = to_f32_inputs(&examples(&data.test.samples, m.min_rss, &m.grid)?);
    let model: InferenceModel = bundle.inference_model()?;
    let mut results = Vec::new();
    for &b in &args.batch_sizes {
        results.push(measure_positioning_time(&model, &inputs, b, args.repetitions)?);
    }
    let mut hashes = data.hashes.clone();
    hashes["weights_sha256"] = json!(m.weights_sha256);
    emit(
        &json!({
            "results": results,
            "provenance": provenance("bench-latency", &args, args.seed, &hashes)?,
        }),
        args.out.as_deref(),
    )
}
