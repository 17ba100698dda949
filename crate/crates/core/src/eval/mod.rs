//! Accuracy, localization error, error CDF and positioning time, plus the
//! kNN baseline and the layer-size grid search.

mod knn;
mod search;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsnet::{predict_grid, CapsNetError, Example, InferenceModel};
use crate::fingerprint::{normalize, FingerprintError, GridMap, Point, RssSample};

pub use knn::{leave_one_out_accuracy, KnnBaseline};
pub use search::{grid_search, SearchEntry, SearchOutcome, SearchResult, SearchSpace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Model(#[from] CapsNetError),
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Distance in meters from the predicted cell's center to the true location.
pub fn localization_error(pred_cell: usize, true_location: &Point, grid: &GridMap) -> Result<f64> {
    Ok(grid.cell_center(pred_cell)?.distance(true_location))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub error_m: f64,
    pub fraction: f64,
}

/// Empirical CDF: one point per sample, sorted by error.
pub fn error_cdf(errors: &[f64]) -> Vec<CdfPoint> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| CdfPoint {
            error_m: e,
            fraction: (i + 1) as f64 / n,
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-sample positioning time over repeated batched passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub batch_size: usize,
    pub samples: usize,
    pub repetitions: usize,
    /// Mean over repetitions of (pass wall-clock / samples), milliseconds.
    pub mean_ms: f64,
    pub median_ms: f64,
    pub per_repetition_ms: Vec<f64>,
}

/// Times forward passes over `inputs` in batches of `batch_size`. One
/// warm-up batch runs first and is not counted.
pub fn measure_positioning_time(
    model: &InferenceModel,
    inputs: &[f32],
    batch_size: usize,
    repetitions: usize,
) -> Result<Timing> {
    let m = model.input_len();
    if batch_size == 0 || repetitions == 0 {
        return Err(EvalError::Invalid("batch size and repetitions must be >= 1".into()));
    }
    if inputs.is_empty() || inputs.len() % m != 0 {
        return Err(EvalError::Invalid(format!("inputs must be a nonempty multiple of {m} values")));
    }
    let samples = inputs.len() / m;
    let first = &inputs[..m * batch_size.min(samples)];
    std::hint::black_box(model.forward_batch(first)?);
    let mut per_rep = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for chunk in inputs.chunks(m * batch_size) {
            std::hint::black_box(model.forward_batch(chunk)?);
        }
        per_rep.push(start.elapsed().as_secs_f64() * 1e3 / samples as f64);
    }
    Ok(Timing {
        batch_size,
        samples,
        repetitions,
        mean_ms: per_rep.iter().sum::<f64>() / repetitions as f64,
        median_ms: median(&per_rep),
        per_repetition_ms: per_rep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub errors_m: Vec<f64>,
    pub cdf: Vec<CdfPoint>,
    pub mean_positioning_time_ms: Option<f64>,
    pub timing: Option<Timing>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_predictions(
        model: &str,
        predictions: &[usize],
        labels: &[usize],
        locations: &[Point],
        grid: &GridMap,
        config: serde_json::Value,
    ) -> Result<Self> {
        let n = predictions.len();
        if n == 0 || labels.len() != n || locations.len() != n {
            return Err(EvalError::Invalid(format!(
                "need equal nonempty predictions/labels/locations, got {n}/{}/{}",
                labels.len(),
                locations.len()
            )));
        }
        let errors = predictions
            .iter()
            .zip(locations)
            .map(|(&p, loc)| localization_error(p, loc, grid))
            .collect::<Result<Vec<f64>>>()?;
        let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(Self {
            model: model.to_string(),
            n_samples: n,
            accuracy: correct as f64 / n as f64,
            mean_error_m: errors.iter().sum::<f64>() / n as f64,
            median_error_m: median(&errors),
            cdf: error_cdf(&errors),
            errors_m: errors,
            mean_positioning_time_ms: None,
            timing: None,
            config,
        })
    }

    pub fn with_timing(mut self, timing: Timing) -> Self {
        self.mean_positioning_time_ms = Some(timing.mean_ms);
        self.timing = Some(timing);
        self
    }

    /// Fraction of samples localized within `meters`.
    pub fn within(&self, meters: f64) -> f64 {
        self.errors_m.iter().filter(|&&e| e <= meters).count() as f64 / self.n_samples as f64
    }

    /// Writes the CDF as `error_m,fraction` rows.
    pub fn write_cdf_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.cdf {
            w.serialize(p)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn to_f32_inputs(examples: &[Example]) -> Vec<f32> {
    examples.iter().flat_map(|e| e.features.iter().map(|&v| v as f32)).collect()
}

/// Evaluates a CapsNet on `examples`; timing uses `batch_size` and
/// `repetitions` passes (no timing when `repetitions` is 0).
pub fn evaluate_capsnet(
    model: &InferenceModel,
    examples: &[Example],
    grid: &GridMap,
    batch_size: usize,
    repetitions: usize,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(EvalError::Invalid("test set is empty".into()));
    }
    let inputs = to_f32_inputs(examples);
    let g = model.config().num_grids;
    let mut predictions = Vec::with_capacity(examples.len());
    for chunk in inputs.chunks(model.input_len() * batch_size.max(1)) {
        let lengths = model.forward_batch(chunk)?;
        predictions.extend(lengths.chunks_exact(g).map(predict_grid));
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let locations: Vec<Point> = examples.iter().map(|e| e.location).collect();
    let report = EvalReport::from_predictions("capsnet", &predictions, &labels, &locations, grid, config)?;
    if repetitions == 0 {
        return Ok(report);
    }
    Ok(report.with_timing(measure_positioning_time(model, &inputs, batch_size, repetitions)?))
}

/// Normalized RSS vectors, the kNN feature space.
pub fn normalized_features(samples: &[RssSample], min_rss: f64) -> Result<Vec<Vec<f64>>> {
    Ok(samples
        .iter()
        .map(|s| normalize(s, min_rss))
        .collect::<std::result::Result<_, _>>()?)
}

/// Fits kNN on `train` and evaluates it on `test`.
pub fn evaluate_knn(
    train: &[RssSample],
    test: &[RssSample],
    k: usize,
    min_rss: f64,
    grid: &GridMap,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let labels = train
        .iter()
        .map(|s| grid.cell_of(&s.location))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let knn = KnnBaseline::new(normalized_features(train, min_rss)?, labels, k)?;
    let queries = normalized_features(test, min_rss)?;
    let start = Instant::now();
    let predictions: Vec<usize> = queries.iter().map(|q| knn.predict(q)).collect();
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3 / queries.len().max(1) as f64;
    let truth = test
        .iter()
        .map(|s| grid.cell_of(&s.location))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let locations: Vec<Point> = test.iter().map(|s| s.location).collect();
    let mut report = EvalReport::from_predictions(&format!("knn-{k}"), &predictions, &truth, &locations, grid, config)?;
    report.mean_positioning_time_ms = Some(elapsed_ms);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Site;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridMap {
        GridMap::build(Site { width: 6.4, height: 3.2 }, 1.6).unwrap()
    }

    #[test]
    fn error_is_center_distance() {
        let g = grid();
        let c0 = g.cell_center(0).unwrap();
        assert_eq!(localization_error(0, &c0, &g).unwrap(), 0.0);
        assert!((localization_error(1, &c0, &g).unwrap() - 1.6).abs() < 1e-12);
        assert!(localization_error(99, &c0, &g).is_err());
    }

    #[test]
    fn error_matches_coordinate_formula() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cell = rng.random_range(0..g.cell_count());
            let p = Point::new(rng.random_range(0.0..6.4), rng.random_range(0.0..3.2));
            let col = cell % 4;
            let row = cell / 4;
            let (cx, cy) = (0.8 + 1.6 * col as f64, 0.8 + 1.6 * row as f64);
            let want = ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
            assert!((localization_error(cell, &p, &g).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn report_invariants() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let locs: Vec<Point> = (0..50)
            .map(|_| Point::new(rng.random_range(0.0..6.4), rng.random_range(0.0..3.2)))
            .collect();
        let labels: Vec<usize> = locs.iter().map(|p| g.cell_of(p).unwrap()).collect();
        let preds: Vec<usize> = (0..50).map(|_| rng.random_range(0..8)).collect();
        let r = EvalReport::from_predictions("x", &preds, &labels, &locs, &g, serde_json::Value::Null).unwrap();
        assert!(r.cdf.windows(2).all(|w| w[0].error_m <= w[1].error_m && w[0].fraction <= w[1].fraction));
        assert_eq!(r.cdf.last().unwrap().fraction, 1.0);
        let mean = r.errors_m.iter().sum::<f64>() / 50.0;
        assert!((r.mean_error_m - mean).abs() < 1e-12);
        assert_eq!(r.within(f64::INFINITY), 1.0);

        // perfect predictor: errors are within-cell offsets only
        let perfect = EvalReport::from_predictions("p", &labels, &labels, &locs, &g, serde_json::Value::Null).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert!(perfect.errors_m.iter().all(|&e| e <= 0.8 * 2f64.sqrt() + 1e-12));
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let g = grid();
        let locs = vec![g.cell_center(0).unwrap(), g.cell_center(1).unwrap()].repeat(5);
        let labels: Vec<usize> = locs.iter().map(|p| g.cell_of(p).unwrap()).collect();
        let r = EvalReport::from_predictions("c", &[0; 10], &labels, &locs, &g, serde_json::Value::Null).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(EvalReport::from_predictions("c", &[], &[], &[], &g, serde_json::Value::Null).is_err());
    }

    #[test]
    fn cdf_csv_has_one_row_per_sample() {
        let g = grid();
        let locs = vec![Point::new(0.1, 0.1), Point::new(3.0, 1.0)];
        let r = EvalReport::from_predictions("c", &[0, 0], &[0, 1], &locs, &g, serde_json::Value::Null).unwrap();
        let mut buf = Vec::new();
        r.write_cdf_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "error_m,fraction");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",1.0"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
