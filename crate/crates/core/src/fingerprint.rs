//! RSS fingerprints and the preprocessing that turns them into network inputs.
//!
//! A reading is `Option<f64>`: `Some(dbm)` for a detected AP and `None`
//! ([`NOT_DETECTED`]) otherwise. Dataset-specific sentinels (UJIIndoorLoc's
//! `+100`, a synthetic detection floor) are mapped to `None` at ingestion.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NOT_DETECTED: Option<f64> = None;

/// Default grid cell edge in meters.
pub const DEFAULT_CELL_SIZE: f64 = 1.6;

/// Points within this distance of a cell boundary are treated as lying on it.
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FingerprintError {
    #[error("AP {ap}: reading {reading} dBm is below the corpus minimum {min_rss} dBm")]
    BelowMinRss { ap: usize, reading: f64, min_rss: f64 },
    #[error("need at least 2 APs, got {0}")]
    TooFewAps(usize),
    #[error("point ({x}, {y}) lies outside the {width} x {height} m site")]
    OutsideSite { x: f64, y: f64, width: f64, height: f64 },
    #[error("site and cell size must be positive (site {width} x {height}, cell {cell})")]
    InvalidGeometry { width: f64, height: f64, cell: f64 },
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("cannot select {requested} APs out of {available}")]
    InvalidApCount { requested: usize, available: usize },
    #[error("sample {index} has {got} readings, roster has {expected}")]
    ReadingCount { index: usize, expected: usize, got: usize },
    #[error("dataset has no samples")]
    Empty,
    #[error("no detected readings in the corpus")]
    NoDetections,
    #[error("grid index {index} out of range for {cells} cells")]
    CellIndex { index: usize, cells: usize },
}

pub type Result<T> = std::result::Result<T, FingerprintError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Site rectangle `[0, width] x [0, height]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub width: f64,
    pub height: f64,
}

impl Site {
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= -BOUNDARY_TOL
            && p.y >= -BOUNDARY_TOL
            && p.x <= self.width + BOUNDARY_TOL
            && p.y <= self.height + BOUNDARY_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssSample {
    /// One entry per roster AP, `None` when not detected.
    pub readings: Vec<Option<f64>>,
    pub location: Point,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub building: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    pub ap_roster: Vec<String>,
    pub samples: Vec<RssSample>,
    pub site: Site,
    pub grid_cell_size: f64,
}

impl FingerprintDataset {
    /// Checks the structural invariants: nonempty, at least two APs, reading
    /// counts match the roster, every location inside the site.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(FingerprintError::Empty);
        }
        if self.ap_roster.len() < 2 {
            return Err(FingerprintError::TooFewAps(self.ap_roster.len()));
        }
        for (index, s) in self.samples.iter().enumerate() {
            if s.readings.len() != self.ap_roster.len() {
                return Err(FingerprintError::ReadingCount {
                    index,
                    expected: self.ap_roster.len(),
                    got: s.readings.len(),
                });
            }
            if !self.site.contains(&s.location) {
                return Err(self.outside(&s.location));
            }
        }
        Ok(())
    }

    fn outside(&self, p: &Point) -> FingerprintError {
        FingerprintError::OutsideSite {
            x: p.x,
            y: p.y,
            width: self.site.width,
            height: self.site.height,
        }
    }

    pub fn n_aps(&self) -> usize {
        self.ap_roster.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn grid(&self) -> Result<GridMap> {
        GridMap::build(self.site, self.grid_cell_size)
    }

    /// Lowest detected reading across every sample.
    pub fn min_rss(&self) -> Result<f64> {
        corpus_min_rss(&self.samples)
    }

    /// Same roster and geometry, different samples.
    pub fn with_samples(&self, samples: Vec<RssSample>) -> Self {
        Self {
            ap_roster: self.ap_roster.clone(),
            samples,
            site: self.site,
            grid_cell_size: self.grid_cell_size,
        }
    }
}

/// Minimum over detected readings only.
pub fn corpus_min_rss(samples: &[RssSample]) -> Result<f64> {
    samples
        .iter()
        .flat_map(|s| s.readings.iter().flatten())
        .copied()
        .min_by(|a, b| a.total_cmp(b))
        .ok_or(FingerprintError::NoDetections)
}

/// `r_i = 0` for a missing AP, `0.1 * (RSS_i - min_rss)` otherwise.
pub fn normalize(sample: &RssSample, min_rss: f64) -> Result<Vec<f64>> {
    normalize_readings(&sample.readings, min_rss)
}

pub fn normalize_readings(readings: &[Option<f64>], min_rss: f64) -> Result<Vec<f64>> {
    readings
        .iter()
        .enumerate()
        .map(|(ap, reading)| match *reading {
            None => Ok(0.0),
            Some(rss) if rss < min_rss => Err(FingerprintError::BelowMinRss {
                ap,
                reading: rss,
                min_rss,
            }),
            Some(rss) => Ok(0.1 * (rss - min_rss)),
        })
        .collect()
}

/// The `n x n` matrix of pairwise differences `R[i][j] = r_i - r_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn difference_matrix(r: &[f64]) -> Result<FeatureMatrix> {
    let n = r.len();
    if n < 2 {
        return Err(FingerprintError::TooFewAps(n));
    }
    let mut values = Vec::with_capacity(n * n);
    for &ri in r {
        values.extend(r.iter().map(|&rj| ri - rj));
    }
    Ok(FeatureMatrix { n, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellBounds {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub center: Point,
    pub bounds: CellBounds,
}

/// Row-major partition of the site into square half-open cells.
///
/// Cell `index = row * columns + col`; a point on an interior boundary
/// belongs to the cell with the larger index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub width: f64,
    pub height: f64,
    pub cell_size: f64,
    pub columns: usize,
    pub rows: usize,
}

impl GridMap {
    pub fn build(site: Site, cell_size: f64) -> Result<Self> {
        let valid = |v: f64| v.is_finite() && v > 0.0;
        if !valid(site.width) || !valid(site.height) || !valid(cell_size) {
            return Err(FingerprintError::InvalidGeometry {
                width: site.width,
                height: site.height,
                cell: cell_size,
            });
        }
        let count = |extent: f64| ((extent / cell_size) - BOUNDARY_TOL).ceil().max(1.0) as usize;
        Ok(Self {
            width: site.width,
            height: site.height,
            cell_size,
            columns: count(site.width),
            rows: count(site.height),
        })
    }

    pub fn cell_count(&self) -> usize {
        self.columns * self.rows
    }

    fn axis_index(&self, v: f64, count: usize) -> usize {
        let mut k = (v / self.cell_size).floor().max(0.0) as usize;
        // snap to the boundary above when within tolerance of it
        if ((k + 1) as f64 * self.cell_size - v).abs() <= BOUNDARY_TOL {
            k += 1;
        } else if k > 0 && v < k as f64 * self.cell_size - BOUNDARY_TOL {
            k -= 1;
        }
        k.min(count - 1)
    }

    pub fn cell_of(&self, p: &Point) -> Result<usize> {
        let site = Site {
            width: self.width,
            height: self.height,
        };
        if !site.contains(p) {
            return Err(FingerprintError::OutsideSite {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        let col = self.axis_index(p.x, self.columns);
        let row = self.axis_index(p.y, self.rows);
        Ok(row * self.columns + col)
    }

    pub fn one_hot(&self, p: &Point) -> Result<Vec<f64>> {
        let idx = self.cell_of(p)?;
        let mut v = vec![0.0; self.cell_count()];
        v[idx] = 1.0;
        Ok(v)
    }

    pub fn cell(&self, index: usize) -> Result<GridCell> {
        if index >= self.cell_count() {
            return Err(FingerprintError::CellIndex {
                index,
                cells: self.cell_count(),
            });
        }
        let (row, col) = (index / self.columns, index % self.columns);
        let x_min = col as f64 * self.cell_size;
        let y_min = row as f64 * self.cell_size;
        let bounds = CellBounds {
            x_min,
            y_min,
            x_max: x_min + self.cell_size,
            y_max: y_min + self.cell_size,
        };
        Ok(GridCell {
            index,
            center: Point::new(x_min + self.cell_size / 2.0, y_min + self.cell_size / 2.0),
            bounds,
        })
    }

    pub fn cell_center(&self, index: usize) -> Result<Point> {
        Ok(self.cell(index)?.center)
    }

    pub fn cells(&self) -> Vec<GridCell> {
        (0..self.cell_count()).map(|i| self.cell(i).unwrap()).collect()
    }
}

/// Outcome of [`split`]; `singleton_cells` lists cells whose only sample went to train.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: FingerprintDataset,
    pub test: FingerprintDataset,
    pub singleton_cells: Vec<usize>,
}

/// Stratified train/test split: each grid cell contributes
/// `round(train_fraction * count)` samples to train, at least one to each
/// side when it has two or more samples.
pub fn split(dataset: &FingerprintDataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(FingerprintError::InvalidFraction(train_fraction));
    }
    let grid = dataset.grid()?;
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_cell.entry(grid.cell_of(&s.location)?).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut singleton_cells = Vec::new();
    for (cell, mut members) in by_cell {
        if members.len() == 1 {
            log::warn!("grid cell {cell} has a single sample; assigning it to train");
            singleton_cells.push(cell);
            train_idx.push(members[0]);
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok(Split {
        train: dataset.with_samples(pick(&train_idx)),
        test: dataset.with_samples(pick(&test_idx)),
        singleton_cells,
    })
}

/// Orders AP identifiers so that `AP2 < AP10`: equal alphabetic prefixes
/// compare by their numeric suffix, anything else lexicographically.
pub fn compare_ap_ids(a: &str, b: &str) -> Ordering {
    fn parts(s: &str) -> (&str, Option<u64>) {
        let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (prefix, num) = s.split_at(s.len() - digits);
        (prefix, num.parse().ok())
    }
    match (parts(a), parts(b)) {
        ((pa, Some(na)), (pb, Some(nb))) if pa == pb => na.cmp(&nb).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Detection count per roster AP.
pub fn detection_counts(dataset: &FingerprintDataset) -> Vec<usize> {
    let mut counts = vec![0; dataset.n_aps()];
    for s in &dataset.samples {
        for (c, r) in counts.iter_mut().zip(&s.readings) {
            if r.is_some() {
                *c += 1;
            }
        }
    }
    counts
}

/// Keeps the `n` most frequently detected APs, in ranking order
/// (count descending, identifier ascending).
pub fn select_top_aps(dataset: &FingerprintDataset, n: usize) -> Result<FingerprintDataset> {
    let available = dataset.n_aps();
    if n < 2 || n > available {
        return Err(FingerprintError::InvalidApCount { requested: n, available });
    }
    let counts = detection_counts(dataset);
    let mut order: Vec<usize> = (0..available).collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .cmp(&counts[a])
            .then_with(|| compare_ap_ids(&dataset.ap_roster[a], &dataset.ap_roster[b]))
    });
    order.truncate(n);

    let samples = dataset
        .samples
        .iter()
        .map(|s| RssSample {
            readings: order.iter().map(|&k| s.readings[k]).collect(),
            ..s.clone()
        })
        .collect();
    Ok(FingerprintDataset {
        ap_roster: order.iter().map(|&k| dataset.ap_roster[k].clone()).collect(),
        samples,
        site: dataset.site,
        grid_cell_size: dataset.grid_cell_size,
    })
}
