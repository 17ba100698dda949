use std::collections::BTreeMap;
use std::time::Instant;

use edgeloc_core::capsnet::{predict_grid, CapsNetError, InferenceModel};
use edgeloc_core::fingerprint::{difference_matrix, Point};
use serde::{Deserialize, Serialize};

use crate::bundle::{ModelBundle, Result};

/// Readings keyed by AP id; absent keys and `null` values are not detected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub readings: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub grid_index: usize,
    pub cell_center: Point,
    pub lengths: Vec<f32>,
    pub elapsed_ms: f64,
    /// APs in the sample that the bundle does not know about.
    pub ignored_aps: Vec<String>,
}

/// Device-side inference state built once per bundle.
pub struct Locator {
    bundle: ModelBundle,
    model: InferenceModel,
}

impl Locator {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        let model = bundle.inference_model()?;
        Ok(Self { bundle, model })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    /// Projects the sample onto the roster and normalizes it. Readings
    /// weaker than the bundle's `min_rss` count as `min_rss`.
    pub fn features(&self, sample: &RawSample) -> (Vec<f32>, Vec<String>) {
        let m = self.bundle.manifest();
        let r: Vec<f64> = m
            .ap_roster
            .iter()
            .map(|ap| match sample.readings.get(ap).copied().flatten() {
                None => 0.0,
                Some(rss) => 0.1 * (rss.max(m.min_rss) - m.min_rss),
            })
            .collect();
        let ignored: Vec<String> = sample
            .readings
            .keys()
            .filter(|k| !m.ap_roster.contains(k))
            .cloned()
            .collect();
        let x = difference_matrix(&r).expect("roster holds at least two APs");
        (x.values().iter().map(|&v| v as f32).collect(), ignored)
    }

    pub fn locate(&self, sample: &RawSample) -> Result<Location> {
        let start = Instant::now();
        let (x, ignored_aps) = self.features(sample);
        let lengths = self.model.forward(&x)?;
        let grid_index = predict_grid(&lengths);
        let cell_center = self
            .bundle
            .manifest()
            .grid
            .cell_center(grid_index)
            .map_err(CapsNetError::from)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        for ap in &ignored_aps {
            log::warn!("ignoring reading from AP {ap} not in the bundle roster");
        }
        Ok(Location {
            grid_index,
            cell_center,
            lengths,
            elapsed_ms,
            ignored_aps,
        })
    }
}
