use serde::{Deserialize, Serialize};

use super::{evaluate_capsnet, EvalError, Result};
use crate::capsnet::{CapsNetConfig, CapsNetParams, Example, InferenceModel, TrainError, TrainOptions};
use crate::fingerprint::GridMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub filters: Vec<usize>,
    pub channels: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            filters: vec![32, 64, 128, 256, 512, 1024],
            channels: vec![8, 16],
            dims: vec![8, 16, 32],
        }
    }
}

impl SearchSpace {
    /// All (filters, channels, dim) triples, filters varying slowest.
    pub fn points(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &f in &self.filters {
            for &c in &self.channels {
                for &d in &self.dims {
                    out.push((f, c, d));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.filters.len() * self.channels.len() * self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SearchOutcome {
    Completed {
        accuracy: f64,
        mean_error_m: f64,
        mean_positioning_time_ms: f64,
        final_train_loss: f64,
    },
    Diverged {
        epoch: usize,
    },
    Failed {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub filters: usize,
    pub channels: usize,
    pub dim: usize,
    pub num_parameters: usize,
    #[serde(flatten)]
    pub outcome: SearchOutcome,
}

impl SearchEntry {
    fn score(&self) -> Option<(f64, f64)> {
        match self.outcome {
            SearchOutcome::Completed {
                accuracy,
                mean_positioning_time_ms,
                ..
            } => Some((accuracy, mean_positioning_time_ms)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Completed runs by accuracy (descending) then time (ascending),
    /// followed by failed runs in search order.
    pub ranked: Vec<SearchEntry>,
    /// Completed runs not beaten on both accuracy and time, fastest first.
    pub frontier: Vec<SearchEntry>,
}

/// Trains and evaluates every point of `space` with the same seed and
/// epoch budget. A run that fails is recorded and the search continues.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    train: &[Example],
    test: &[Example],
    grid: &GridMap,
    n_aps: usize,
    space: &SearchSpace,
    opts: &TrainOptions,
    eval_batch_size: usize,
    timing_repetitions: usize,
) -> Result<SearchResult> {
    if space.is_empty() {
        return Err(EvalError::Invalid("search space is empty".into()));
    }
    let mut entries = Vec::with_capacity(space.len());
    for (filters, channels, dim) in space.points() {
        let config = CapsNetConfig::new(n_aps, grid.cell_count(), filters, channels, dim);
        let num_parameters = CapsNetParams::zeros(&config).num_parameters();
        log::info!("grid search: {filters}/{channels}/{dim}");
        let outcome = match crate::capsnet::train(train, test, &config, opts) {
            Ok(run) => {
                let model = InferenceModel::new(&config, &run.params)?;
                let report = evaluate_capsnet(
                    &model,
                    test,
                    grid,
                    eval_batch_size,
                    timing_repetitions.max(1),
                    serde_json::Value::Null,
                )?;
                SearchOutcome::Completed {
                    accuracy: report.accuracy,
                    mean_error_m: report.mean_error_m,
                    mean_positioning_time_ms: report.mean_positioning_time_ms.unwrap_or(f64::NAN),
                    final_train_loss: run.log.last().map_or(f64::NAN, |e| e.train_loss),
                }
            }
            Err(TrainError::Diverged { epoch, .. }) => {
                log::warn!("grid search: {filters}/{channels}/{dim} diverged in epoch {epoch}");
                SearchOutcome::Diverged { epoch }
            }
            Err(e) => {
                log::warn!("grid search: {filters}/{channels}/{dim} failed: {e}");
                SearchOutcome::Failed { message: e.to_string() }
            }
        };
        entries.push(SearchEntry {
            filters,
            channels,
            dim,
            num_parameters,
            outcome,
        });
    }
    Ok(rank(entries))
}

fn rank(entries: Vec<SearchEntry>) -> SearchResult {
    let (mut done, failed): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| e.score().is_some());
    done.sort_by(|a, b| {
        let (aa, at) = a.score().unwrap();
        let (ba, bt) = b.score().unwrap();
        ba.total_cmp(&aa).then(at.total_cmp(&bt))
    });
    let mut frontier: Vec<SearchEntry> = done
        .iter()
        .filter(|e| {
            let (acc, t) = e.score().unwrap();
            !done.iter().any(|o| {
                let (oa, ot) = o.score().unwrap();
                oa >= acc && ot <= t && (oa > acc || ot < t)
            })
        })
        .cloned()
        .collect();
    frontier.sort_by(|a, b| a.score().unwrap().1.total_cmp(&b.score().unwrap().1));
    done.extend(failed);
    SearchResult { ranked: done, frontier }
}
