use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{margin_loss, predict_grid};
use super::model::{forward_values, loss_and_gradients};
use super::params::PARAM_NAMES;
use super::{CapsNetConfig, CapsNetError, CapsNetParams};
use crate::fingerprint::{difference_matrix, normalize, GridMap, Point, RssSample};
use crate::tensor::{Tensor, TensorError};

/// One preprocessed sample: flattened difference matrix and its cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub location: Point,
}

pub fn prepare_examples(samples: &[RssSample], min_rss: f64, grid: &GridMap) -> Result<Vec<Example>, CapsNetError> {
    samples
        .iter()
        .map(|s| {
            let r = normalize(s, min_rss)?;
            Ok(Example {
                features: difference_matrix(&r)?.into_values(),
                label: grid.cell_of(&s.location)?,
                location: s.location,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor in
/// [`PARAM_NAMES`] order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &CapsNetParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update given gradients in [`PARAM_NAMES`] order.
    pub fn step(&mut self, params: &mut CapsNetParams, grads: &[Vec<f64>]) -> Result<(), CapsNetError> {
        if grads.len() != PARAM_NAMES.len() {
            return Err(CapsNetError::Shape(format!("expected {} gradients, got {}", PARAM_NAMES.len(), grads.len())));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let slots = [
            &mut params.conv1_filters,
            &mut params.conv1_bias,
            &mut params.primary_filters,
            &mut params.primary_bias,
            &mut params.routing_weights,
        ];
        for (k, slot) in slots.into_iter().enumerate() {
            let g = &grads[k];
            if g.len() != slot.len() {
                return Err(CapsNetError::Shape(format!(
                    "{}: gradient has {} values, parameter has {}",
                    PARAM_NAMES[k],
                    g.len(),
                    slot.len()
                )));
            }
            if lr == 0.0 {
                continue;
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let mut data = slot.to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *slot = Tensor::new(slot.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            seed: 42,
            adam: AdamConfig::default(),
        }
    }
}

/// Statistics for one epoch. Training figures are accumulated over the
/// epoch's mini-batches; validation figures use the end-of-epoch weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CapsNetParams,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in epoch {epoch}; returning the checkpoint from epoch {}", .epoch - 1)]
    Diverged {
        epoch: usize,
        last_good: Box<CapsNetParams>,
        log: Vec<EpochLog>,
    },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Model(#[from] CapsNetError),
}

/// Mean margin loss and accuracy of `params` over `examples`.
pub fn evaluate_examples(
    examples: &[Example],
    params: &CapsNetParams,
    config: &CapsNetConfig,
) -> Result<(f64, f64), CapsNetError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut target = vec![0.0; config.num_grids];
    for ex in examples {
        let lengths = forward_values(&ex.features, params, config)?;
        target[ex.label] = 1.0;
        loss += margin_loss(&lengths, &target, &config.margin)?;
        target[ex.label] = 0.0;
        correct += usize::from(predict_grid(&lengths) == ex.label);
    }
    let n = examples.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    config: &CapsNetConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let params = CapsNetParams::init(config, opts.seed)?;
    train_from(params, train_set, val_set, config, opts, |_| {})
}

/// Mini-batch Adam on the mean margin loss, starting from `params`.
/// Examples are visited in a per-epoch shuffle drawn from `opts.seed`;
/// within a batch, gradients are summed in visiting order, so runs with the
/// same inputs are bit-identical.
pub fn train_from(
    mut params: CapsNetParams,
    train_set: &[Example],
    val_set: &[Example],
    config: &CapsNetConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    params.validate(config)?;
    if opts.batch_size == 0 {
        return Err(TrainError::Setup("batch_size must be >= 1".into()));
    }
    if train_set.is_empty() {
        return Err(TrainError::Setup("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(opts.adam, &params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();

    for epoch in 1..=opts.epochs {
        let checkpoint = params.clone();
        let diverged = |log: &Vec<EpochLog>| TrainError::Diverged {
            epoch,
            last_good: Box::new(checkpoint.clone()),
            log: log.clone(),
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            acc.iter_mut().for_each(|a| a.fill(0.0));
            for &idx in batch {
                let ex = &train_set[idx];
                let sg = match loss_and_gradients(&ex.features, ex.label, &params, config) {
                    Ok(sg) => sg,
                    Err(CapsNetError::Tensor(TensorError::NonFinite(_))) => return Err(diverged(&log)),
                    Err(e) => return Err(e.into()),
                };
                if !sg.loss.is_finite() {
                    return Err(diverged(&log));
                }
                loss_sum += sg.loss;
                correct += usize::from(predict_grid(&sg.lengths) == ex.label);
                for (a, name) in acc.iter_mut().zip(PARAM_NAMES) {
                    let g = sg.grads.get(name).expect("every parameter has a gradient");
                    a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x *= scale);
            if acc.iter().flatten().any(|x| !x.is_finite()) {
                return Err(diverged(&log));
            }
            adam.step(&mut params, &acc)?;
        }
        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_examples(val_set, &params, config)?;
            (Some(l), Some(a))
        };
        if val_loss.is_some_and(|l| !l.is_finite()) {
            return Err(diverged(&log));
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val acc {:?}",
            entry.train_loss,
            entry.train_accuracy,
            entry.val_accuracy
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_examples(n_per_class: usize) -> Vec<Example> {
        // 4 classes, each a distinct fixed RSS profile over 6 APs
        let profiles = [
            [6.0, 4.0, 2.0, 1.0, 3.0, 5.0],
            [1.0, 3.0, 5.0, 6.0, 4.0, 2.0],
            [4.0, 6.0, 1.0, 2.0, 5.0, 3.0],
            [2.0, 1.0, 4.0, 5.0, 6.0, 0.5],
        ];
        let mut out = Vec::new();
        for k in 0..n_per_class {
            for (label, p) in profiles.iter().enumerate() {
                let r: Vec<f64> = p.iter().map(|v| v + 0.01 * k as f64).collect();
                out.push(Example {
                    features: difference_matrix(&r).unwrap().into_values(),
                    label,
                    location: Point::new(0.0, 0.0),
                });
            }
        }
        out
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
        let params = CapsNetParams::init(&cfg, 1).unwrap();
        let mut updated = params.clone();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
            &params,
        );
        let ex = &toy_examples(1)[0];
        let sg = loss_and_gradients(&ex.features, ex.label, &params, &cfg).unwrap();
        let grads: Vec<Vec<f64>> = PARAM_NAMES.iter().map(|n| sg.grads.get(n).unwrap().to_vec()).collect();
        adam.step(&mut updated, &grads).unwrap();
        assert_eq!(updated, params);
    }

    #[test]
    fn one_step_moves_against_gradient() {
        let cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
        let params = CapsNetParams::init(&cfg, 1).unwrap();
        let ex = &toy_examples(1)[1];
        let before = loss_and_gradients(&ex.features, ex.label, &params, &cfg).unwrap();
        let grads: Vec<Vec<f64>> = PARAM_NAMES.iter().map(|n| before.grads.get(n).unwrap().to_vec()).collect();
        let mut p = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &grads).unwrap();
        let after = loss_and_gradients(&ex.features, ex.label, &p, &cfg).unwrap();
        assert!(after.loss < before.loss);
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        let cfg = CapsNetConfig::new(6, 4, 8, 4, 4);
        let data = toy_examples(50);
        assert_eq!(data.len(), 200);
        let opts = TrainOptions {
            epochs: 30,
            batch_size: 16,
            seed: 3,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
        };
        let out = train(&data, &[], &cfg, &opts).unwrap();
        let (_, acc) = evaluate_examples(&data, &out.params, &cfg).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn fixed_seed_reproduces_log() {
        let cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
        let data = toy_examples(5);
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 3,
            ..TrainOptions::default()
        };
        let a = train(&data, &data[..4], &cfg, &opts).unwrap();
        let b = train(&data, &data[..4], &cfg, &opts).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_returns_checkpoint() {
        let cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
        let data = toy_examples(2);
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            seed: 1,
            adam: AdamConfig {
                learning_rate: f64::INFINITY,
                ..AdamConfig::default()
            },
        };
        match train(&data, &[], &cfg, &opts) {
            Err(TrainError::Diverged { epoch, last_good, log }) => {
                assert_eq!(epoch, 1);
                assert!(log.is_empty());
                assert_eq!(*last_good, CapsNetParams::init(&cfg, 1).unwrap());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_batch_size() {
        let cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
        let opts = TrainOptions {
            batch_size: 0,
            ..TrainOptions::default()
        };
        assert!(matches!(train(&toy_examples(1), &[], &cfg, &opts), Err(TrainError::Setup(_))));
    }
}
