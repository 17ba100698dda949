use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CapsNetConfig, CapsNetError, Result};
use crate::tensor::Tensor;

pub const CONV1_FILTERS: &str = "conv1.filters";
pub const CONV1_BIAS: &str = "conv1.bias";
pub const PRIMARY_FILTERS: &str = "primary.filters";
pub const PRIMARY_BIAS: &str = "primary.bias";
pub const ROUTING_WEIGHTS: &str = "routing.weights";

/// Parameter names in serialization order.
pub const PARAM_NAMES: [&str; 5] = [CONV1_FILTERS, CONV1_BIAS, PRIMARY_FILTERS, PRIMARY_BIAS, ROUTING_WEIGHTS];

#[derive(Debug, Clone, PartialEq)]
pub struct CapsNetParams {
    pub conv1_filters: Tensor,
    pub conv1_bias: Tensor,
    pub primary_filters: Tensor,
    pub primary_bias: Tensor,
    /// `[P, G, D, D]`: one matrix W_ij per (primary, digit) capsule pair.
    pub routing_weights: Tensor,
}

fn expected_shapes(config: &CapsNetConfig) -> [Vec<usize>; 5] {
    [
        config.conv1_filters_shape().to_vec(),
        vec![config.conv1.filters],
        config.primary_filters_shape().to_vec(),
        vec![config.primary.channels * config.primary.dim],
        config.routing_weights_shape().to_vec(),
    ]
}

impl CapsNetParams {
    /// Zero-mean Gaussian weights with fan-in scaling (He for the ReLU
    /// layer, LeCun otherwise); zero biases.
    pub fn init(config: &CapsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |shape: &[usize], fan_in: usize, gain: f64| {
            let std = (gain / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
        };
        let k1 = config.conv1.kernel;
        let kp = config.primary.kernel;
        let [s1, b1, sp, bp, sw] = expected_shapes(config);
        Ok(Self {
            conv1_filters: gaussian(&s1, k1 * k1, 2.0),
            conv1_bias: Tensor::zeros(&b1),
            primary_filters: gaussian(&sp, kp * kp * config.conv1.filters, 1.0),
            primary_bias: Tensor::zeros(&bp),
            routing_weights: gaussian(&sw, config.dim(), 1.0),
        })
    }

    pub fn zeros(config: &CapsNetConfig) -> Self {
        let [s1, b1, sp, bp, sw] = expected_shapes(config);
        Self {
            conv1_filters: Tensor::zeros(&s1),
            conv1_bias: Tensor::zeros(&b1),
            primary_filters: Tensor::zeros(&sp),
            primary_bias: Tensor::zeros(&bp),
            routing_weights: Tensor::zeros(&sw),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.conv1_filters,
            &self.conv1_bias,
            &self.primary_filters,
            &self.primary_bias,
            &self.routing_weights,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    /// Rebuilds from tensors listed in [`PARAM_NAMES`] order.
    pub fn from_tensors(config: &CapsNetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let [a, b, c, d, e]: [Tensor; 5] = tensors
            .try_into()
            .map_err(|v: Vec<Tensor>| CapsNetError::Shape(format!("expected 5 parameter tensors, got {}", v.len())))?;
        let params = Self {
            conv1_filters: a,
            conv1_bias: b,
            primary_filters: c,
            primary_bias: d,
            routing_weights: e,
        };
        params.validate(config)?;
        Ok(params)
    }

    pub fn validate(&self, config: &CapsNetConfig) -> Result<()> {
        config.validate()?;
        for ((name, t), shape) in self.named().zip(expected_shapes(config)) {
            if t.shape() != shape.as_slice() {
                return Err(CapsNetError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(CapsNetError::Shape(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
