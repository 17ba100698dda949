use serde::{Deserialize, Serialize};

use super::{CapsNetError, Result};
use crate::tensor::conv_out_extent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(CapsNetError::Config(format!(
                "margins must satisfy 0 < m- < m+ <= 1 (m+ = {}, m- = {})",
                self.m_plus, self.m_minus
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(CapsNetError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1Config {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCapsConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub dim: usize,
}

/// Layer sizes of the network. Digit capsules share the primary capsule
/// dimension; there is one digit capsule per grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsNetConfig {
    pub n_aps: usize,
    pub num_grids: usize,
    pub conv1: Conv1Config,
    pub primary: PrimaryCapsConfig,
    pub routing_iterations: usize,
    #[serde(default)]
    pub margin: MarginLossConfig,
}

impl CapsNetConfig {
    /// Conv1 3x3/1 and PrimaryCaps 2x2/2 with three routing iterations.
    pub fn new(n_aps: usize, num_grids: usize, filters: usize, channels: usize, dim: usize) -> Self {
        Self {
            n_aps,
            num_grids,
            conv1: Conv1Config {
                kernel: 3,
                stride: 1,
                filters,
            },
            primary: PrimaryCapsConfig {
                kernel: 2,
                stride: 2,
                channels,
                dim,
            },
            routing_iterations: 3,
            margin: MarginLossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CapsNetError::Config(m));
        if self.n_aps < 2 {
            return bad(format!("n_aps must be >= 2, got {}", self.n_aps));
        }
        if self.num_grids < 2 {
            return bad(format!("num_grids must be >= 2, got {}", self.num_grids));
        }
        if self.routing_iterations < 1 {
            return bad("routing_iterations must be >= 1".into());
        }
        let c = &self.conv1;
        let p = &self.primary;
        if [c.kernel, c.stride, c.filters, p.kernel, p.stride, p.channels, p.dim].contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if c.kernel > self.n_aps {
            return bad(format!("conv1 kernel {} exceeds input {}", c.kernel, self.n_aps));
        }
        let side = self.conv1_side();
        if p.kernel > side {
            return bad(format!("primary kernel {} exceeds conv1 output {}", p.kernel, side));
        }
        self.margin.validate()
    }

    /// Spatial extent of the Conv1 output.
    pub fn conv1_side(&self) -> usize {
        conv_out_extent(self.n_aps, self.conv1.kernel, self.conv1.stride)
    }

    /// Spatial extent of the PrimaryCaps convolution output.
    pub fn primary_side(&self) -> usize {
        conv_out_extent(self.conv1_side(), self.primary.kernel, self.primary.stride)
    }

    /// Number of primary capsules P.
    pub fn num_primary_capsules(&self) -> usize {
        self.primary_side().pow(2) * self.primary.channels
    }

    pub fn dim(&self) -> usize {
        self.primary.dim
    }

    pub fn conv1_filters_shape(&self) -> [usize; 4] {
        [self.conv1.kernel, self.conv1.kernel, 1, self.conv1.filters]
    }

    pub fn primary_filters_shape(&self) -> [usize; 4] {
        let p = &self.primary;
        [p.kernel, p.kernel, self.conv1.filters, p.channels * p.dim]
    }

    pub fn routing_weights_shape(&self) -> [usize; 4] {
        [self.num_primary_capsules(), self.num_grids, self.dim(), self.dim()]
    }
}
