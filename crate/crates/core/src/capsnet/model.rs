use super::params::{CONV1_BIAS, CONV1_FILTERS, PRIMARY_BIAS, PRIMARY_FILTERS, ROUTING_WEIGHTS};
use super::{CapsNetConfig, CapsNetError, CapsNetParams, Result};
use crate::fingerprint::FeatureMatrix;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Handles into a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub primary: Var,
    pub u_hat: Var,
    pub v: Var,
    pub lengths: Var,
}

fn check_input(x: &[f64], config: &CapsNetConfig) -> Result<()> {
    let n = config.n_aps;
    if x.len() != n * n {
        return Err(CapsNetError::Shape(format!(
            "input has {} values, model expects {n}x{n}",
            x.len()
        )));
    }
    Ok(())
}

/// Records the full network on `tape`: Conv1 (ReLU), PrimaryCaps conv,
/// reshape into P capsules, squash, routing, and capsule lengths.
pub fn record_forward(tape: &mut Tape, x: &[f64], params: &CapsNetParams, config: &CapsNetConfig) -> Result<ForwardVars> {
    check_input(x, config)?;
    let n = config.n_aps;
    let p = config.num_primary_capsules();
    let g = config.num_grids;
    let d = config.dim();

    let input = tape.constant(Tensor::new(vec![n, n, 1], x.to_vec())?);
    let f1 = tape.param(CONV1_FILTERS, params.conv1_filters.clone());
    let b1 = tape.param(CONV1_BIAS, params.conv1_bias.clone());
    let f2 = tape.param(PRIMARY_FILTERS, params.primary_filters.clone());
    let b2 = tape.param(PRIMARY_BIAS, params.primary_bias.clone());
    let w = tape.param(ROUTING_WEIGHTS, params.routing_weights.clone());

    let c1 = tape.conv2d(input, f1, b1, config.conv1.stride)?;
    let c1 = tape.relu(c1)?;
    let pc = tape.conv2d(c1, f2, b2, config.primary.stride)?;
    let u = tape.reshape(pc, &[p, d])?;
    let primary = tape.squash_rows(u)?;
    let u_hat = tape.capsule_predict(primary, w)?;

    let mut b = tape.constant(Tensor::zeros(&[p, g]));
    let mut v = None;
    for it in 0..config.routing_iterations {
        let c = tape.softmax(b, 1)?;
        let s = tape.weighted_sum(c, u_hat)?;
        let vj = tape.squash_rows(s)?;
        v = Some(vj);
        // the last update of b cannot reach the output
        if it + 1 < config.routing_iterations {
            let a = tape.agreement(vj, u_hat)?;
            b = tape.add(b, a)?;
        }
    }
    let v = v.expect("routing_iterations >= 1");
    let lengths = tape.row_norm(v)?;
    Ok(ForwardVars {
        primary,
        u_hat,
        v,
        lengths,
    })
}

/// Output capsule lengths, one per grid cell, each in `[0, 1)`.
pub fn forward(x: &FeatureMatrix, params: &CapsNetParams, config: &CapsNetConfig) -> Result<Vec<f64>> {
    forward_values(x.values(), params, config)
}

pub fn forward_values(x: &[f64], params: &CapsNetParams, config: &CapsNetConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = record_forward(&mut tape, x, params, config)?;
    Ok(tape.value(vars.lengths).to_vec())
}

/// Per-sample margin loss, its lengths, and parameter gradients.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub lengths: Vec<f64>,
    pub grads: Gradients,
}

pub fn loss_and_gradients(x: &[f64], label: usize, params: &CapsNetParams, config: &CapsNetConfig) -> Result<SampleGradient> {
    if label >= config.num_grids {
        return Err(CapsNetError::Label(format!("label {label} out of range for {} grids", config.num_grids)));
    }
    let mut tape = Tape::new();
    let vars = record_forward(&mut tape, x, params, config)?;
    let mut target = vec![0.0; config.num_grids];
    target[label] = 1.0;
    let m = config.margin;
    let loss = tape.margin_loss(vars.lengths, &target, m.m_plus, m.m_minus, m.lambda)?;
    let grads = tape.backward(loss)?;
    Ok(SampleGradient {
        loss: tape.value(loss).item(),
        lengths: tape.value(vars.lengths).to_vec(),
        grads,
    })
}
