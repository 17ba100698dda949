//! Routing-by-agreement between primary and digit capsules, evaluated
//! eagerly with every intermediate kept for inspection.

use super::{CapsNetError, Result};
use crate::tensor::{softmax, squash_in_place, Tensor};

/// Squash a single capsule vector.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    squash_in_place(&mut v);
    v
}

/// Quantities of one routing iteration, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    /// Log priors `[P, G]` at the start of the iteration.
    pub b: Vec<f64>,
    /// Coupling coefficients `[P, G]`, softmax of `b` over parents.
    pub c: Vec<f64>,
    /// Parent inputs `[G, D]`.
    pub s: Vec<f64>,
    /// Parent outputs `[G, D]`.
    pub v: Vec<f64>,
    /// Agreements `[P, G]`.
    pub a: Vec<f64>,
    /// Log priors after the update `b + a`.
    pub b_next: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RoutingOutcome {
    pub num_primary: usize,
    pub num_parents: usize,
    pub dim: usize,
    /// Prediction vectors `[P, G, D]`, computed once.
    pub u_hat: Vec<f64>,
    pub iterations: Vec<RoutingState>,
}

impl RoutingOutcome {
    /// Final parent outputs `[G, D]`.
    pub fn v(&self) -> &[f64] {
        &self.iterations.last().expect("at least one iteration").v
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.v()
            .chunks_exact(self.dim)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Runs `iterations` rounds of routing from primary outputs `u: [P, Di]`
/// through weights `w: [P, G, Do, Di]`.
pub fn dynamic_routing(u: &Tensor, w: &Tensor, iterations: usize) -> Result<RoutingOutcome> {
    if iterations == 0 {
        return Err(CapsNetError::Config("routing needs at least one iteration".into()));
    }
    let [p, d_in] = *u.shape() else {
        return Err(CapsNetError::Shape(format!("u must be [P, D], got {:?}", u.shape())));
    };
    let [wp, g, d, wd] = *w.shape() else {
        return Err(CapsNetError::Shape(format!("W must be [P, G, D, D], got {:?}", w.shape())));
    };
    if wp != p || wd != d_in {
        return Err(CapsNetError::Shape(format!(
            "W {:?} does not match u {:?}",
            w.shape(),
            u.shape()
        )));
    }

    let mut u_hat = vec![0.0; p * g * d];
    for i in 0..p {
        let ui = &u.data()[i * d_in..][..d_in];
        for j in 0..g {
            let wij = &w.data()[(i * g + j) * d * d_in..][..d * d_in];
            for (k, row) in wij.chunks_exact(d_in).enumerate() {
                u_hat[(i * g + j) * d + k] = row.iter().zip(ui).map(|(a, b)| a * b).sum();
            }
        }
    }

    let mut b = vec![0.0; p * g];
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let c = softmax(&Tensor::new(vec![p, g], b.clone())?, 1)?.to_vec();
        let mut s = vec![0.0; g * d];
        for i in 0..p {
            for j in 0..g {
                for k in 0..d {
                    s[j * d + k] += c[i * g + j] * u_hat[(i * g + j) * d + k];
                }
            }
        }
        let mut v = s.clone();
        for vj in v.chunks_exact_mut(d) {
            squash_in_place(vj);
        }
        let mut a = vec![0.0; p * g];
        for i in 0..p {
            for j in 0..g {
                a[i * g + j] = (0..d).map(|k| v[j * d + k] * u_hat[(i * g + j) * d + k]).sum();
            }
        }
        let b_next: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x + y).collect();
        trace.push(RoutingState {
            b: std::mem::replace(&mut b, b_next.clone()),
            c,
            s,
            v,
            a,
            b_next,
        });
    }
    Ok(RoutingOutcome {
        num_primary: p,
        num_parents: g,
        dim: d,
        u_hat,
        iterations: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_child_single_parent() {
        let u = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        let out = dynamic_routing(&u, &w, 1).unwrap();
        assert_eq!(out.iterations[0].c, vec![1.0]);
        assert_eq!(out.v(), squash(&[1.0, -0.5]).as_slice());
    }

    #[test]
    fn symmetric_parents_keep_even_coupling() {
        let u = Tensor::new(vec![1, 3], vec![0.2, 0.7, -0.4]).unwrap();
        let block = [1.0, 0.5, 0.0, -0.3, 1.2, 0.1, 0.0, 0.4, 0.9];
        let w = Tensor::new(vec![1, 2, 3, 3], [block, block].concat()).unwrap();
        let out = dynamic_routing(&u, &w, 5).unwrap();
        for it in &out.iterations {
            assert!((it.c[0] - 0.5).abs() < 1e-15 && (it.c[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let u = Tensor::zeros(&[2, 3]);
        assert!(dynamic_routing(&u, &Tensor::zeros(&[2, 2, 3, 4]), 1).is_err());
        assert!(dynamic_routing(&u, &Tensor::zeros(&[3, 2, 3, 3]), 1).is_err());
        assert!(dynamic_routing(&u, &Tensor::zeros(&[2, 2, 3, 3]), 0).is_err());
    }
}
