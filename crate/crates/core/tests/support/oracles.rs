//! Independent oracles shared by the integration and acceptance suites.

use edgeloc_core::capsnet::{dynamic_routing, forward_values, loss_and_gradients, margin_loss, CapsNetConfig, CapsNetParams, PARAM_NAMES};
use edgeloc_core::fingerprint::difference_matrix;
use edgeloc_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;
/// Denominator floor so that gradients that vanish analytically are
/// compared absolutely rather than relative to round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Routing written out directly from the algorithm, indices spelled out,
/// no shared helpers. Returns (v, per-iteration c).
pub fn oracle(u: &[Vec<f64>], w: &[Vec<Vec<Vec<f64>>>], t: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let p = u.len();
    let g = w[0].len();
    let d = w[0][0].len();
    let mut u_hat = vec![vec![vec![0.0; d]; g]; p];
    for i in 0..p {
        for j in 0..g {
            for r in 0..d {
                let mut acc = 0.0;
                for k in 0..u[i].len() {
                    acc += w[i][j][r][k] * u[i][k];
                }
                u_hat[i][j][r] = acc;
            }
        }
    }
    let mut b = vec![vec![0.0; g]; p];
    let mut v = vec![vec![0.0; d]; g];
    let mut cs = Vec::new();
    for _ in 0..t {
        let mut c = vec![vec![0.0; g]; p];
        for i in 0..p {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..g {
                c[i][j] = (b[i][j] - m).exp() / z;
            }
        }
        for j in 0..g {
            let mut s = vec![0.0; d];
            for i in 0..p {
                for r in 0..d {
                    s[r] += c[i][j] * u_hat[i][j][r];
                }
            }
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let n = n2.sqrt();
            for r in 0..d {
                v[j][r] = if n == 0.0 { 0.0 } else { n2 / (1.0 + n2) * s[r] / n };
            }
        }
        for i in 0..p {
            for j in 0..g {
                let a: f64 = (0..d).map(|r| v[j][r] * u_hat[i][j][r]).sum();
                b[i][j] += a;
            }
        }
        cs.push(c);
    }
    (v, cs)
}

pub fn random_instance(rng: &mut ChaCha8Rng, p: usize, g: usize, d: usize, scale: f64) -> (Tensor, Tensor) {
    let u: Vec<f64> = (0..p * d).map(|_| rng.random_range(-scale..scale)).collect();
    let w: Vec<f64> = (0..p * g * d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        Tensor::new(vec![p, d], u).unwrap(),
        Tensor::new(vec![p, g, d, d], w).unwrap(),
    )
}

pub fn nested(u: &Tensor, w: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let (p, d) = (u.shape()[0], u.shape()[1]);
    let g = w.shape()[1];
    let uu = u.data().chunks(d).map(|r| r.to_vec()).collect();
    let ww = (0..p)
        .map(|i| {
            (0..g)
                .map(|j| {
                    (0..d)
                        .map(|r| w.data()[((i * g + j) * d + r) * d..][..d].to_vec())
                        .collect()
                })
                .collect()
        })
        .collect();
    (uu, ww)
}

fn model_loss(x: &[f64], label: usize, params: &CapsNetParams, cfg: &CapsNetConfig) -> f64 {
    let lengths = forward_values(x, params, cfg).unwrap();
    let mut target = vec![0.0; cfg.num_grids];
    target[label] = 1.0;
    margin_loss(&lengths, &target, &cfg.margin).unwrap()
}

fn with_entry(params: &CapsNetParams, cfg: &CapsNetConfig, which: usize, idx: usize, delta: f64) -> CapsNetParams {
    let mut tensors: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let mut data = tensors[which].to_vec();
    data[idx] += delta;
    tensors[which] = Tensor::new(tensors[which].shape().to_vec(), data).unwrap();
    CapsNetParams::from_tensors(cfg, tensors).unwrap()
}

/// Largest relative error over every parameter of a 6x6-input network with
/// capsule dimension 4, two routing iterations and four grid cells.
pub fn end_to_end_max_rel_error(seed: u64) -> f64 {
    let mut cfg = CapsNetConfig::new(6, 4, 4, 2, 4);
    cfg.routing_iterations = 2;
    let params = CapsNetParams::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.0)).collect();
    let x = difference_matrix(&r).unwrap().into_values();
    let label = rng.random_range(0..4);
    let analytic = loss_and_gradients(&x, label, &params, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (which, name) in PARAM_NAMES.iter().enumerate() {
        let g = analytic.grads.get(name).unwrap();
        for idx in 0..g.len() {
            let lp = model_loss(&x, label, &with_entry(&params, &cfg, which, idx, H), &cfg);
            let lm = model_loss(&x, label, &with_entry(&params, &cfg, which, idx, -H), &cfg);
            worst = worst.max(rel_err(g.data()[idx], (lp - lm) / (2.0 * H)));
        }
    }
    worst
}

/// Worst deviations seen over a batch of random routing instances.
#[derive(Debug, Default, Clone, Copy)]
pub struct RoutingCheck {
    pub instances: usize,
    pub max_row_sum_dev: f64,
    pub max_v_norm: f64,
    pub max_oracle_dev: f64,
}

/// Random (P <= 12, G <= 8, D <= 6, t <= 5) instances against [`oracle`].
pub fn check_random_routing(instances: usize, seed: u64) -> RoutingCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RoutingCheck {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let p = rng.random_range(1..=12);
        let g = rng.random_range(1..=8);
        let d = rng.random_range(1..=6);
        let t = rng.random_range(1..=5);
        let scale = [0.1, 1.0, 5.0][rng.random_range(0..3)];
        let (u, w) = random_instance(&mut rng, p, g, d, scale);
        let got = dynamic_routing(&u, &w, t).unwrap();
        let (uu, ww) = nested(&u, &w);
        let (v, cs) = oracle(&uu, &ww, t);
        for (it, state) in got.iterations.iter().enumerate() {
            for row in state.c.chunks(g) {
                out.max_row_sum_dev = out.max_row_sum_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for vj in state.v.chunks(d) {
                out.max_v_norm = out.max_v_norm.max(vj.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
            for (a, b) in state.c.iter().zip(cs[it].iter().flatten()) {
                out.max_oracle_dev = out.max_oracle_dev.max((a - b).abs());
            }
        }
        for (a, b) in got.v().iter().zip(v.iter().flatten()) {
            out.max_oracle_dev = out.max_oracle_dev.max((a - b).abs());
        }
    }
    out
}
