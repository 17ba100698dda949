use super::{CapsNetConfig, CapsNetError, CapsNetParams, Result};

/// Single-precision, batched forward pass over frozen parameters.
///
/// Activations are stored batch-innermost (`[..., S]`, S the batch padded
/// to whole lane groups), so each weight is fetched once per lane group
/// instead of once per sample, and fixed per-call work is shared by the
/// batch. Every sample follows the same operation sequence whatever the
/// batch size, so batched and single results are bit-identical.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    config: CapsNetConfig,
    /// Conv filters transposed to `[cout, k * k * cin]`.
    conv1_filters: Vec<f32>,
    conv1_bias: Vec<f32>,
    primary_filters: Vec<f32>,
    primary_bias: Vec<f32>,
    routing_weights: Vec<f32>,
}

const LANES: usize = 8;
type Lane = [f32; LANES];

fn to_f32(t: &crate::tensor::Tensor) -> Vec<f32> {
    t.data().iter().map(|&x| x as f32).collect()
}

/// HWIO filters to `[cout, k * k * cin]`.
fn transpose_filters(t: &crate::tensor::Tensor) -> Vec<f32> {
    let cout = *t.shape().last().expect("rank-4 filters");
    let taps = t.len() / cout;
    let mut out = vec![0.0f32; t.len()];
    for (q, row) in t.data().chunks_exact(cout).enumerate() {
        for (co, &w) in row.iter().enumerate() {
            out[co * taps + q] = w as f32;
        }
    }
    out
}

#[inline(always)]
fn lane(x: &[f32], at: usize) -> &Lane {
    x[at..at + LANES].try_into().expect("lane")
}

/// `dst = init + sum_q w[q] * rows[q]`, accumulated lane group by lane group.
#[inline]
fn combine(dst: &mut [f32], init: f32, w: &[f32], rows: &[&[f32]]) {
    for (g, out) in dst.as_chunks_mut::<LANES>().0.iter_mut().enumerate() {
        let at = g * LANES;
        let mut acc = [init; LANES];
        for (&wq, row) in w.iter().zip(rows) {
            let r = lane(row, at);
            for k in 0..LANES {
                acc[k] += wq * r[k];
            }
        }
        *out = acc;
    }
}

/// Valid convolution; `x` is `[side, side, cin, S]`, `ft` is `[cout, taps]`,
/// output `[o, o, cout, S]`.
#[allow(clippy::too_many_arguments)]
fn conv(x: &[f32], side: usize, cin: usize, ft: &[f32], bias: &[f32], k: usize, stride: usize, ls: usize, out: &mut [f32]) {
    let cout = bias.len();
    let taps = k * k * cin;
    let o = (side - k) / stride + 1;
    let mut patch: Vec<&[f32]> = Vec::with_capacity(taps);
    for oy in 0..o {
        for ox in 0..o {
            patch.clear();
            for ky in 0..k {
                for kx in 0..k {
                    let pos = (oy * stride + ky) * side + ox * stride + kx;
                    patch.extend(x[pos * cin * ls..][..cin * ls].chunks_exact(ls));
                }
            }
            let dst = &mut out[(oy * o + ox) * cout * ls..][..cout * ls];
            for ((row, &b), w) in dst.chunks_exact_mut(ls).zip(bias).zip(ft.chunks_exact(taps)) {
                combine(row, b, w, &patch);
            }
        }
    }
}

/// Squashes `[caps, D, S]` in place along D, per capsule and lane.
fn squash_batch(x: &mut [f32], dim: usize, ls: usize, live: usize, scale: &mut [f32]) {
    for cap in x.chunks_exact_mut(dim * ls) {
        for (g, out) in scale.as_chunks_mut::<LANES>().0.iter_mut().enumerate() {
            let mut acc = [0.0f32; LANES];
            for row in cap.chunks_exact(ls) {
                let r = lane(row, g * LANES);
                for k in 0..LANES {
                    acc[k] += r[k] * r[k];
                }
            }
            *out = acc;
        }
        for n2 in &mut scale[..live] {
            // |s| / (1 + |s|^2); zero stays zero
            *n2 = if *n2 == 0.0 { 0.0 } else { n2.sqrt() / (1.0 + *n2) };
        }
        for row in cap.chunks_exact_mut(ls) {
            for (v, &s) in row.iter_mut().zip(scale.iter()) {
                *v *= s;
            }
        }
    }
}

impl InferenceModel {
    pub fn new(config: &CapsNetConfig, params: &CapsNetParams) -> Result<Self> {
        params.validate(config)?;
        Ok(Self {
            config: *config,
            conv1_filters: transpose_filters(&params.conv1_filters),
            conv1_bias: to_f32(&params.conv1_bias),
            primary_filters: transpose_filters(&params.primary_filters),
            primary_bias: to_f32(&params.primary_bias),
            routing_weights: to_f32(&params.routing_weights),
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    pub fn input_len(&self) -> usize {
        self.config.n_aps * self.config.n_aps
    }

    /// Capsule lengths for `inputs` holding whole `n x n` matrices back to
    /// back; returns `[B, G]` row-major.
    pub fn forward_batch(&self, inputs: &[f32]) -> Result<Vec<f32>> {
        let m = self.input_len();
        if inputs.len() % m != 0 {
            return Err(CapsNetError::Shape(format!(
                "batch of {} values is not a multiple of {m}",
                inputs.len()
            )));
        }
        let live = inputs.len() / m;
        if live == 0 {
            return Ok(Vec::new());
        }
        let ls = live.div_ceil(LANES) * LANES;
        let cfg = &self.config;
        let n = cfg.n_aps;
        let f1 = cfg.conv1.filters;
        let side1 = cfg.conv1_side();
        let side2 = cfg.primary_side();
        let cp = cfg.primary.channels * cfg.primary.dim;
        let p = cfg.num_primary_capsules();
        let g = cfg.num_grids;
        let d = cfg.dim();

        let mut x = vec![0.0f32; m * ls];
        for (b, sample) in inputs.chunks_exact(m).enumerate() {
            for (e, &v) in sample.iter().enumerate() {
                x[e * ls + b] = v;
            }
        }

        let mut h1 = vec![0.0f32; side1 * side1 * f1 * ls];
        conv(&x, n, 1, &self.conv1_filters, &self.conv1_bias, cfg.conv1.kernel, cfg.conv1.stride, ls, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));

        // [side2, side2, ch * dim, S] is already [P, D, S]
        let mut u = vec![0.0f32; side2 * side2 * cp * ls];
        conv(
            &h1,
            side1,
            f1,
            &self.primary_filters,
            &self.primary_bias,
            cfg.primary.kernel,
            cfg.primary.stride,
            ls,
            &mut u,
        );
        let mut scratch = vec![0.0f32; ls];
        squash_batch(&mut u, d, ls, live, &mut scratch);

        // u_hat: [P, G, D, S]
        let mut u_hat = vec![0.0f32; p * g * d * ls];
        for i in 0..p {
            let ui: Vec<&[f32]> = u[i * d * ls..][..d * ls].chunks_exact(ls).collect();
            for j in 0..g {
                let w = &self.routing_weights[(i * g + j) * d * d..][..d * d];
                let dst = &mut u_hat[(i * g + j) * d * ls..][..d * ls];
                for (row, wrow) in dst.chunks_exact_mut(ls).zip(w.chunks_exact(d)) {
                    combine(row, 0.0, wrow, &ui);
                }
            }
        }

        // routing; logits and couplings are [P, G, S], outputs [G, D, S]
        let mut logits = vec![0.0f32; p * g * ls];
        let mut c = vec![0.0f32; p * g * ls];
        let mut v = vec![0.0f32; g * d * ls];
        let mut zmax = vec![0.0f32; ls];
        for it in 0..cfg.routing_iterations {
            for (lrow, crow) in logits.chunks_exact(g * ls).zip(c.chunks_exact_mut(g * ls)) {
                zmax.fill(f32::NEG_INFINITY);
                for lj in lrow.chunks_exact(ls) {
                    for (mx, &l) in zmax.iter_mut().zip(lj) {
                        *mx = mx.max(l);
                    }
                }
                scratch.fill(0.0);
                for (cj, lj) in crow.chunks_exact_mut(ls).zip(lrow.chunks_exact(ls)) {
                    for b in 0..live {
                        cj[b] = (lj[b] - zmax[b]).exp();
                        scratch[b] += cj[b];
                    }
                }
                for cj in crow.chunks_exact_mut(ls) {
                    for b in 0..live {
                        cj[b] /= scratch[b];
                    }
                }
            }
            for j in 0..g {
                for dd in 0..d {
                    let dst = &mut v[(j * d + dd) * ls..][..ls];
                    for (grp, out) in dst.as_chunks_mut::<LANES>().0.iter_mut().enumerate() {
                        let at = grp * LANES;
                        let mut acc = [0.0f32; LANES];
                        for i in 0..p {
                            let cij = lane(&c, (i * g + j) * ls + at);
                            let uh = lane(&u_hat, ((i * g + j) * d + dd) * ls + at);
                            for k in 0..LANES {
                                acc[k] += cij[k] * uh[k];
                            }
                        }
                        *out = acc;
                    }
                }
            }
            squash_batch(&mut v, d, ls, live, &mut scratch);
            if it + 1 < cfg.routing_iterations {
                for i in 0..p {
                    for j in 0..g {
                        let lij = &mut logits[(i * g + j) * ls..][..ls];
                        let src = &u_hat[(i * g + j) * d * ls..][..d * ls];
                        let vj = &v[j * d * ls..][..d * ls];
                        for (grp, out) in lij.as_chunks_mut::<LANES>().0.iter_mut().enumerate() {
                            let at = grp * LANES;
                            let mut acc = [0.0f32; LANES];
                            for dd in 0..d {
                                let a = lane(vj, dd * ls + at);
                                let b = lane(src, dd * ls + at);
                                for k in 0..LANES {
                                    acc[k] += a[k] * b[k];
                                }
                            }
                            for k in 0..LANES {
                                out[k] += acc[k];
                            }
                        }
                    }
                }
            }
        }

        let mut out = vec![0.0f32; live * g];
        for j in 0..g {
            for b in 0..live {
                let s: f32 = (0..d).map(|dd| v[(j * d + dd) * ls + b].powi(2)).sum();
                out[b * g + j] = s.sqrt();
            }
        }
        Ok(out)
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.input_len() {
            return Err(CapsNetError::Shape(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.input_len()
            )));
        }
        self.forward_batch(input)
    }
}
