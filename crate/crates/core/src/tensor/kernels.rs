//! Raw slice kernels shared by the eager functions and the tape.

use super::{Result, TensorError};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn check(input: &[usize], filters: &[usize], bias: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::InvalidStride);
        }
        let mismatch = |expected: String, got: &[usize]| TensorError::ShapeMismatch {
            op: "conv2d",
            expected,
            got: format!("{:?}", got),
        };
        let [h, w, cin] = *input else {
            return Err(mismatch("input [H, W, Cin]".into(), input));
        };
        let [kh, kw, fcin, cout] = *filters else {
            return Err(mismatch("filters [kh, kw, Cin, Cout]".into(), filters));
        };
        if fcin != cin {
            return Err(mismatch(format!("filters with Cin = {cin}"), filters));
        }
        if kh > h || kw > w {
            return Err(mismatch(format!("kernel no larger than input {h}x{w}"), filters));
        }
        if bias != [cout] {
            return Err(mismatch(format!("bias [{cout}]"), bias));
        }
        Ok(Self {
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.oh, self.ow, self.cout]
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], filters: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            o.copy_from_slice(bias);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let iy = oy * g.stride + ky;
                    let ix = ox * g.stride + kx;
                    let x = &input[(iy * g.w + ix) * g.cin..][..g.cin];
                    let fbase = (ky * g.kw + kx) * g.cin;
                    for (ci, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let f = &filters[(fbase + ci) * g.cout..][..g.cout];
                        for (acc, &fv) in o.iter_mut().zip(f) {
                            *acc += xv * fv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates filter and bias gradients, and the input gradient when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    filters: &[f64],
    grad_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_filters: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    if let Some(db) = d_bias {
        for go in grad_out.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(go) {
                *d += v;
            }
        }
    }
    if let Some(df) = d_filters {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &grad_out[(oy * g.ow + ox) * g.cout..][..g.cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        let x = &input[(iy * g.w + ix) * g.cin..][..g.cin];
                        let fbase = (ky * g.kw + kx) * g.cin;
                        for (ci, &xv) in x.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let d = &mut df[(fbase + ci) * g.cout..][..g.cout];
                            for (dv, &gv) in d.iter_mut().zip(go) {
                                *dv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(di) = d_input {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &grad_out[(oy * g.ow + ox) * g.cout..][..g.cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        let fbase = (ky * g.kw + kx) * g.cin;
                        for ci in 0..g.cin {
                            let f = &filters[(fbase + ci) * g.cout..][..g.cout];
                            let dot: f64 = f.iter().zip(go).map(|(a, b)| a * b).sum();
                            di[(iy * g.w + ix) * g.cin + ci] += dot;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis(shape: &[usize], x: &[f64], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[idx(k)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_axis_backward(shape: &[usize], y: &[f64], gy: &[f64], axis: usize, gx: &mut [f64]) {
    let (outer, n, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| y[idx(k)] * gy[idx(k)]).sum();
            for k in 0..n {
                gx[idx(k)] += y[idx(k)] * (gy[idx(k)] - dot);
            }
        }
    }
}

/// Scale-safe Euclidean norm.
pub(crate) fn norm(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * v.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt()
}

/// `n / (1 + n^2)`, the factor with `squash(s) = factor(|s|) * s`.
fn squash_factor(n: f64) -> f64 {
    if n > 1.0 {
        1.0 / (n + 1.0 / n)
    } else {
        n / (1.0 + n * n)
    }
}

/// Lengths below this are treated as the origin, where squash is flat.
pub const SQUASH_EPS: f64 = 1e-300;

/// Squash one capsule vector in place: `|s|^2 / (1 + |s|^2) * s / |s|`, with 0 at the origin.
pub fn squash_in_place(s: &mut [f64]) {
    let n = norm(s);
    if n < SQUASH_EPS {
        s.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // s/n first so huge inputs never overflow
    let gain = if n > 1.0 { 1.0 / (1.0 + 1.0 / (n * n)) } else { n * n / (1.0 + n * n) };
    for v in s.iter_mut() {
        *v = (*v / n) * gain;
    }
}

/// Gradient of squash for a single vector `s` given upstream `g`.
pub(crate) fn squash_backward(s: &[f64], g: &[f64], gs: &mut [f64]) {
    let n = norm(s);
    if n < SQUASH_EPS {
        return;
    }
    let h = squash_factor(n);
    // n * h'(n) = h * (1 - n^2) / (1 + n^2)
    let ratio = if n > 1.0 {
        let inv = 1.0 / (n * n);
        (inv - 1.0) / (inv + 1.0)
    } else {
        (1.0 - n * n) / (1.0 + n * n)
    };
    let radial = h * ratio;
    let ug: f64 = s.iter().zip(g).map(|(a, b)| (a / n) * b).sum();
    for ((d, &sv), &gv) in gs.iter_mut().zip(s).zip(g) {
        *d += h * gv + radial * ug * (sv / n);
    }
}

/// `u_hat[i, j, :] = W[i, j] u[i]` with `u: [P, Di]`, `W: [P, G, Do, Di]`.
pub(crate) fn capsule_predict(p: usize, g: usize, d_out: usize, d_in: usize, u: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p * g * d_out];
    for i in 0..p {
        let ui = &u[i * d_in..][..d_in];
        for j in 0..g {
            let wij = &w[(i * g + j) * d_out * d_in..][..d_out * d_in];
            let o = &mut out[(i * g + j) * d_out..][..d_out];
            for (oa, row) in o.iter_mut().zip(wij.chunks_exact(d_in)) {
                *oa = row.iter().zip(ui).map(|(a, b)| a * b).sum();
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn capsule_predict_backward(
    p: usize,
    g: usize,
    d_out: usize,
    d_in: usize,
    u: &[f64],
    w: &[f64],
    grad: &[f64],
    mut du: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    for i in 0..p {
        let ui = &u[i * d_in..][..d_in];
        for j in 0..g {
            let base = (i * g + j) * d_out * d_in;
            let gij = &grad[(i * g + j) * d_out..][..d_out];
            if let Some(dw) = dw.as_deref_mut() {
                let d = &mut dw[base..][..d_out * d_in];
                for (row, &ga) in d.chunks_exact_mut(d_in).zip(gij) {
                    for (dv, &ub) in row.iter_mut().zip(ui) {
                        *dv += ga * ub;
                    }
                }
            }
            if let Some(du) = du.as_deref_mut() {
                let wij = &w[base..][..d_out * d_in];
                let dui = &mut du[i * d_in..][..d_in];
                for (row, &ga) in wij.chunks_exact(d_in).zip(gij) {
                    for (dv, &wv) in dui.iter_mut().zip(row) {
                        *dv += ga * wv;
                    }
                }
            }
        }
    }
}

/// `S[j, :] = sum_i c[i, j] u_hat[i, j, :]`.
pub(crate) fn weighted_sum(p: usize, g: usize, d: usize, c: &[f64], u_hat: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; g * d];
    for i in 0..p {
        for j in 0..g {
            let cij = c[i * g + j];
            let uh = &u_hat[(i * g + j) * d..][..d];
            for (sv, &uv) in s[j * d..][..d].iter_mut().zip(uh) {
                *sv += cij * uv;
            }
        }
    }
    s
}

/// `a[i, j] = v[j] . u_hat[i, j]`.
pub(crate) fn agreement(p: usize, g: usize, d: usize, v: &[f64], u_hat: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; p * g];
    for i in 0..p {
        for j in 0..g {
            let uh = &u_hat[(i * g + j) * d..][..d];
            a[i * g + j] = v[j * d..][..d].iter().zip(uh).map(|(x, y)| x * y).sum();
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squash_examples() {
        let mut z = [0.0, 0.0];
        squash_in_place(&mut z);
        assert_eq!(z, [0.0, 0.0]);

        let mut s = [3.0, 4.0];
        squash_in_place(&mut s);
        assert!((s[0] - 25.0 / 26.0 * 0.6).abs() < 1e-15);
        assert!((s[1] - 25.0 / 26.0 * 0.8).abs() < 1e-15);

        let mut unit = [0.6, 0.0, 0.8];
        squash_in_place(&mut unit);
        assert!((norm(&unit) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn squash_extreme_magnitudes_stay_finite() {
        let mut big = [1e300, -1e300, 1e300];
        squash_in_place(&mut big);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!(norm(&big) <= 1.0);
        let mut tiny = [1e-310, 0.0];
        squash_in_place(&mut tiny);
        assert!(tiny.iter().all(|v| v.is_finite()));

        let mut g = [0.0; 3];
        squash_backward(&[1e300, -1e300, 1e300], &[1.0, 1.0, 1.0], &mut g);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn norm_is_scale_safe() {
        assert_eq!(norm(&[0.0, 0.0]), 0.0);
        assert!((norm(&[3.0, 4.0]) - 5.0).abs() < 1e-15);
        assert!((norm(&[3e200, 4e200]) / 5e200 - 1.0).abs() < 1e-15);
    }
}
