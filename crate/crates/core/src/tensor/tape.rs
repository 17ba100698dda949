use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct CapsDims {
    p: usize,
    g: usize,
    d_out: usize,
    d_in: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Conv2d { input: Var, filters: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Reshape(Var),
    SquashRows(Var),
    Softmax { input: Var, axis: usize },
    CapsulePredict { u: Var, w: Var, dims: CapsDims },
    WeightedSum { c: Var, u_hat: Var, dims: CapsDims },
    Agreement { v: Var, u_hat: Var, dims: CapsDims },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    RowNorm(Var),
    MarginLoss { lengths: Var, target: Vec<f64>, m_plus: f64, m_minus: f64, lambda: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive ops during a forward pass and replays their adjoints
/// in reverse. One tape per training step per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: format!("{:?}", got),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Var, stride: usize) -> Result<Var> {
        let (x, f, b) = (self.value(input), self.value(filters), self.value(bias));
        let geom = ConvGeom::check(x.shape(), f.shape(), b.shape(), stride)?;
        let out = kernels::conv2d_forward(&geom, x.data(), f.data(), b.data());
        let value = Tensor::from_parts(geom.out_shape(), out);
        self.push(value, Op::Conv2d { input, filters, bias, geom }, &[input, filters, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Squash every vector along the last axis.
    pub fn squash_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.to_vec();
        for row in out.chunks_exact_mut(d) {
            kernels::squash_in_place(row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::SquashRows(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = super::softmax(self.value(x), axis)?;
        self.push(value, Op::Softmax { input: x, axis }, &[x])
    }

    /// Prediction vectors `u_hat[i, j] = W[i, j] u[i]` for `u: [P, Di]`, `W: [P, G, Do, Di]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (ut, wt) = (self.value(u), self.value(w));
        let [p, d_in] = *ut.shape() else {
            return Err(shape_err("capsule_predict", "u [P, D]", ut.shape()));
        };
        let [wp, g, d_out, wd] = *wt.shape() else {
            return Err(shape_err("capsule_predict", "W [P, G, Do, Di]", wt.shape()));
        };
        if wp != p || wd != d_in {
            return Err(shape_err("capsule_predict", format!("W [{p}, G, Do, {d_in}]"), wt.shape()));
        }
        let out = kernels::capsule_predict(p, g, d_out, d_in, ut.data(), wt.data());
        let dims = CapsDims { p, g, d_out, d_in };
        let value = Tensor::from_parts(vec![p, g, d_out], out);
        self.push(value, Op::CapsulePredict { u, w, dims }, &[u, w])
    }

    /// `S[j] = sum_i c[i, j] u_hat[i, j]` for `c: [P, G]`, `u_hat: [P, G, D]`.
    pub fn weighted_sum(&mut self, c: Var, u_hat: Var) -> Result<Var> {
        let (ct, ut) = (self.value(c), self.value(u_hat));
        let [p, g, d] = *ut.shape() else {
            return Err(shape_err("weighted_sum", "u_hat [P, G, D]", ut.shape()));
        };
        if ct.shape() != [p, g] {
            return Err(shape_err("weighted_sum", format!("c [{p}, {g}]"), ct.shape()));
        }
        let out = kernels::weighted_sum(p, g, d, ct.data(), ut.data());
        let dims = CapsDims { p, g, d_out: d, d_in: d };
        let value = Tensor::from_parts(vec![g, d], out);
        self.push(value, Op::WeightedSum { c, u_hat, dims }, &[c, u_hat])
    }

    /// `a[i, j] = v[j] . u_hat[i, j]` for `v: [G, D]`, `u_hat: [P, G, D]`.
    pub fn agreement(&mut self, v: Var, u_hat: Var) -> Result<Var> {
        let (vt, ut) = (self.value(v), self.value(u_hat));
        let [p, g, d] = *ut.shape() else {
            return Err(shape_err("agreement", "u_hat [P, G, D]", ut.shape()));
        };
        if vt.shape() != [g, d] {
            return Err(shape_err("agreement", format!("v [{g}, {d}]"), vt.shape()));
        }
        let out = kernels::agreement(p, g, d, vt.data(), ut.data());
        let dims = CapsDims { p, g, d_out: d, d_in: d };
        let value = Tensor::from_parts(vec![p, g], out);
        self.push(value, Op::Agreement { v, u_hat, dims }, &[v, u_hat])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err(op, format!("{:?}", at.shape()), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(at.shape().to_vec(), data))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Euclidean length of every vector along the last axis.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let out: Vec<f64> = t.data().chunks_exact(d).map(kernels::norm).collect();
        let shape = if t.rank() > 1 { t.shape()[..t.rank() - 1].to_vec() } else { vec![1] };
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::RowNorm(x), &[x])
    }

    /// Summed hinge-squared margin loss over capsule lengths.
    pub fn margin_loss(&mut self, lengths: Var, target: &[f64], m_plus: f64, m_minus: f64, lambda: f64) -> Result<Var> {
        let l = self.value(lengths);
        if l.len() != target.len() {
            return Err(shape_err("margin_loss", format!("{} lengths", target.len()), l.shape()));
        }
        let loss = l
            .data()
            .iter()
            .zip(target)
            .map(|(&len, &t)| {
                t * (m_plus - len).max(0.0).powi(2) + lambda * (1.0 - t) * (len - m_minus).max(0.0).powi(2)
            })
            .sum();
        let op = Op::MarginLoss {
            lengths,
            target: target.to_vec(),
            m_plus,
            m_minus,
            lambda,
        };
        self.push(Tensor::scalar(loss), op, &[lengths])
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry in the result; parameters that did not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.adjoint(node, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let g = Tensor::from_parts(node.value.shape().to_vec(), g);
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), g);
                    }
                    Some(prev) => {
                        let merged: Vec<f64> = prev.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                        *prev = Tensor::from_parts(g.shape().to_vec(), merged);
                    }
                }
            }
        }
        Ok(Gradients { by_name: out })
    }

    fn adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Returns a mutable gradient buffer for `v`, or None when it needs no gradient.
        fn slot<'a>(tape: &Tape, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
            let n = &tape.nodes[v.0];
            if !n.needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]).as_mut_slice())
        }
        // Moves the buffer out so several inputs can be written at once.
        fn take(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
            let n = &tape.nodes[v.0];
            if !n.needs_grad {
                return None;
            }
            Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; n.value.len()]))
        }

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { input, filters, bias, geom } => {
                let x = self.value(*input).data();
                let f = self.value(*filters).data();
                let mut di = take(self, grads, *input);
                let mut df = take(self, grads, *filters);
                let mut db = take(self, grads, *bias);
                kernels::conv2d_backward(geom, x, f, g, di.as_deref_mut(), df.as_deref_mut(), db.as_deref_mut());
                for (v, buf) in [(*input, di), (*filters, df), (*bias, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = slot(self, grads, *x) {
                    for ((dv, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(self, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(dv, gv)| *dv += gv);
                }
            }
            Op::SquashRows(x) => {
                let xt = self.value(*x);
                let dim = *xt.shape().last().unwrap();
                if let Some(d) = slot(self, grads, *x) {
                    for ((s, gr), ds) in xt.data().chunks_exact(dim).zip(g.chunks_exact(dim)).zip(d.chunks_exact_mut(dim)) {
                        kernels::squash_backward(s, gr, ds);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                if let Some(d) = slot(self, grads, *input) {
                    kernels::softmax_axis_backward(shape, y, g, *axis, d);
                }
            }
            Op::CapsulePredict { u, w, dims } => {
                let (ud, wd) = (self.value(*u).data(), self.value(*w).data());
                let mut du = take(self, grads, *u);
                let mut dw = take(self, grads, *w);
                kernels::capsule_predict_backward(dims.p, dims.g, dims.d_out, dims.d_in, ud, wd, g, du.as_deref_mut(), dw.as_deref_mut());
                for (v, buf) in [(*u, du), (*w, dw)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::WeightedSum { c, u_hat, dims } => {
                let CapsDims { p, g: ng, d_out: d, .. } = *dims;
                let (cd, ud) = (self.value(*c).data(), self.value(*u_hat).data());
                if let Some(dc) = slot(self, grads, *c) {
                    for i in 0..p {
                        for j in 0..ng {
                            let uh = &ud[(i * ng + j) * d..][..d];
                            dc[i * ng + j] += g[j * d..][..d].iter().zip(uh).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(du) = slot(self, grads, *u_hat) {
                    for i in 0..p {
                        for j in 0..ng {
                            let cij = cd[i * ng + j];
                            let dst = &mut du[(i * ng + j) * d..][..d];
                            for (dv, &gv) in dst.iter_mut().zip(&g[j * d..][..d]) {
                                *dv += cij * gv;
                            }
                        }
                    }
                }
            }
            Op::Agreement { v, u_hat, dims } => {
                let CapsDims { p, g: ng, d_out: d, .. } = *dims;
                let (vd, ud) = (self.value(*v).data(), self.value(*u_hat).data());
                if let Some(dv) = slot(self, grads, *v) {
                    for i in 0..p {
                        for j in 0..ng {
                            let gij = g[i * ng + j];
                            let uh = &ud[(i * ng + j) * d..][..d];
                            for (x, &y) in dv[j * d..][..d].iter_mut().zip(uh) {
                                *x += gij * y;
                            }
                        }
                    }
                }
                if let Some(du) = slot(self, grads, *u_hat) {
                    for i in 0..p {
                        for j in 0..ng {
                            let gij = g[i * ng + j];
                            let dst = &mut du[(i * ng + j) * d..][..d];
                            for (x, &y) in dst.iter_mut().zip(&vd[j * d..][..d]) {
                                *x += gij * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(self, grads, v) {
                        d.iter_mut().zip(g).for_each(|(dv, gv)| *dv += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                if let Some(d) = slot(self, grads, *a) {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(&bd) {
                        *dv += gv * bv;
                    }
                }
                if let Some(d) = slot(self, grads, *b) {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(&ad) {
                        *dv += gv * av;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(self, grads, *x) {
                    d.iter_mut().for_each(|dv| *dv += g[0]);
                }
            }
            Op::RowNorm(x) => {
                let xt = self.value(*x);
                let dim = *xt.shape().last().unwrap();
                let lens = node.value.data();
                if let Some(d) = slot(self, grads, *x) {
                    for (k, (row, drow)) in xt.data().chunks_exact(dim).zip(d.chunks_exact_mut(dim)).enumerate() {
                        if lens[k] > 0.0 {
                            for (dv, &xv) in drow.iter_mut().zip(row) {
                                *dv += g[k] * xv / lens[k];
                            }
                        }
                    }
                }
            }
            Op::MarginLoss { lengths, target, m_plus, m_minus, lambda } => {
                let l = self.value(*lengths).to_vec();
                if let Some(d) = slot(self, grads, *lengths) {
                    for ((dv, &len), &t) in d.iter_mut().zip(&l).zip(target) {
                        let pos = -2.0 * t * (m_plus - len).max(0.0);
                        let neg = 2.0 * lambda * (1.0 - t) * (len - m_minus).max(0.0);
                        *dv += g[0] * (pos + neg);
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::Reshape(_) => "reshape",
        Op::SquashRows(_) => "squash",
        Op::Softmax { .. } => "softmax",
        Op::CapsulePredict { .. } => "capsule_predict",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Agreement { .. } => "agreement",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Sum(_) => "sum",
        Op::RowNorm(_) => "row_norm",
        Op::MarginLoss { .. } => "margin_loss",
    }
}

/// Parameter gradients keyed by the name given to [`Tape::param`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}
