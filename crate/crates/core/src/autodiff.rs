//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records primitive applications in creation order, which is a
//! valid topological order. [`Graph::backward`] walks the tape once in reverse
//! and returns exact gradients for every node, including parameter leaves.
//! Each primitive checks its output for NaN/Inf and fails instead of
//! propagating it.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{as_matrix, gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<Vec<T>>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A single-use compute graph. Build it, call [`Graph::backward`], drop it.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, store: &ParamStore<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(av, "matmul lhs")?;
        let (k2, n) = as_matrix(bv, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul shapes {:?} x {:?} disagree on inner extent",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    /// Broadcast add of a length-C vector onto every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::Dimension(format!(
                "add_row: row of {} values cannot broadcast over {:?}",
                rv.len(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Scale(x, factor), "scale")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 || xv.rank() == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || xv.rank() == 0 {
            return Err(Error::Dimension("layer_norm over an empty axis".into()));
        }
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias of {}/{} values for width {d}",
                gv.len(),
                bv.len()
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Validation("layer_norm eps must be positive".into()));
        }
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv, "transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), "transpose")
    }

    /// `out[i] = src[index[i]]` over rows of a 2-D tensor.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, c) = as_matrix(sv, "gather_rows")?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(Error::Dimension(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(sv.row(i));
        }
        let t = Tensor::new(vec![index.len(), c], out)?;
        self.push(
            t,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Places row `i` of `src` at row `index[i]` of a zero `[rows × C]` tensor, summing duplicates.
    pub fn scatter_rows(&mut self, src: Var, index: &[usize], rows: usize) -> Result<Var> {
        let sv = self.value(src);
        let (n, c) = as_matrix(sv, "scatter_rows")?;
        if n != index.len() {
            return Err(Error::Dimension(format!(
                "scatter_rows: {n} rows but {} indices",
                index.len()
            )));
        }
        let mut out = vec![T::zero(); rows * c];
        for (i, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(Error::Dimension(format!(
                    "scatter_rows: index {dst} out of range for {rows} rows"
                )));
            }
            for (o, &v) in out[dst * c..(dst + 1) * c].iter_mut().zip(sv.row(i)) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![rows, c], out)?;
        self.push(
            t,
            Op::ScatterRows {
                src,
                index: index.to_vec(),
            },
            "scatter_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let m = xv.sum() / T::of(xv.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// `x · w + b` for a `[d_in × d_out]` weight and a `[d_out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[T × 3d]` with the query, key and value blocks side by side;
    /// each head owns a contiguous `d / heads` slice of every block. Tokens only
    /// attend within their own segment. Segments must tile `0..T` in order.
    /// Returns `[T × d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: &[Range<usize>]) -> Result<Var> {
        let qv = self.value(qkv);
        let (t, three_d) = as_matrix(qv, "attention")?;
        if three_d % 3 != 0 {
            return Err(Error::Dimension(format!(
                "attention input width {three_d} is not 3·d"
            )));
        }
        let d = three_d / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        check_segments(segments, t)?;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let x = qv.data();
        let mut out = vec![T::zero(); t * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let mut a = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &x[(seg.start + i) * three_d + qo..][..dh];
                    let row = &mut a[i * len..(i + 1) * len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &x[(seg.start + j) * three_d + ko..][..dh];
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc += qi[c] * kj[c];
                        }
                        *s = acc * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(seg.start + i) * d + h * dh..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &x[(seg.start + j) * three_d + vo..][..dh];
                        for c in 0..dh {
                            o[c] += p * vj[c];
                        }
                    }
                }
                probs.push(a);
            }
        }
        let tensor = Tensor::new(vec![t, d], out)?;
        self.push(
            tensor,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            "attention",
        )
    }

    /// Mean softmax cross-entropy of `[R × C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = as_matrix(lv, "softmax_cross_entropy")?;
        if r != labels.len() || r == 0 {
            return Err(Error::Dimension(format!(
                "{r} logit rows for {} labels",
                labels.len()
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let y = labels[i];
            if y >= c {
                return Err(Error::Dimension(format!("label {y} out of range for {c} classes")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let loss = loss / T::of(r as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits against 0/1 targets of the same shape.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        same_shape(lv, targets, "sigmoid_bce")?;
        if lv.is_empty() {
            return Err(Error::Dimension("sigmoid_bce over an empty tensor".into()));
        }
        let loss = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / T::of(lv.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
            },
            "sigmoid_bce",
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                gemm_nt(g, val(*b).data(), m, n, k, acc!(*a));
                gemm_tn(val(*a).data(), g, k, m, n, acc!(*b));
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::AddRow(x, row) => {
                add_into(acc!(*x), g);
                let c = val(*row).len();
                let gr = acc!(*row);
                for chunk in g.chunks(c.max(1)) {
                    add_into(gr, chunk);
                }
            }
            Op::Scale(x, f) => {
                for (o, &gv) in acc!(*x).iter_mut().zip(g) {
                    *o += gv * *f;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                for ((o, &gv), &y) in acc!(*a).iter_mut().zip(g).zip(bd) {
                    *o += gv * y;
                }
                for ((o, &gv), &x) in acc!(*b).iter_mut().zip(g).zip(ad) {
                    *o += gv * x;
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                for ((o, &gv), &v) in acc!(*x).iter_mut().zip(g).zip(xd) {
                    *o += gv * gelu_grad(v);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc!(*x);
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gain_v = val(*gain).data().to_vec();
                {
                    let gg = acc!(*gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let gb = acc!(*bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                let dn = T::of(d as f64);
                let gx = acc!(*x);
                let mut dxhat = vec![T::zero(); d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gain_v[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let gx = acc!(*x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let c = val(*src).cols();
                let gs = acc!(*src);
                for (i, &s) in index.iter().enumerate() {
                    add_into(&mut gs[s * c..(s + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::ScatterRows { src, index } => {
                let c = val(*src).cols();
                let gs = acc!(*src);
                for (i, &dst) in index.iter().enumerate() {
                    add_into(&mut gs[i * c..(i + 1) * c], &g[dst * c..(dst + 1) * c]);
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                for o in acc!(*x).iter_mut() {
                    *o += g0;
                }
            }
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                let g0 = g[0] / n;
                for o in acc!(*x).iter_mut() {
                    *o += g0;
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let x = val(*qkv).data();
                let d = node.value.cols();
                let three_d = 3 * d;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let gx = acc!(*qkv);
                let mut pi = 0;
                for seg in segments {
                    let len = seg.len();
                    for h in 0..*heads {
                        let a = &probs[pi];
                        pi += 1;
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let mut ds = vec![T::zero(); len];
                        for i in 0..len {
                            let gi = &g[(seg.start + i) * d + h * dh..][..dh];
                            let arow = &a[i * len..(i + 1) * len];
                            // dA[i,j] = gO_i · v_j, and dV_j += A[i,j] gO_i
                            for j in 0..len {
                                let vrow = (seg.start + j) * three_d + vo;
                                let mut dot = T::zero();
                                for c in 0..dh {
                                    dot += gi[c] * x[vrow + c];
                                    gx[vrow + c] += arow[j] * gi[c];
                                }
                                ds[j] = dot;
                            }
                            let weighted: T = arow.iter().zip(&ds).map(|(&p, &v)| p * v).sum();
                            let qrow = (seg.start + i) * three_d + qo;
                            for j in 0..len {
                                let s = arow[j] * (ds[j] - weighted) * scale;
                                if s == T::zero() {
                                    continue;
                                }
                                let krow = (seg.start + j) * three_d + ko;
                                for c in 0..dh {
                                    let (qv, kv) = (x[qrow + c], x[krow + c]);
                                    gx[qrow + c] += s * kv;
                                    gx[krow + c] += s * qv;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let f = g[0] / T::of(labels.len() as f64);
                let gl = acc!(*logits);
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        gl[i * c + j] += f * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let f = g[0] / T::of(targets.len() as f64);
                let xd = val(*logits).data();
                for ((o, &x), &t) in acc!(*logits).iter_mut().zip(xd).zip(targets) {
                    *o += f * (sigmoid(x) - t);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`; zeros if `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter that entered the graph.
    pub fn params(&self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params.iter().map(|&(p, v)| (p, self.wrt(v))).collect()
    }

    /// Adds every parameter gradient into a buffer indexed by [`ParamId`].
    pub fn accumulate_into(&self, buffers: &mut [Tensor<T>]) {
        let mut pairs = self.params.clone();
        pairs.sort();
        for (p, v) in pairs {
            if let Some(g) = &self.grads[v.0] {
                add_into(buffers[p.0].data_mut(), g);
            }
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_segments(segments: &[Range<usize>], t: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.end < s.start {
            return Err(Error::Contract(format!(
                "attention segments must tile 0..{t} in order, found {s:?} after {next}"
            )));
        }
        next = s.end;
    }
    if next != t {
        return Err(Error::Contract(format!(
            "attention segments cover 0..{next}, expected 0..{t}"
        )));
    }
    Ok(())
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0], vec![1000.0, 0.0]])).unwrap();
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[4], 1.0);
        assert!(v[5] >= 0.0 && v[5] < 1e-300);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 0])).unwrap();
        assert!(matches!(g.softmax(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![5.0; 4]])).unwrap();
        let gain = g.input(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.input(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let x = g.input(t(&[vec![1.0, -1.0]])).unwrap();
        let gain = g.input(Tensor::full(&[2], 1.0)).unwrap();
        let bias = g.input(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_zero_width() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 0])).unwrap();
        let gain = g.input(Tensor::zeros(&[0])).unwrap();
        let bias = g.input(Tensor::zeros(&[0])).unwrap();
        assert!(matches!(g.layer_norm(x, gain, bias, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", t(&[vec![1.5, -2.0, 0.25]])).unwrap();

        let mut g = Graph::new();
        let th = g.param(id, &store);
        let s = g.sum(th).unwrap();
        assert_eq!(g.backward(s).unwrap().params()[&id].data(), &[1.0; 3]);

        let mut g = Graph::new();
        let th = g.param(id, &store);
        let sq = g.mul(th, th).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().params()[&id].data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2], 1e300)).unwrap();
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn attention_segments_validated() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[4, 6])).unwrap();
        assert!(g.attention(x, 1, &[0..2, 3..4]).is_err());
        assert!(g.attention(x, 1, &[0..3]).is_err());
        assert!(g.attention(x, 4, &[0..4]).is_err());
        assert!(g.attention(x, 2, &[0..1, 1..4]).is_ok());
    }

    #[test]
    fn gather_scatter_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let z = g.scatter_rows(y, &[0, 0, 2], 3).unwrap();
        assert_eq!(g.value(z).data(), &[6.0, 8.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(g.gather_rows(x, &[2]).is_err());
    }
}
