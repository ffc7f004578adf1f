//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints
//! for every node that transitively depends on a parameter leaf.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Four bilinear taps `(flat spatial index, weight)`; `None` samples zero.
pub type Taps = Option<[(usize, f64); 4]>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x[C, ...] + b[C]`, bias broadcast over trailing axes.
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        /// Normalized values and per-group reciprocal std.
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    /// Concatenation along axis 0.
    Concat0(Vec<Var>),
    /// Concatenation of `[R, C_k]` matrices along columns.
    ConcatCols(Vec<Var>),
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    /// Per-channel spatial gather with bilinear taps.
    Resample {
        x: Var,
        taps: Arc<Vec<Taps>>,
        src_plane: usize,
    },
    /// Multiply every channel by a constant spatial map.
    MulSpatial(Var, Arc<Vec<f64>>),
    /// Keep a subset of columns of a `[R, C]` matrix.
    SelectCols(Var, Arc<Vec<usize>>),
    /// `mean((a - b)^2)`.
    Mse(Var, Var),
    /// `sqrt(mean(x^2))`.
    Rms(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Evaluation record for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b)).expect("mul shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.shape()[0];
        assert_eq!(bv.len(), c, "channel bias length");
        let plane = xv.len() / c;
        let mut out = xv.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bias = bv.data()[k];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddChannel(x, b), ng)
    }

    /// 2-D convolution, stride 1, "same" zero padding, odd square kernel.
    ///
    /// `x: [Ci,H,W]`, `w: [Co,Ci,K,K]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw().expect("avg_pool2 input");
        let (ho, wo) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = vec![0.0; c * ho * wo];
        for k in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = k * h * w;
                    let s = src[base + 2 * i * w + 2 * j]
                        + src[base + 2 * i * w + 2 * j + 1]
                        + src[base + (2 * i + 1) * w + 2 * j]
                        + src[base + (2 * i + 1) * w + 2 * j + 1];
                    out[(k * ho + i) * wo + j] = 0.25 * s;
                }
            }
        }
        let value = Tensor::from_vec(&[c, ho, wo], out).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw().expect("upsample2 input");
        let (ho, wo) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![0.0; c * ho * wo];
        for k in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(k * ho + i) * wo + j] = src[(k * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[c, ho, wo], out).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::Upsample2(x), ng)
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let c = xv.shape()[0];
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let n = xv.len() / groups;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let seg = &xv.data()[g * n..(g + 1) * n];
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[g] = r;
            for (o, v) in xhat[g * n..(g + 1) * n].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let value = Tensor::from_vec(xv.shape(), xhat.clone()).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::GroupNorm { x, groups, xhat, rstd }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(value, Op::Silu(x), ng)
    }

    /// Concatenates along axis 0 (channels for feature maps).
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &first[1..], "concat0 trailing shape");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::from_vec(&shape, data).unwrap();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat0(parts.to_vec()), ng)
    }

    /// Concatenates `[R, C_k]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2, "concat_cols expects matrices");
                assert_eq!(s[0], rows, "concat_cols row count");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wk) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + wk]
                    .copy_from_slice(&src[r * wk..(r + 1) * wk]);
            }
            off += wk;
        }
        let value = Tensor::from_vec(&[rows, total], data).unwrap();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `op(a) * op(b)` for matrices, `op` being an optional transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = matmul(self.value(a), self.value(b), ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Resamples every channel of `x: [C,H,W]` with per-output-pixel taps,
    /// producing `[C, out_h, out_w]` where `taps.len() == out_h * out_w`.
    pub fn resample(&mut self, x: Var, taps: Arc<Vec<Taps>>, out_hw: (usize, usize)) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw().expect("resample input");
        assert_eq!(taps.len(), out_hw.0 * out_hw.1, "tap count");
        let value = resample_forward(xv, &taps, out_hw);
        let ng = self.ng(x);
        let _ = c;
        self.push(
            value,
            Op::Resample {
                x,
                taps,
                src_plane: h * w,
            },
            ng,
        )
    }

    /// Multiplies every channel of `x: [C, ...]` by a spatial map.
    pub fn mul_spatial(&mut self, x: Var, map: Arc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let plane = map.len();
        assert_eq!(xv.len() % plane, 0, "spatial map size");
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(plane) {
            for (v, m) in chunk.iter_mut().zip(map.iter()) {
                *v *= m;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MulSpatial(x, map), ng)
    }

    pub fn select_cols(&mut self, x: Var, cols: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let (rows, width) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            for &c in cols.iter() {
                data.push(xv.data()[r * width + c]);
            }
        }
        let value = Tensor::from_vec(&[rows, cols.len()], data).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::SelectCols(x, cols), ng)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        av.ensure_same_shape(bv, "mse").expect("mse shapes");
        let n = av.len() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng)
    }

    pub fn rms(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let r = (xv.sum_sq() / xv.len() as f64).sqrt();
        let ng = self.ng(x);
        self.push(Tensor::scalar(r), Op::Rms(x), ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_fn(self.value(root).shape(), |_| 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)).unwrap());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)).unwrap());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddChannel(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let plane = g.len() / c;
                    let db: Vec<f64> = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db).unwrap());
                }
            }
            Op::Conv2d { x, w, b } => {
                let (dx, dw) = conv2d_backward(self.value(*x), self.value(*w), g, self.ng(*x), self.ng(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let co = self.value(*b).len();
                        let plane = g.len() / co;
                        let db: Vec<f64> = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[co], db).unwrap());
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            if i / 2 < ho && j / 2 < wo {
                                dx[(k * h + i) * w + j] = 0.25 * g.data()[(k * ho + i / 2) * wo + j / 2];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[(k * h + i / 2) * w + j / 2] += g.data()[(k * ho + i) * wo + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::GroupNorm { x, groups, xhat, rstd } => {
                let n = xhat.len() / groups;
                let mut dx = vec![0.0; xhat.len()];
                for gi in 0..*groups {
                    let r = gi * n..(gi + 1) * n;
                    let dy = &g.data()[r.clone()];
                    let xh = &xhat[r.clone()];
                    let s1: f64 = dy.iter().sum();
                    let s2: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let k = rstd[gi] / n as f64;
                    for ((o, d), xv) in dx[r].iter_mut().zip(dy).zip(xh) {
                        *o = k * (n as f64 * d - s1 - xv * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).unwrap());
            }
            Op::Silu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::from_vec(self.value(p).shape(), g.data()[off..off + n].to_vec()).unwrap();
                    self.accumulate(grads, p, piece);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let rows = g.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let wk = self.value(p).shape()[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * wk);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + wk]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[rows, wk], d).unwrap());
                    }
                    off += wk;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = op(A) op(B)
                if self.ng(*a) {
                    // dop(A) = G op(B)^T ; dA = dop(A) or its transpose
                    let da = if *ta { matmul(bv, g, *tb, true) } else { matmul(g, bv, false, !*tb) };
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *tb { matmul(g, av, true, *ta) } else { matmul(av, g, !*ta, false) };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.value(*x).shape()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Resample { x, taps, src_plane } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let out_plane = taps.len();
                let mut dx = vec![0.0; xv.len()];
                for k in 0..c {
                    let gk = &g.data()[k * out_plane..(k + 1) * out_plane];
                    let dk = &mut dx[k * src_plane..(k + 1) * src_plane];
                    for (tap, gv) in taps.iter().zip(gk) {
                        if let Some(t) = tap {
                            for &(i, wt) in t {
                                dk[i] += wt * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::MulSpatial(x, map) => {
                let mut d = g.clone();
                for chunk in d.data_mut().chunks_mut(map.len()) {
                    for (v, m) in chunk.iter_mut().zip(map.iter()) {
                        *v *= m;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SelectCols(x, cols) => {
                let xv = self.value(*x);
                let (rows, width) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; rows * width];
                for r in 0..rows {
                    for (k, &c) in cols.iter().enumerate() {
                        dx[r * width + c] += g.data()[r * cols.len() + k];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[rows, width], dx).unwrap());
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = 2.0 * g.item() / av.len() as f64;
                let diff = av.sub(bv).unwrap();
                if self.ng(*a) {
                    self.accumulate(grads, *a, diff.scale(k));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, diff.scale(-k));
                }
            }
            Op::Rms(x) => {
                let r = node.value.item();
                let xv = self.value(*x);
                // d sqrt(mean(x^2)) / dx = x / (n * rms); zero at the origin.
                let k = if r > 0.0 { g.item() / (xv.len() as f64 * r) } else { 0.0 };
                self.accumulate(grads, *x, xv.scale(k));
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Dense matrix product `op(a) * op(b)`.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension {:?} x {:?}", a.shape(), b.shape());
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * ac + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * bc..(p + 1) * bc];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &bd[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = ad[p * ac + i];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &bd[j * bc..(j + 1) * bc];
                    out[i * n + j] = dot(arow, brow);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[p * ac + i] * bd[j * bc + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax over the last axis, max-shifted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("softmax needs rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn resample_forward(x: &Tensor, taps: &[Taps], out_hw: (usize, usize)) -> Tensor {
    let (c, h, w) = x.chw().expect("resample input");
    let src_plane = h * w;
    let out_plane = out_hw.0 * out_hw.1;
    let mut out = vec![0.0; c * out_plane];
    for k in 0..c {
        let src = &x.data()[k * src_plane..(k + 1) * src_plane];
        for (o, tap) in out[k * out_plane..(k + 1) * out_plane].iter_mut().zip(taps) {
            if let Some(t) = tap {
                *o = t.iter().map(|&(i, wt)| wt * src[i]).sum();
            }
        }
    }
    Tensor::from_vec(&[c, out_hw.0, out_hw.1], out).unwrap()
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (ci, h, wd) = x.chw().expect("conv input");
    let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ci2, "conv channel mismatch");
    assert!(kh == kw && kh % 2 == 1, "odd square kernels only");
    let pad = (kh / 2) as isize;
    let plane = h * wd;
    let mut out = vec![0.0; co * plane];
    let xd = x.data();
    let wdata = w.data();
    for o in 0..co {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = b {
            oplane.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        for i in 0..ci {
            let iplane = &xd[i * plane..(i + 1) * plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdata[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx).min(wd as isize) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        let srow = &iplane[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, h, wd], out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (ci, h, wd) = x.chw().unwrap();
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let pad = (kh / 2) as isize;
    let plane = h * wd;
    let mut dx = if need_dx { vec![0.0; ci * plane] } else { Vec::new() };
    let mut dw = if need_dw { vec![0.0; w.len()] } else { Vec::new() };
    let xd = x.data();
    let gd = g.data();
    let wdata = w.data();
    for o in 0..co {
        let gplane = &gd[o * plane..(o + 1) * plane];
        for i in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ci + i) * kh + ky) * kw + kx;
                    let dy = ky as isize - pad;
                    let dxo = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (wd as isize - dxo).min(wd as isize) as usize;
                    let sx0 = (x0 as isize + dxo) as usize;
                    let sx1 = (x1 as isize + dxo) as usize;
                    let mut acc = 0.0;
                    let wv = wdata[widx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        if need_dw {
                            let srow = &xd[i * plane + sy * wd + sx0..i * plane + sy * wd + sx1];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if need_dx && wv != 0.0 {
                            let drow = &mut dx[i * plane + sy * wd + sx0..i * plane + sy * wd + sx1];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if need_dw {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::from_vec(x.shape(), dx).unwrap()),
        need_dw.then(|| Tensor::from_vec(w.shape(), dw).unwrap()),
    )
}
