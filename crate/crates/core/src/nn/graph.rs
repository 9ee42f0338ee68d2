//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. After
//! building a scalar loss, [`Graph::backward`] walks the tape in reverse and
//! [`Graph::accumulate`] adds parameter gradients into a [`ParamStore`].
//! Graphs are built fresh per utterance and dropped after the update.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<Option<usize>>),
    Transpose(Var),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Tensor,
    },
    MaxPool2(Var, Vec<usize>),
    Mfm(Var, Vec<usize>),
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
        segments: Vec<(usize, usize)>,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
        act: Tensor,
    },
    Loss(Var, Tensor),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Relu(a) | Sigmoid(a) | Tanh(a) | Swish(a) | Glu(a) | Softmax(a)
            | LogSoftmax(a) | SliceCols(a, _) | SliceRows(a, _) | GatherRows(a, _)
            | Gather(a, _) | Transpose(a) | Reshape(a) | MeanRows(a) | Sum(a)
            | MaxPool2(a, _) | Mfm(a, _) | Loss(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Conv2d { x, w, b, .. } | DepthwiseConv1d { x, w, b, .. } => vec![*x, *w, *b],
            LstmCell { gates, c_prev, .. } => vec![*gates, *c_prev],
        }
    }
}

/// Static geometry of a 2-d convolution over a `[C × H × W]` map.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            c_in,
            h,
            w,
            kh: k,
            kw: k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Input offset feeding column `(ci, ki, kj)` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, ci: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(ci * self.h * self.w + y as usize * self.w + x as usize)
        }
    }

    fn im2col(&self, x: &[f64]) -> Tensor {
        let rows = self.c_in * self.kh * self.kw;
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; rows * n];
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.source(ci, ki, kj, oy, ox) {
                                dst[oy * self.wo + ox] = x[s];
                            }
                        }
                    }
                }
            }
        }
        Tensor::matrix(rows, n, cols)
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let n = self.ho * self.wo;
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[r * n..(r + 1) * n];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.source(ci, ki, kj, oy, ox) {
                                out[s] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`]; retained for leaf nodes only.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match op {
            Op::Input => false,
            Op::Param => true,
            ref other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf. No gradient flows into the graph from it, though
    /// [`Grads::wrt`] still reports its gradient when it feeds a parameter path.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A leaf that records its gradient even though it is not a parameter.
    pub fn watched_input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Input);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(ps.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(av.cols(), rv.len(), "add_row width mismatch");
        let mut out = av.clone();
        let n = rv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// `x · σ(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a))
    }

    /// Gated linear unit over the column halves: `left ⊙ σ(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        assert!(c % 2 == 0, "glu needs an even width");
        let h = c / 2;
        let mut out = Vec::with_capacity(r * h);
        for i in 0..r {
            let row = av.row(i);
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        self.push(Tensor::matrix(r, h, out), Op::Glu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(&[av.rows(), av.cols()]);
        for i in 0..av.rows() {
            softmax_row(av.row(i), out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(&[av.rows(), av.cols()]);
        for i in 0..av.rows() {
            let lse = log_sum_exp(av.row(i));
            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(i)) {
                *o = x - lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise layer normalization with `[1 × n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (r, n) = (xv.rows(), xv.cols());
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        assert_eq!(gv.len(), n, "layer_norm gain width");
        let mut xhat = Tensor::zeros(&[r, n]);
        let mut out = Tensor::zeros(&[r, n]);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..n {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = xh[j] * gv[j] + bv[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&ts);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row lookup; indices may repeat (embedding tables, tiling).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Flat element gather into a new shape; `None` entries read as zero.
    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Var {
        let src = self.value(a).data();
        let data = idx.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        self.push(Tensor::new(shape, data), Op::Gather(a, idx))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a))
    }

    /// `[m × n] → [1 × n]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Square-kernel convolution of a `[C_in × H × W]` map with weights
    /// `[C_out × C_in·k·k]` and bias `[1 × C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "conv2d expects [C, H, W]");
        let geom = ConvGeom::new(s[0], s[1], s[2], k, stride, pad);
        let wv = self.value(w);
        let c_out = wv.rows();
        assert_eq!(wv.cols(), geom.c_in * k * k, "conv2d weight shape");
        let cols = geom.im2col(xv.data());
        let n = geom.ho * geom.wo;
        let mut out = vec![0.0; c_out * n];
        for (co, &bias) in self.value(b).data().iter().enumerate() {
            out[co * n..(co + 1) * n].fill(bias);
        }
        gemm(
            c_out,
            cols.rows(),
            n,
            1.0,
            wv.data(),
            false,
            cols.data(),
            false,
            1.0,
            &mut out,
        );
        let t = Tensor::new(&[c_out, geom.ho, geom.wo], out);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// 2×2 max pooling with stride 2 and floor semantics on `[C × H × W]`.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if best == usize::MAX || src[i] > best_v {
                                best = i;
                                best_v = src[i];
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
        self.push(Tensor::new(&[c, ho, wo], out), Op::MaxPool2(x, arg))
    }

    /// Max-Feature-Map: elementwise max of the two channel halves.
    pub fn mfm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert!(s[0] % 2 == 0, "mfm needs an even channel count");
        let half = s[0] / 2;
        let plane: usize = s[1..].iter().product();
        let src = xv.data();
        let n = half * plane;
        let mut out = Vec::with_capacity(n);
        let mut arg = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (src[i], src[i + n]);
            if a >= b {
                out.push(a);
                arg.push(i);
            } else {
                out.push(b);
                arg.push(i + n);
            }
        }
        let mut shape = s;
        shape[0] = half;
        self.push(Tensor::new(&shape, out), Op::Mfm(x, arg))
    }

    /// Per-channel 1-d convolution over time on `[T × C]`, same padding,
    /// kernel `[K × C]` with odd `K`. Each `(start, len)` segment is
    /// convolved independently with zero padding at its edges.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        segments: Option<&[(usize, usize)]>,
    ) -> Var {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let segments = segments.map_or_else(|| vec![(0, t)], <[_]>::to_vec);
        let wv = self.value(w);
        let k = wv.rows();
        assert_eq!(wv.cols(), c, "depthwise kernel width");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let half = k / 2;
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(&[t, c]);
        for &(start, len) in &segments {
            for tt in start..start + len {
                let o = &mut out.data_mut()[tt * c..(tt + 1) * c];
                o.copy_from_slice(bv);
                for kk in 0..k {
                    let src = tt as isize + kk as isize - half as isize;
                    if src < start as isize || src >= (start + len) as isize {
                        continue;
                    }
                    let xr = xv.row(src as usize);
                    let wr = wv.row(kk);
                    for ch in 0..c {
                        o[ch] += wr[ch] * xr[ch];
                    }
                }
            }
        }
        self.push(
            out,
            Op::DepthwiseConv1d {
                x,
                w,
                b,
                segments,
            },
        )
    }

    /// Fused LSTM cell. `gates` is `[m × 4H]` of pre-activations ordered
    /// (input, forget, cell, output); returns `[m × 2H]` = `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let gv = self.value(gates);
        let cv = self.value(c_prev);
        let (m, h4) = (gv.rows(), gv.cols());
        let h = h4 / 4;
        assert_eq!(cv.cols(), h, "lstm_cell state width");
        let mut act = Tensor::zeros(&[m, 6 * h]);
        let mut out = Tensor::zeros(&[m, 2 * h]);
        for r in 0..m {
            let g = gv.row(r);
            let cp = cv.row(r);
            let a = act.row_mut(r);
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let cc = g[2 * h + j].tanh();
                let o = sigmoid(g[3 * h + j]);
                let c = f * cp[j] + i * cc;
                let tc = c.tanh();
                a[j] = i;
                a[h + j] = f;
                a[2 * h + j] = cc;
                a[3 * h + j] = o;
                a[4 * h + j] = c;
                a[5 * h + j] = tc;
            }
            let o_row = out.row_mut(r);
            for j in 0..h {
                o_row[j] = act.get(r, 3 * h + j) * act.get(r, 5 * h + j);
                o_row[h + j] = act.get(r, 4 * h + j);
            }
        }
        self.push(
            out,
            Op::LstmCell {
                gates,
                c_prev,
                act,
            },
        )
    }

    /// Sum of row-wise softmax cross-entropy against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let mut grad = Tensor::zeros(&[lv.rows(), lv.cols()]);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            let gr = grad.row_mut(i);
            for (g, &x) in gr.iter_mut().zip(row) {
                *g = (x - lse).exp();
            }
            gr[t] -= 1.0;
        }
        self.push(Tensor::scalar(loss), Op::Loss(logits, grad))
    }

    /// A scalar loss whose gradient w.r.t. `input` was computed by the caller.
    pub fn custom_loss(&mut self, input: Var, loss: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(input), "custom_loss gradient shape");
        self.push(Tensor::scalar(loss), Op::Loss(input, grad))
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        Grads { grads }
    }

    /// Adds `scale ·` parameter gradients into the store's gradient buffers.
    pub fn accumulate(&self, grads: &Grads, ps: &mut ParamStore, scale: f64) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                let dst = ps.grad_mut(id);
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += scale * s;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g.reshape(self.value(v).shape())),
        }
    }

    /// Accumulates `op(a)·op(b)` (an `[m × n]` product) into the gradient of `v`.
    #[allow(clippy::too_many_arguments)]
    fn acc_gemm(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        (m, k, n): (usize, usize, usize),
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
    ) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        gemm(m, k, n, 1.0, a, ta, b, tb, 1.0, slot.data_mut());
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.value(v).shape())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc_gemm(grads, *a, (m, n, k), g.data(), false, bv.data(), true);
                self.acc_gemm(grads, *b, (k, m, n), av.data(), true, g.data(), false);
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc_gemm(grads, *a, (m, n, k), g.data(), false, bv.data(), false);
                self.acc_gemm(grads, *b, (n, m, k), g.data(), true, av.data(), false);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*row) {
                    let n = self.value(*row).len();
                    let mut s = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (acc, x) in s.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    self.acc(grads, *row, Tensor::matrix(1, n, s));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => self.acc(grads, *a, g.zip_map(out, |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Swish(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.acc(grads, *a, gx);
            }
            Op::Glu(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let h = c / 2;
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let row = av.row(i);
                    let gr = g.row(i);
                    let dst = gx.row_mut(i);
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        dst[j] = gr[j] * s;
                        dst[h + j] = gr[j] * row[j] * s * (1.0 - s);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::Softmax(a) => {
                let mut gx = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &gg) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yy * (gg - dot);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LogSoftmax(a) => {
                let mut gx = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((d, &yy), &gg) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = gg - yy.exp() * total;
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, n) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gain).data();
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                let mut gx = Tensor::zeros(&[r, n]);
                for i in 0..r {
                    let gr = g.row(i);
                    let xh = xhat.row(i);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        ggain[j] += gr[j] * xh[j];
                        gbias[j] += gr[j];
                        let gxh = gr[j] * gv[j];
                        s1 += gxh;
                        s2 += gxh * xh[j];
                    }
                    let scale = inv_std[i] / n as f64;
                    let dst = gx.row_mut(i);
                    for j in 0..n {
                        let gxh = gr[j] * gv[j];
                        dst[j] = scale * (n as f64 * gxh - s1 - xh[j] * s2);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, Tensor::matrix(1, n, ggain));
                self.acc(grads, *bias, Tensor::matrix(1, n, gbias));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        self.acc(grads, *p, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.wants(*p) {
                        self.acc(grads, *p, g.slice_rows(start, h));
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let mut gx = self.zeros_like(*a);
                    let (c, w) = (gx.cols(), g.cols());
                    for r in 0..g.rows() {
                        gx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, gx);
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let mut gx = self.zeros_like(*a);
                    let c = gx.cols();
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.acc(grads, *a, gx);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.wants(*a) {
                    let mut gx = self.zeros_like(*a);
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, s) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    self.acc(grads, *a, gx);
                }
            }
            Op::Gather(a, idx) => {
                if self.wants(*a) {
                    let mut gx = self.zeros_like(*a);
                    let dst = gx.data_mut();
                    for (k, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            dst[*s] += g.data()[k];
                        }
                    }
                    self.acc(grads, *a, gx);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for (d, s) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *d = s / r as f64;
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = out.shape()[0];
                let n = geom.ho * geom.wo;
                let kdim = cols.rows();
                let gd = g.data();
                self.acc_gemm(grads, *w, (c_out, n, kdim), gd, false, cols.data(), true);
                if self.wants(*b) {
                    let gb: Vec<f64> = gd.chunks(n).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *b, Tensor::matrix(1, c_out, gb));
                }
                if self.wants(*x) {
                    let mut gcols = vec![0.0; kdim * n];
                    let wv = self.value(*w);
                    gemm(kdim, c_out, n, 1.0, wv.data(), true, gd, false, 0.0, &mut gcols);
                    let mut gx = self.zeros_like(*x);
                    geom.col2im(&gcols, gx.data_mut());
                    self.acc(grads, *x, gx);
                }
            }
            Op::MaxPool2(a, arg) | Op::Mfm(a, arg) => {
                if self.wants(*a) {
                    let mut gx = self.zeros_like(*a);
                    let dst = gx.data_mut();
                    for (k, &src) in arg.iter().enumerate() {
                        dst[src] += g.data()[k];
                    }
                    self.acc(grads, *a, gx);
                }
            }
            Op::DepthwiseConv1d {
                x,
                w,
                b,
                segments,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, c) = (wv.rows(), wv.cols());
                let half = k / 2;
                let mut gx = self.zeros_like(*x);
                let mut gw = self.zeros_like(*w);
                let mut gb = vec![0.0; c];
                for &(start, len) in segments {
                    for tt in start..start + len {
                        let gr = g.row(tt);
                        for ch in 0..c {
                            gb[ch] += gr[ch];
                        }
                        for kk in 0..k {
                            let src = tt as isize + kk as isize - half as isize;
                            if src < start as isize || src >= (start + len) as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                let gval = gr[ch];
                                gw.data_mut()[kk * c + ch] += gval * xv.get(src, ch);
                                gx.data_mut()[src * c + ch] += gval * wv.get(kk, ch);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                self.acc(grads, *b, Tensor::matrix(1, c, gb));
            }
            Op::LstmCell {
                gates,
                c_prev,
                act,
            } => {
                let m = act.rows();
                let h = act.cols() / 6;
                let cp = self.value(*c_prev);
                let mut gg = Tensor::zeros(&[m, 4 * h]);
                let mut gc_prev = Tensor::zeros(&[m, h]);
                for r in 0..m {
                    let a = act.row(r);
                    let go = g.row(r);
                    for j in 0..h {
                        let (i, f, cc, o, tc) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[5 * h + j]);
                        let gh = go[j];
                        let gc = go[h + j] + gh * o * (1.0 - tc * tc);
                        let d = gg.row_mut(r);
                        d[j] = gc * cc * i * (1.0 - i);
                        d[h + j] = gc * cp.get(r, j) * f * (1.0 - f);
                        d[2 * h + j] = gc * i * (1.0 - cc * cc);
                        d[3 * h + j] = gh * tc * o * (1.0 - o);
                        gc_prev.set(r, j, gc * f);
                    }
                }
                self.acc(grads, *gates, gg);
                self.acc(grads, *c_prev, gc_prev);
            }
            Op::Loss(a, grad) => {
                let s = g.item();
                self.acc(grads, *a, grad.map(|x| x * s));
            }
        }
    }
}
