//! Parameterized building blocks over [`Graph`].

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;

/// Row-wise affine map `x · W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), init.uniform(&[in_dim, out_dim], bound));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, rows: usize, dim: usize) -> Self {
        Embedding {
            table: ps.add(format!("{name}.table"), init.normal(&[rows, dim], 1.0)),
            rows,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, ids: &[usize]) -> Var {
        let t = g.param(ps, self.table);
        g.gather_rows(t, ids)
    }
}

/// Single-direction LSTM over a `[T × in]` sequence.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: ps.add(format!("{name}.w_ih"), init.uniform(&[in_dim, 4 * hidden], bound)),
            w_hh: ps.add(format!("{name}.w_hh"), init.uniform(&[hidden, 4 * hidden], bound)),
            bias: ps.add(format!("{name}.bias"), init.uniform(&[1, 4 * hidden], bound)),
            hidden,
        }
    }

    /// Input-to-gate projections for every step at once: `[T × 4H]`.
    pub fn project_inputs(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w_ih);
        let b = g.param(ps, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    /// One step from pre-projected input gates `[1 × 4H]`; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, ps: &ParamStore, x_gates: Var, h: Var, c: Var) -> (Var, Var) {
        let w_hh = g.param(ps, self.w_hh);
        let rec = g.matmul(h, w_hh);
        let gates = g.add(x_gates, rec);
        let hc = g.lstm_cell(gates, c);
        let h = g.slice_cols(hc, 0, self.hidden);
        let c = g.slice_cols(hc, self.hidden, self.hidden);
        (h, c)
    }

    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.input(Tensor::zeros(&[1, self.hidden]));
        let c = g.input(Tensor::zeros(&[1, self.hidden]));
        (h, c)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, reverse: bool) -> Var {
        let t = g.shape(x)[0];
        let xg = self.project_inputs(g, ps, x);
        let (mut h, mut c) = self.zero_state(g);
        let mut outs = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let row = g.slice_rows(xg, step, 1);
            let (nh, nc) = self.step(g, ps, row, h, c);
            h = nh;
            c = nc;
            outs[step] = h;
        }
        g.concat_rows(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, hidden: usize) -> Self {
        BiLstm {
            forward: Lstm::new(ps, init, &format!("{name}.fwd"), in_dim, hidden),
            backward: Lstm::new(ps, init, &format!("{name}.bwd"), in_dim, hidden),
        }
    }

    /// `[T × in] → [T × 2H]`, forward states first.
    pub fn run(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let f = self.forward.forward(g, ps, x, false);
        let b = self.backward.forward(g, ps, x, true);
        g.concat_cols(&[f, b])
    }
}

/// Square-kernel 2-d convolution on `[C × H × W]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: ps.add(format!("{name}.weight"), init.uniform(&[c_out, fan_in], bound)),
            bias: ps.add(format!("{name}.bias"), init.uniform(&[1, c_out], bound)),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv2d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv1d {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, channels: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        DepthwiseConv1d {
            weight: ps.add(format!("{name}.weight"), init.uniform(&[kernel, channels], bound)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[1, channels])),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        segments: Option<&[(usize, usize)]>,
    ) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.depthwise_conv1d(x, w, b, segments)
    }
}

/// Sinusoidal position table `[n × d]` (sin on even, cos on odd columns).
pub fn sinusoidal_positions(positions: impl Iterator<Item = f64>, d: usize) -> Tensor {
    let mut rows = Vec::new();
    for pos in positions {
        let mut row = vec![0.0; d];
        for i in (0..d).step_by(2) {
            let freq = (-(i as f64) * (10000f64).ln() / d as f64).exp();
            row[i] = (pos * freq).sin();
            if i + 1 < d {
                row[i + 1] = (pos * freq).cos();
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}
