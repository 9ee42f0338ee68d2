//! View fusion. The concatenation baseline stacks raw views column-wise; the
//! attention mode runs the duration and pronunciation embeddings as queries
//! against the self-supervised frames (keys and values) through a stack of
//! encoder-style cross-attention blocks and concatenates the two results.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureKind, N_LFCC_FILTERS};
use crate::error::{Error, Result};
use crate::frame_encoders::PROJ_DIM;
use crate::nn::layers::{sinusoidal_positions, Embedding, LayerNorm, Linear};
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Attention,
    SingleView,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "attention" => Ok(FusionMode::Attention),
            "single_view" => Ok(FusionMode::SingleView),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Concat => "concat",
            FusionMode::Attention => "attention",
            FusionMode::SingleView => "single_view",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    W2v,
    Lfcc,
    Duration,
    Pron,
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2v" | "wav2vec" => Ok(View::W2v),
            "lfcc" => Ok(View::Lfcc),
            "duration" | "dur" => Ok(View::Duration),
            "pron" | "pronunciation" => Ok(View::Pron),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::W2v => "w2v",
            View::Lfcc => "lfcc",
            View::Duration => "duration",
            View::Pron => "pron",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_expansion: usize,
    pub mode: FusionMode,
    pub views: Vec<View>,
    /// Duration vocabulary size K; the embedding table has K + 1 rows.
    pub duration_vocab: usize,
    pub pron_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_model: PROJ_DIM,
            n_heads: 8,
            n_blocks: 6,
            ff_expansion: 4,
            mode: FusionMode::Attention,
            views: vec![View::W2v, View::Duration, View::Pron],
            duration_vocab: 100,
            pron_dim: FeatureKind::Pron144.dim(),
        }
    }
}

impl FusionConfig {
    pub fn has(&self, v: View) -> bool {
        self.views.contains(&v)
    }

    /// The key/value view in attention mode and the leading block in concat mode.
    pub fn acoustic_view(&self) -> Option<View> {
        [View::W2v, View::Lfcc].into_iter().find(|v| self.has(*v))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fusion: {m}")));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_blocks == 0 || self.ff_expansion == 0 {
            return bad("n_blocks and ff_expansion must be positive".into());
        }
        if self.views.is_empty() {
            return bad("no views configured".into());
        }
        let mut sorted = self.views.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.views.len() {
            return bad("duplicate view".into());
        }
        if self.has(View::W2v) && self.has(View::Lfcc) {
            return bad("w2v and lfcc are alternative acoustic views".into());
        }
        if self.has(View::Duration) && self.duration_vocab == 0 {
            return bad("duration_vocab must be positive".into());
        }
        match self.mode {
            FusionMode::SingleView if self.views.len() != 1 => {
                bad("single_view takes exactly one view".into())
            }
            FusionMode::Attention if self.acoustic_view().is_none() => {
                bad("attention mode needs w2v or lfcc as keys/values".into())
            }
            FusionMode::Attention if !self.has(View::Duration) && !self.has(View::Pron) => {
                bad("attention mode needs duration or pron as queries".into())
            }
            _ => Ok(()),
        }
    }

    /// Width of the fused feature.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            FusionMode::Attention => {
                self.d_model * [View::Duration, View::Pron].iter().filter(|v| self.has(**v)).count()
            }
            FusionMode::Concat | FusionMode::SingleView => self.views.iter().map(|v| self.raw_dim(*v)).sum(),
        }
    }

    fn raw_dim(&self, v: View) -> usize {
        match v {
            View::W2v => PROJ_DIM,
            View::Lfcc => 3 * N_LFCC_FILTERS,
            View::Duration => 1,
            View::Pron => self.pron_dim,
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Numerically stable row-wise softmax (row max subtracted first).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut s = logits.clone();
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    s
}

/// Row-wise `softmax(Q Kᵀ / √d_k)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("query width {} vs key width {}", q.cols(), k.cols())));
    }
    check_finite(q, "attention queries")?;
    check_finite(k, "attention keys")?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(softmax_rows(&q.matmul_t(k).map(|x| x * scale)))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!("{} keys vs {} values", k.rows(), v.rows())));
    }
    check_finite(v, "attention values")?;
    Ok(attention_weights(q, k)?.matmul(v))
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let dk = g.shape(q)[1];
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let w = g.softmax(s);
    g.matmul(w, v)
}

/// Bias-free projections `W^Q, W^K, W^V` (split into heads by column
/// blocks) and the output projection `W^O`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d_model: usize, heads: usize) -> Self {
        MultiHeadAttention {
            wq: Linear::new(ps, init, &format!("{name}.wq"), d_model, d_model, false),
            wk: Linear::new(ps, init, &format!("{name}.wk"), d_model, d_model, false),
            wv: Linear::new(ps, init, &format!("{name}.wv"), d_model, d_model, false),
            wo: Linear::new(ps, init, &format!("{name}.wo"), d_model, d_model, false),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q: Var, k: Var, v: Var) -> Var {
        let q = self.wq.forward(g, ps, q);
        let k = self.wk.forward(g, ps, k);
        let v = self.wv.forward(g, ps, v);
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                attend(g, qh, kh, vh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.wo.forward(g, ps, cat)
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_up: Linear,
    pub ff_down: Linear,
    pub norm2: LayerNorm,
}

/// Post-norm encoder blocks whose queries come from the running state and
/// whose keys and values are always the acoustic view.
#[derive(Clone, Debug)]
pub struct CrossAttentionStack {
    pub blocks: Vec<CrossAttentionBlock>,
    pub d_model: usize,
    /// Test hook: skip both layer norms in every block.
    pub bypass_norms: bool,
}

impl CrossAttentionStack {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, c: &FusionConfig) -> Self {
        let d = c.d_model;
        let blocks = (0..c.n_blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                CrossAttentionBlock {
                    mha: MultiHeadAttention::new(ps, init, &format!("{n}.mha"), d, c.n_heads),
                    norm1: LayerNorm::new(ps, &format!("{n}.norm1"), d),
                    ff_up: Linear::new(ps, init, &format!("{n}.ff_up"), d, d * c.ff_expansion, true),
                    ff_down: Linear::new(ps, init, &format!("{n}.ff_down"), d * c.ff_expansion, d, true),
                    norm2: LayerNorm::new(ps, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        CrossAttentionStack {
            blocks,
            d_model: d,
            bypass_norms: false,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, query: Var, kv: Var) -> Result<Var> {
        let (m, dq) = (g.shape(query)[0], g.shape(query)[1]);
        let (n, dk) = (g.shape(kv)[0], g.shape(kv)[1]);
        if dq != self.d_model || dk != self.d_model {
            return Err(Error::Shape(format!(
                "cross-attention expects width {}, got query {dq} and keys {dk}",
                self.d_model
            )));
        }
        let pe_q = g.input(sinusoidal_positions((0..m).map(|i| i as f64), self.d_model));
        let pe_k = g.input(sinusoidal_positions((0..n).map(|i| i as f64), self.d_model));
        let keys_pe = g.add(kv, pe_k);
        let mut state = query;
        for (i, b) in self.blocks.iter().enumerate() {
            let (q_in, k_in) = if i == 0 {
                (g.add(state, pe_q), keys_pe)
            } else {
                (state, kv)
            };
            let a = b.mha.forward(g, ps, q_in, k_in, kv);
            let mut x = g.add(state, a);
            if !self.bypass_norms {
                x = b.norm1.forward(g, ps, x);
            }
            let h = b.ff_up.forward(g, ps, x);
            let h = g.relu(h);
            let h = b.ff_down.forward(g, ps, h);
            let mut y = g.add(x, h);
            if !self.bypass_norms {
                y = b.norm2.forward(g, ps, y);
            }
            state = y;
        }
        Ok(state)
    }
}

/// Per-utterance, length-fixed inputs to fusion, already on graph where
/// learned transforms apply upstream (the 1024→128 projection).
#[derive(Clone, Copy, Debug, Default)]
pub struct ViewVars<'a> {
    pub w2v: Option<Var>,
    pub lfcc: Option<Var>,
    pub duration: Option<&'a [usize]>,
    pub pron: Option<Var>,
}

/// Learned view embeddings plus one cross-attention stack per query view.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub duration_embed: Option<Embedding>,
    pub pron_proj: Option<Linear>,
    pub lfcc_proj: Option<Linear>,
    pub duration_stack: Option<CrossAttentionStack>,
    pub pron_stack: Option<CrossAttentionStack>,
}

impl Fusion {
    pub fn new(ps: &mut ParamStore, init: &mut Init, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let attention = config.mode == FusionMode::Attention;
        let d = config.d_model;
        let duration_embed = (attention && config.has(View::Duration))
            .then(|| Embedding::new(ps, init, "fusion.duration_embed", config.duration_vocab + 1, d));
        let pron_proj = (attention && config.has(View::Pron))
            .then(|| Linear::new(ps, init, "fusion.pron_proj", config.pron_dim, d, true));
        let lfcc_proj = (attention && config.has(View::Lfcc))
            .then(|| Linear::new(ps, init, "fusion.lfcc_proj", 3 * N_LFCC_FILTERS, d, true));
        let duration_stack = duration_embed
            .is_some()
            .then(|| CrossAttentionStack::new(ps, init, "fusion.duration_stack", &config));
        let pron_stack = pron_proj
            .is_some()
            .then(|| CrossAttentionStack::new(ps, init, "fusion.pron_stack", &config));
        Ok(Fusion {
            config,
            duration_embed,
            pron_proj,
            lfcc_proj,
            duration_stack,
            pron_stack,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let k = self.config.duration_vocab;
        match ids.iter().find(|&&i| i == 0 || i > k) {
            Some(bad) => Err(Error::Range(format!("duration id {bad} outside 1..={k}"))),
            None => Ok(()),
        }
    }

    /// The three query/key inputs of attention mode, each `[L × d_model]`.
    pub fn embed_views(&self, g: &mut Graph, ps: &ParamStore, views: &ViewVars) -> Result<(Var, Option<Var>, Option<Var>)> {
        let kv = match (views.w2v, views.lfcc, &self.lfcc_proj) {
            (Some(w), _, _) if self.config.has(View::W2v) => w,
            (_, Some(l), Some(p)) => p.forward(g, ps, l),
            _ => return Err(Error::Config("missing acoustic view for attention fusion".into())),
        };
        let dur = match &self.duration_embed {
            Some(e) => {
                let ids = views
                    .duration
                    .ok_or_else(|| Error::Config("missing duration view".into()))?;
                self.check_ids(ids)?;
                Some(e.forward(g, ps, ids))
            }
            None => None,
        };
        let pron = match &self.pron_proj {
            Some(p) => {
                let x = views.pron.ok_or_else(|| Error::Config("missing pron view".into()))?;
                Some(p.forward(g, ps, x))
            }
            None => None,
        };
        Ok((kv, dur, pron))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, views: &ViewVars) -> Result<Var> {
        let missing = |v: View| Error::Config(format!("missing {v} view for {} fusion", self.config.mode));
        let out = match self.config.mode {
            FusionMode::Attention => {
                let (kv, dur, pron) = self.embed_views(g, ps, views)?;
                let mut parts = Vec::new();
                if let (Some(q), Some(s)) = (dur, &self.duration_stack) {
                    parts.push(s.forward(g, ps, q, kv)?);
                }
                if let (Some(q), Some(s)) = (pron, &self.pron_stack) {
                    parts.push(s.forward(g, ps, q, kv)?);
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    g.concat_cols(&parts)
                }
            }
            FusionMode::Concat | FusionMode::SingleView => {
                let mut parts = Vec::new();
                for &v in &self.config.views {
                    let part = match v {
                        View::W2v => views.w2v.ok_or_else(|| missing(v))?,
                        View::Lfcc => views.lfcc.ok_or_else(|| missing(v))?,
                        View::Pron => views.pron.ok_or_else(|| missing(v))?,
                        View::Duration => {
                            let ids = views.duration.ok_or_else(|| missing(v))?;
                            self.check_ids(ids)?;
                            let k = self.config.duration_vocab as f64;
                            let col = ids.iter().map(|&i| i as f64 / k).collect();
                            g.input(Tensor::matrix(ids.len(), 1, col))
                        }
                    };
                    parts.push(part);
                }
                // acoustic view first, then duration, then pron
                let order: Vec<usize> = {
                    let mut idx: Vec<usize> = (0..parts.len()).collect();
                    idx.sort_by_key(|&i| match self.config.views[i] {
                        View::W2v | View::Lfcc => 0,
                        View::Duration => 1,
                        View::Pron => 2,
                    });
                    idx
                };
                let ordered: Vec<Var> = order.iter().map(|&i| parts[i]).collect();
                if ordered.len() == 1 {
                    ordered[0]
                } else {
                    g.concat_cols(&ordered)
                }
            }
        };
        let width = g.shape(out)[1];
        if width != self.config.output_dim() {
            return Err(Error::Shape(format!(
                "fused width {width}, expected {}",
                self.config.output_dim()
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_parameter_gradients, worst};
    use crate::rng::seeded;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed, 0);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn init(seed: u64) -> Init {
        Init::new(seeded(seed, 99))
    }

    #[test]
    fn documented_attention_case() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = attention_weights(&q, &k).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((w.get(0, 0) - w0).abs() < 1e-12);
        assert!((w.get(0, 0) - 0.6698).abs() < 1e-4);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let expect = [w0 * 1.0 + (1.0 - w0) * 3.0, w0 * 2.0 + (1.0 - w0) * 4.0];
        assert!((out.get(0, 0) - expect[0]).abs() < 1e-12);
        assert!((out.get(0, 1) - expect[1]).abs() < 1e-12);
        assert!((out.get(0, 0) - 1.6604).abs() < 1e-4);
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = random_matrix(3, 4, 1);
        let v = random_matrix(1, 5, 2);
        let out = scaled_dot_attention(&q, &random_matrix(1, 4, 3), &v).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert!((out.get(i, j) - v.get(0, j)).abs() < 1e-15);
            }
        }
        let k = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5, 0.1]; 4]);
        let v = random_matrix(4, 2, 4);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for j in 0..2 {
            let mean = (0..4).map(|i| v.get(i, j)).sum::<f64>() / 4.0;
            assert!((out.get(0, j) - mean).abs() < 1e-12);
        }
        assert!(scaled_dot_attention(&q, &random_matrix(2, 3, 1), &random_matrix(2, 2, 1)).is_err());
        let mut bad = q.clone();
        bad.set(0, 0, f64::NAN);
        assert!(matches!(scaled_dot_attention(&bad, &k, &v), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000, m in 1usize..5, n in 1usize..6) {
            let q = random_matrix(m, 3, seed).map(|x| x * 20.0);
            let k = random_matrix(n, 3, seed + 1).map(|x| x * 20.0);
            let w = attention_weights(&q, &k).unwrap();
            for i in 0..m {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn keys_and_values_permute_jointly(seed in 0u64..10_000) {
            let q = random_matrix(2, 3, seed);
            let k = random_matrix(4, 3, seed + 1);
            let v = random_matrix(4, 2, seed + 2);
            let perm = [2, 0, 3, 1];
            let a = scaled_dot_attention(&q, &k, &v).unwrap();
            let b = scaled_dot_attention(&q, &k.gather_rows(&perm), &v.gather_rows(&perm)).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }

    #[test]
    fn shifting_logit_rows_leaves_attention_unchanged() {
        let logits = random_matrix(3, 4, 5).map(|x| x * 10.0);
        let v = random_matrix(4, 3, 7);
        let base = softmax_rows(&logits).matmul(&v);
        let mut shifted = logits.clone();
        for (i, c) in [3.7, -250.0, 1e3].iter().enumerate() {
            shifted.row_mut(i).iter_mut().for_each(|x| *x += c);
        }
        assert!(softmax_rows(&shifted).matmul(&v).max_abs_diff(&base) < 1e-9);
    }

    fn mha_identity(d: usize) -> (ParamStore, MultiHeadAttention) {
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut init(1), "mha", d, 1);
        for id in [mha.wq.weight, mha.wk.weight, mha.wv.weight, mha.wo.weight] {
            *ps.value_mut(id) = Tensor::identity(d);
        }
        (ps, mha)
    }

    #[test]
    fn single_identity_head_reduces_to_plain_attention() {
        let (ps, mha) = mha_identity(4);
        let (q, k, v) = (random_matrix(2, 4, 1), random_matrix(3, 4, 2), random_matrix(3, 4, 3));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = mha.forward(&mut g, &ps, qv, kv, vv);
        assert_eq!(g.value(out), &scaled_dot_attention(&q, &k, &v).unwrap());
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut init(2), "mha", 4, 2);
        let (q, k, v) = (random_matrix(2, 4, 4), random_matrix(3, 4, 5), random_matrix(3, 4, 6));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = mha.forward(&mut g, &ps, qv, kv, vv);
        let out = g.value(out).clone();
        let w = |l: &Linear| ps.value(l.weight).clone();
        let (wq, wk, wv, wo) = (w(&mha.wq), w(&mha.wk), w(&mha.wv), w(&mha.wo));
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = q.matmul(&wq.slice_cols(2 * h, 2));
            let kh = k.matmul(&wk.slice_cols(2 * h, 2));
            let vh = v.matmul(&wv.slice_cols(2 * h, 2));
            let mut o = Tensor::zeros(&[2, 2]);
            for i in 0..2 {
                let logits: Vec<f64> = (0..3)
                    .map(|j| (0..2).map(|c| qh.get(i, c) * kh.get(j, c)).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..2 {
                    let val: f64 = (0..3).map(|j| logits[j].exp() / z * vh.get(j, c)).sum();
                    o.set(i, c, val);
                }
            }
            heads.push(o);
        }
        let oracle = Tensor::concat_cols(&[&heads[0], &heads[1]]).matmul(&wo);
        assert!(out.max_abs_diff(&oracle) < 1e-6);
        let c = FusionConfig::default();
        assert_eq!(c.d_model / c.n_heads, 16);
    }

    #[test]
    fn zeroed_stack_without_norms_is_identity() {
        let c = FusionConfig::default();
        let mut ps = ParamStore::new();
        let mut stack = CrossAttentionStack::new(&mut ps, &mut init(3), "s", &c);
        stack.bypass_norms = true;
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).fill(0.0);
        }
        let q = random_matrix(500, 128, 1);
        let mut g = Graph::new();
        let (qv, kv) = (g.input(q.clone()), g.input(random_matrix(500, 128, 2)));
        let out = stack.forward(&mut g, &ps, qv, kv).unwrap();
        assert_eq!(g.value(out), &q);
    }

    fn layer_norm_rows(x: &Tensor) -> Tensor {
        let mut o = x.clone();
        for i in 0..o.rows() {
            let r = o.row_mut(i);
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
        }
        o
    }

    #[test]
    fn one_block_matches_hand_composition() {
        let c = FusionConfig {
            d_model: 6,
            n_heads: 1,
            n_blocks: 1,
            ff_expansion: 2,
            ..FusionConfig::default()
        };
        let mut ps = ParamStore::new();
        let stack = CrossAttentionStack::new(&mut ps, &mut init(4), "s", &c);
        let b = &stack.blocks[0];
        let q = random_matrix(4, 6, 1);
        let kv = random_matrix(5, 6, 2);
        let mut g = Graph::new();
        let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
        let out = stack.forward(&mut g, &ps, qv, kvv).unwrap();
        let out = g.value(out).clone();

        let w = |id| ps.value(id).clone();
        let q_pe = q.zip_map(&sinusoidal_positions((0..4).map(f64::from), 6), |a, b| a + b);
        let k_pe = kv.zip_map(&sinusoidal_positions((0..5).map(f64::from), 6), |a, b| a + b);
        let att = scaled_dot_attention(
            &q_pe.matmul(&w(b.mha.wq.weight)),
            &k_pe.matmul(&w(b.mha.wk.weight)),
            &kv.matmul(&w(b.mha.wv.weight)),
        )
        .unwrap()
        .matmul(&w(b.mha.wo.weight));
        let x = layer_norm_rows(&q.zip_map(&att, |a, b| a + b));
        let bias_row = |t: &Tensor, bias: &Tensor| {
            let mut t = t.clone();
            for i in 0..t.rows() {
                for (v, bb) in t.row_mut(i).iter_mut().zip(bias.data()) {
                    *v += bb;
                }
            }
            t
        };
        let h = bias_row(&x.matmul(&w(b.ff_up.weight)), &w(b.ff_up.bias.unwrap())).map(|v| v.max(0.0));
        let h = bias_row(&h.matmul(&w(b.ff_down.weight)), &w(b.ff_down.bias.unwrap()));
        let oracle = layer_norm_rows(&x.zip_map(&h, |a, b| a + b));
        assert!(out.max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn tiny_stack_gradients_match_finite_differences() {
        let c = FusionConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            ff_expansion: 2,
            ..FusionConfig::default()
        };
        let mut ps = ParamStore::new();
        let stack = CrossAttentionStack::new(&mut ps, &mut init(5), "s", &c);
        let (q, kv) = (random_matrix(3, 8, 1), random_matrix(3, 8, 2));
        let target = random_matrix(3, 8, 3);
        let reports = check_parameter_gradients(&mut ps, 1e-5, |ps| {
            let mut g = Graph::new();
            let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
            let out = stack.forward(&mut g, ps, qv, kvv).unwrap();
            let t = g.input(target.clone());
            let prod = g.mul(out, t);
            let loss = g.sum(prod);
            (g, loss)
        });
        let w = worst(&reports).unwrap();
        assert!(w.relative_error < 1e-3, "{}: {}", w.name, w.relative_error);
    }

    fn views_fixture(g: &mut Graph, ids: &[usize]) -> (Var, Var, Var) {
        let w2v = g.input(random_matrix(500, 128, 1));
        let pron = g.input(random_matrix(500, 144, 2));
        let lfcc = g.input(random_matrix(500, 60, 3));
        let _ = ids;
        (w2v, pron, lfcc)
    }

    #[test]
    fn fused_widths_per_mode() {
        let ids: Vec<usize> = (0..500).map(|i| i % 100 + 1).collect();
        let cases = [
            (FusionMode::Concat, vec![View::W2v, View::Duration, View::Pron], 273),
            (FusionMode::Concat, vec![View::Lfcc, View::Duration, View::Pron], 205),
            (FusionMode::SingleView, vec![View::Lfcc], 60),
            (FusionMode::SingleView, vec![View::W2v], 128),
            (FusionMode::Attention, vec![View::W2v, View::Duration, View::Pron], 256),
            (FusionMode::Attention, vec![View::Lfcc, View::Pron], 128),
        ];
        for (mode, views, width) in cases {
            let c = FusionConfig {
                mode,
                views,
                n_blocks: 1,
                ..FusionConfig::default()
            };
            let mut ps = ParamStore::new();
            let f = Fusion::new(&mut ps, &mut init(6), c.clone()).unwrap();
            let mut g = Graph::new();
            let (w2v, pron, lfcc) = views_fixture(&mut g, &ids);
            let vv = ViewVars {
                w2v: Some(w2v),
                lfcc: Some(lfcc),
                duration: Some(&ids),
                pron: Some(pron),
            };
            let out = f.forward(&mut g, &ps, &vv).unwrap();
            assert_eq!(g.shape(out), &[500, width], "{mode} {:?}", c.views);
            assert_eq!(c.output_dim(), width);
        }
    }

    #[test]
    fn concat_columns_follow_the_documented_order() {
        let c = FusionConfig {
            mode: FusionMode::Concat,
            views: vec![View::Pron, View::Duration, View::W2v],
            ..FusionConfig::default()
        };
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, &mut init(6), c).unwrap();
        let ids = vec![50usize; 500];
        let mut g = Graph::new();
        let (w2v, pron, _) = views_fixture(&mut g, &ids);
        let vv = ViewVars {
            w2v: Some(w2v),
            duration: Some(&ids),
            pron: Some(pron),
            ..Default::default()
        };
        let out = f.forward(&mut g, &ps, &vv).unwrap();
        let out = g.value(out).clone();
        assert_eq!(out.slice_cols(0, 128), *g.value(w2v));
        assert!(out.slice_cols(128, 1).data().iter().all(|&x| x == 0.5));
        assert_eq!(out.slice_cols(129, 144), *g.value(pron));
    }

    #[test]
    fn duration_embedding_rows_repeat_and_ids_are_checked() {
        let c = FusionConfig {
            n_blocks: 1,
            ..FusionConfig::default()
        };
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, &mut init(7), c).unwrap();
        let mut ids = vec![3usize; 500];
        ids[1] = 2;
        ids[10] = 7;
        ids[400] = 7;
        let mut g = Graph::new();
        let (w2v, pron, _) = views_fixture(&mut g, &ids);
        let vv = ViewVars {
            w2v: Some(w2v),
            duration: Some(&ids),
            pron: Some(pron),
            ..Default::default()
        };
        let (_, dur, _) = f.embed_views(&mut g, &ps, &vv).unwrap();
        let d = g.value(dur.unwrap());
        assert_eq!(d.row(10), d.row(400));
        let mut bad_ids = ids.clone();
        bad_ids[0] = 101;
        let vv = ViewVars {
            duration: Some(&bad_ids),
            ..vv
        };
        assert!(matches!(f.forward(&mut g, &ps, &vv), Err(Error::Range(_))));
    }

    #[test]
    fn zero_pron_projection_yields_bias_rows() {
        let c = FusionConfig {
            n_blocks: 1,
            ..FusionConfig::default()
        };
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, &mut init(8), c).unwrap();
        let p = f.pron_proj.clone().unwrap();
        ps.value_mut(p.weight).fill(0.0);
        let bias: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
        *ps.value_mut(p.bias.unwrap()) = Tensor::matrix(1, 128, bias.clone());
        let ids = vec![1usize; 500];
        let mut g = Graph::new();
        let (w2v, pron, _) = views_fixture(&mut g, &ids);
        let vv = ViewVars {
            w2v: Some(w2v),
            duration: Some(&ids),
            pron: Some(pron),
            ..Default::default()
        };
        let (_, _, pe) = f.embed_views(&mut g, &ps, &vv).unwrap();
        let pe = g.value(pe.unwrap());
        for i in 0..500 {
            assert_eq!(pe.row(i), &bias[..]);
        }
    }

    #[test]
    fn missing_views_and_bad_configs_are_rejected() {
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, &mut init(9), FusionConfig { n_blocks: 1, ..FusionConfig::default() }).unwrap();
        let mut g = Graph::new();
        let w2v = g.input(random_matrix(10, 128, 1));
        let vv = ViewVars {
            w2v: Some(w2v),
            ..Default::default()
        };
        assert!(matches!(f.forward(&mut g, &ps, &vv), Err(Error::Config(_))));
        let bad = FusionConfig {
            n_heads: 7,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FusionConfig {
            mode: FusionMode::SingleView,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("attention".parse::<FusionMode>().is_ok());
        assert!("bogus".parse::<View>().is_err());
    }
}
