//! Pronunciation view: a small Conformer phoneme recognizer trained with a
//! joint CTC + attention objective. After training only the acoustic encoder
//! is kept, as a frozen 144-d frame feature extractor.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{read_transcript, read_wav, AudioClip, TrialManifest};
use crate::dsp::{log_mel_spectrogram, FeatureKind, FrameFeatureSequence, N_MELS, SHIFT_MS};
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoidal_positions, Conv2d, DepthwiseConv1d, Embedding, LayerNorm, Linear, Lstm};
use crate::nn::{Adam, AdamConfig, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::rng::{seeded, stream};

pub const CHECKPOINT_KIND: &str = "pron-recognizer";
pub const BLANK: usize = 0;
/// The attention decoder reuses index 0 as its start and end token.
pub const SOS_EOS: usize = 0;
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub d_model: usize,
    pub n_conformer_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub subsample_factor: usize,
    pub subsample_channels: usize,
    /// Pseudo-phonemes plus the blank.
    pub vocab: usize,
    pub att_decoder_hidden: usize,
    pub att_dim: usize,
    pub att_embed_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub alpha: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            d_model: 144,
            n_conformer_blocks: 2,
            n_heads: 4,
            conv_kernel: 15,
            ff_expansion: 4,
            subsample_factor: 4,
            subsample_channels: 32,
            vocab: 21,
            att_decoder_hidden: 320,
            att_dim: 128,
            att_embed_dim: 64,
            location_filters: 10,
            location_width: 31,
            alpha: 0.5,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("recognizer: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("per-head dimension must be even");
        }
        if self.subsample_factor != 4 {
            return bad("subsample_factor is fixed at 4 (two stride-2 convolutions)");
        }
        if self.conv_kernel % 2 == 0 || self.location_width % 2 == 0 {
            return bad("convolution kernels must be odd");
        }
        if self.vocab < 2 {
            return bad("vocab needs the blank plus at least one symbol");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Range(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_conformer_blocks == 0
            || self.ff_expansion == 0
            || self.subsample_channels == 0
            || self.att_decoder_hidden == 0
            || self.att_dim == 0
            || self.att_embed_dim == 0
            || self.location_filters == 0
        {
            return bad("all sizes must be positive");
        }
        Ok(())
    }
}

pub fn joint_loss(ctc_loss: f64, att_loss: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("alpha {alpha} outside [0, 1]")));
    }
    if !ctc_loss.is_finite() || !att_loss.is_finite() {
        return Err(Error::NonFinite("joint loss inputs".into()));
    }
    Ok(alpha * ctc_loss + (1.0 - alpha) * att_loss)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

/// Frames needed to emit `targets`: one per symbol plus a blank between repeats.
pub fn ctc_min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `targets` under CTC, blank = 0.
pub fn ctc_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(logits, targets).map(|(l, _)| l)
}

/// CTC loss and its gradient with respect to the logits, by the log-space
/// forward-backward recursions.
pub fn ctc_loss_and_grad(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, vocab) = (logits.rows(), logits.cols());
    if let Some(&bad) = targets.iter().find(|&&k| k == BLANK || k >= vocab) {
        return Err(Error::Range(format!("target symbol {bad} outside 1..{vocab}")));
    }
    if ctc_min_frames(targets) > t_len {
        return Err(Error::TooShort(format!(
            "target of length {} needs {} frames, have {t_len}",
            targets.len(),
            ctc_min_frames(targets)
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("ctc logits".into()));
    }
    let lp = log_softmax_rows(logits);
    let mut ext = vec![BLANK];
    for &k in targets {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            if a > ninf {
                alpha[t][s] = a + lp.get(t, ext[s]);
            }
        }
    }
    let last = t_len - 1;
    let mut log_z = alpha[last][s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[last][s_len - 2]);
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[last][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last][s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp.get(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp.get(t + 1, ext[s + 2]));
            }
            beta[t][s] = b;
        }
    }

    let mut grad = lp.map(f64::exp);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_z;
            if occ > ninf {
                let v = grad.get(t, ext[s]) - occ.exp();
                grad.set(t, ext[s], v);
            }
        }
    }
    Ok((-log_z, grad))
}

/// Frame-wise argmax, repeats collapsed, blanks removed.
pub fn greedy_decode(ctc_logits: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..ctc_logits.rows() {
        let row = ctc_logits.row(t);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Pooled phoneme error rate: total edits over total reference symbols.
pub fn phoneme_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let refs: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if refs == 0 {
        return Err(Error::InsufficientData("no reference symbols".into()));
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / refs as f64)
}

/// Per-utterance mean and variance normalization of each log-mel bin.
pub fn normalize_logmel(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..t).map(|i| x.get(i, j)).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for i in 0..t {
            out.set(i, j, (x.get(i, j) - mean) * inv);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, expansion: usize) -> Self {
        FeedForward {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            up: Linear::new(ps, init, &format!("{name}.up"), d, d * expansion, true),
            down: Linear::new(ps, init, &format!("{name}.down"), d * expansion, d, true),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, ps, x);
        let h = self.up.forward(g, ps, h);
        let h = g.swish(h);
        self.down.forward(g, ps, h)
    }
}

/// Self-attention with relative sinusoidal positions and learned content and
/// position biases, in the Transformer-XL formulation.
#[derive(Clone, Debug)]
struct RelPosAttention {
    norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    wpos: Linear,
    bias_u: ParamId,
    bias_v: ParamId,
    heads: usize,
}

/// Relative-position lookup: entry `(i, j)` reads column `T-1-i+j` of the
/// `[T × (2T-1)]` position scores.
fn rel_shift_index(t: usize) -> Vec<Option<usize>> {
    let w = 2 * t - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            idx.push(Some(i * w + (t - 1 - i + j)));
        }
    }
    idx
}

fn segment_mask(t: usize, segments: &[(usize, usize)]) -> Tensor {
    let mut m = Tensor::full(&[t, t], MASKED);
    for &(start, len) in segments {
        for i in start..start + len {
            for j in start..start + len {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

impl RelPosAttention {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        RelPosAttention {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            wq: Linear::new(ps, init, &format!("{name}.q"), d, d, true),
            wk: Linear::new(ps, init, &format!("{name}.k"), d, d, true),
            wv: Linear::new(ps, init, &format!("{name}.v"), d, d, true),
            wo: Linear::new(ps, init, &format!("{name}.out"), d, d, true),
            wpos: Linear::new(ps, init, &format!("{name}.pos"), d, d, false),
            bias_u: ps.add(format!("{name}.bias_u"), Tensor::zeros(&[1, d])),
            bias_v: ps.add(format!("{name}.bias_v"), Tensor::zeros(&[1, d])),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, segments: Option<&[(usize, usize)]>) -> Var {
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = d / self.heads;
        let xn = self.norm.forward(g, ps, x);
        let q = self.wq.forward(g, ps, xn);
        let k = self.wk.forward(g, ps, xn);
        let v = self.wv.forward(g, ps, xn);
        let rel = sinusoidal_positions((0..2 * t - 1).map(|r| (t - 1) as f64 - r as f64), d);
        let rel = g.input(rel);
        let p = self.wpos.forward(g, ps, rel);
        let u = g.param(ps, self.bias_u);
        let bv = g.param(ps, self.bias_v);
        let shift = rel_shift_index(t);
        let mask = segments.map(|s| g.input(segment_mask(t, s)));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let ph = g.slice_cols(p, h * dh, dh);
            let uh = g.slice_cols(u, h * dh, dh);
            let vbh = g.slice_cols(bv, h * dh, dh);
            let qu = g.add_row(qh, uh);
            let content = g.matmul_t(qu, kh);
            let qv = g.add_row(qh, vbh);
            let pos_full = g.matmul_t(qv, ph);
            let pos = g.gather(pos_full, shift.clone(), &[t, t]);
            let scores = g.add(content, pos);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&heads);
        self.wo.forward(g, ps, cat)
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv1d,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, kernel: usize) -> Self {
        ConvModule {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            pointwise_in: Linear::new(ps, init, &format!("{name}.pw_in"), d, 2 * d, true),
            depthwise: DepthwiseConv1d::new(ps, init, &format!("{name}.dw"), d, kernel),
            mid_norm: LayerNorm::new(ps, &format!("{name}.mid_norm"), d),
            pointwise_out: Linear::new(ps, init, &format!("{name}.pw_out"), d, d, true),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, segments: Option<&[(usize, usize)]>) -> Var {
        let h = self.norm.forward(g, ps, x);
        let h = self.pointwise_in.forward(g, ps, h);
        let h = g.glu(h);
        let h = self.depthwise.forward(g, ps, h, segments);
        let h = self.mid_norm.forward(g, ps, h);
        let h = g.swish(h);
        self.pointwise_out.forward(g, ps, h)
    }
}

#[derive(Clone, Debug)]
struct ConformerBlock {
    ff1: FeedForward,
    attn: RelPosAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, c: &RecognizerConfig) -> Self {
        let d = c.d_model;
        ConformerBlock {
            ff1: FeedForward::new(ps, init, &format!("{name}.ff1"), d, c.ff_expansion),
            attn: RelPosAttention::new(ps, init, &format!("{name}.mhsa"), d, c.n_heads),
            conv: ConvModule::new(ps, init, &format!("{name}.conv"), d, c.conv_kernel),
            ff2: FeedForward::new(ps, init, &format!("{name}.ff2"), d, c.ff_expansion),
            final_norm: LayerNorm::new(ps, &format!("{name}.final_norm"), d),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, segments: Option<&[(usize, usize)]>) -> Var {
        let h = self.ff1.forward(g, ps, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);
        let h = self.attn.forward(g, ps, x, segments);
        let x = g.add(x, h);
        let h = self.conv.forward(g, ps, x, segments);
        let x = g.add(x, h);
        let h = self.ff2.forward(g, ps, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);
        self.final_norm.forward(g, ps, x)
    }
}

/// Location-sensitive attention over encoder states feeding a single-layer
/// LSTM decoder, teacher-forced.
#[derive(Clone, Debug)]
struct AttentionDecoder {
    embed: Embedding,
    lstm: Lstm,
    query: Linear,
    keys: Linear,
    location_conv: ParamId,
    location_proj: Linear,
    energy: Linear,
    out: Linear,
    width: usize,
}

impl AttentionDecoder {
    fn new(ps: &mut ParamStore, init: &mut Init, c: &RecognizerConfig) -> Self {
        let bound = 1.0 / (c.location_width as f64).sqrt();
        AttentionDecoder {
            embed: Embedding::new(ps, init, "dec.embed", c.vocab, c.att_embed_dim),
            lstm: Lstm::new(ps, init, "dec.lstm", c.att_embed_dim + c.d_model, c.att_decoder_hidden),
            query: Linear::new(ps, init, "dec.att.query", c.att_decoder_hidden, c.att_dim, false),
            keys: Linear::new(ps, init, "dec.att.keys", c.d_model, c.att_dim, true),
            location_conv: ps.add(
                "dec.att.location_conv",
                init.uniform(&[c.location_width, c.location_filters], bound),
            ),
            location_proj: Linear::new(ps, init, "dec.att.location_proj", c.location_filters, c.att_dim, false),
            energy: Linear::new(ps, init, "dec.att.energy", c.att_dim, 1, false),
            out: Linear::new(ps, init, "dec.out", c.att_decoder_hidden + c.d_model, c.vocab, true),
            width: c.location_width,
        }
    }

    /// Logits for `targets` followed by the end token: `[(U+1) × vocab]`.
    fn forward(&self, g: &mut Graph, ps: &ParamStore, enc: Var, targets: &[usize]) -> Var {
        let t = g.shape(enc)[0];
        let half = self.width / 2;
        let mut window = Vec::with_capacity(t * self.width);
        for j in 0..t {
            for k in 0..self.width {
                let src = j as isize + k as isize - half as isize;
                window.push((src >= 0 && (src as usize) < t).then_some(src as usize));
            }
        }
        let keys = self.keys.forward(g, ps, enc);
        let loc_w = g.param(ps, self.location_conv);
        let (mut h, mut c) = self.lstm.zero_state(g);
        let mut prev_att = g.input(Tensor::full(&[1, t], 1.0 / t as f64));
        let inputs: Vec<usize> = std::iter::once(SOS_EOS).chain(targets.iter().copied()).collect();
        let mut logits = Vec::with_capacity(inputs.len());
        for &tok in &inputs {
            let windows = g.gather(prev_att, window.clone(), &[t, self.width]);
            let loc = g.matmul(windows, loc_w);
            let loc = self.location_proj.forward(g, ps, loc);
            let q = self.query.forward(g, ps, h);
            let e = g.add(keys, loc);
            let e = g.add_row(e, q);
            let e = g.tanh(e);
            let e = self.energy.forward(g, ps, e);
            let e = g.transpose(e);
            let att = g.softmax(e);
            let ctx = g.matmul(att, enc);
            let emb = self.embed.forward(g, ps, &[tok]);
            let x = g.concat_cols(&[emb, ctx]);
            let xg = self.lstm.project_inputs(g, ps, x);
            let (nh, nc) = self.lstm.step(g, ps, xg, h, c);
            h = nh;
            c = nc;
            let o = g.concat_cols(&[h, ctx]);
            logits.push(self.out.forward(g, ps, o));
            prev_att = att;
        }
        g.concat_rows(&logits)
    }
}

/// One training utterance: normalized log-mel frames and its symbol sequence.
#[derive(Clone, Debug)]
pub struct PronExample {
    pub logmel: Tensor,
    pub targets: Vec<usize>,
}

impl PronExample {
    pub fn from_clip(clip: &AudioClip, targets: Vec<usize>) -> Result<Self> {
        let lm = log_mel_spectrogram(clip)?;
        Ok(PronExample {
            logmel: normalize_logmel(&lm.values),
            targets,
        })
    }
}

pub struct LossVars {
    pub ctc: Var,
    pub att: Var,
    pub joint: Var,
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: RecognizerConfig,
    pub ps: ParamStore,
    sub1: Conv2d,
    sub2: Conv2d,
    input_proj: Linear,
    blocks: Vec<ConformerBlock>,
    ctc_head: Linear,
    decoder: AttentionDecoder,
}

pub struct RecognizerOutput {
    pub encoder_states: Tensor,
    pub ctc_logits: Tensor,
}

impl Recognizer {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut init = Init::new(seeded(seed, stream::PRON_INIT));
        let c = &config;
        let ch = c.subsample_channels;
        let sub1 = Conv2d::new(&mut ps, &mut init, "enc.sub1", 1, ch, 3, 2, 1);
        let sub2 = Conv2d::new(&mut ps, &mut init, "enc.sub2", ch, ch, 3, 2, 1);
        let freq = N_MELS.div_ceil(2).div_ceil(2);
        let input_proj = Linear::new(&mut ps, &mut init, "enc.input_proj", ch * freq, c.d_model, true);
        let blocks = (0..c.n_conformer_blocks)
            .map(|i| ConformerBlock::new(&mut ps, &mut init, &format!("enc.block{i}"), c))
            .collect();
        let ctc_head = Linear::new(&mut ps, &mut init, "ctc.head", c.d_model, c.vocab, true);
        let decoder = AttentionDecoder::new(&mut ps, &mut init, c);
        Ok(Recognizer {
            config,
            ps,
            sub1,
            sub2,
            input_proj,
            blocks,
            ctc_head,
            decoder,
        })
    }

    pub fn ctc_head_params(&self) -> Vec<ParamId> {
        std::iter::once(self.ctc_head.weight).chain(self.ctc_head.bias).collect()
    }

    pub fn encoded_frames(&self, t: usize) -> usize {
        t.div_ceil(self.config.subsample_factor)
    }

    /// Conv subsampling, `[T × 80] → [ceil(T/4) × d_model]`.
    fn subsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, f) = (g.shape(x)[0], g.shape(x)[1]);
        if f != N_MELS {
            return Err(Error::Shape(format!("recognizer expects {N_MELS} mel bins, got {f}")));
        }
        if t < self.config.subsample_factor {
            return Err(Error::TooShort(format!(
                "{t} frames is below the subsampling factor {}",
                self.config.subsample_factor
            )));
        }
        let img = g.reshape(x, &[1, t, f]);
        let h = self.sub1.forward(g, &self.ps, img);
        let h = g.relu(h);
        let h = self.sub2.forward(g, &self.ps, h);
        let h = g.relu(h);
        let s = g.shape(h).to_vec();
        let (ch, tp, fp) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(ch * tp * fp);
        for ti in 0..tp {
            for c in 0..ch {
                for fi in 0..fp {
                    idx.push(Some(c * tp * fp + ti * fp + fi));
                }
            }
        }
        let frames = g.gather(h, idx, &[tp, ch * fp]);
        Ok(self.input_proj.forward(g, &self.ps, frames))
    }

    /// The Conformer stack alone. With `segments`, attention and the depthwise
    /// convolution are confined to each `(start, len)` block of rows.
    pub fn conformer_blocks(&self, g: &mut Graph, x: Var, segments: Option<&[(usize, usize)]>) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, &self.ps, h, segments);
        }
        h
    }

    pub fn encode_graph(&self, g: &mut Graph, logmel: &Tensor) -> Result<Var> {
        let x = g.input(logmel.clone());
        let h = self.subsample(g, x)?;
        Ok(self.conformer_blocks(g, h, None))
    }

    /// Forward pass on already normalized log-mel frames.
    pub fn forward(&self, logmel: &Tensor) -> Result<RecognizerOutput> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, logmel)?;
        let ctc = self.ctc_head.forward(&mut g, &self.ps, enc);
        Ok(RecognizerOutput {
            encoder_states: g.value(enc).clone(),
            ctc_logits: g.value(ctc).clone(),
        })
    }

    pub fn attention_logits(&self, logmel: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, logmel)?;
        let logits = self.decoder.forward(&mut g, &self.ps, enc, targets);
        Ok(g.value(logits).clone())
    }

    pub fn losses(&self, g: &mut Graph, ex: &PronExample) -> Result<LossVars> {
        let enc = self.encode_graph(g, &ex.logmel)?;
        let ctc_logits = self.ctc_head.forward(g, &self.ps, enc);
        let (ctc_value, ctc_grad) = ctc_loss_and_grad(g.value(ctc_logits), &ex.targets)?;
        let ctc = g.custom_loss(ctc_logits, ctc_value, ctc_grad);
        let att_logits = self.decoder.forward(g, &self.ps, enc, &ex.targets);
        let mut out_targets = ex.targets.clone();
        out_targets.push(SOS_EOS);
        let att = g.cross_entropy(att_logits, &out_targets);
        let alpha = self.config.alpha;
        let a = g.scale(ctc, alpha);
        let b = g.scale(att, 1.0 - alpha);
        let joint = g.add(a, b);
        Ok(LossVars { ctc, att, joint })
    }

    pub fn joint_loss_value(&self, ex: &PronExample) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.losses(&mut g, ex)?;
        Ok(g.value(l.joint).item())
    }

    /// One Adam update on the mean joint loss of `batch`; returns that mean.
    pub fn train_step(&mut self, batch: &[&PronExample], adam: &mut Adam) -> Result<f64> {
        self.ps.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let mut g = Graph::new();
            let l = self.losses(&mut g, ex)?;
            let v = g.value(l.joint).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("recognizer loss diverged ({v})")));
            }
            total += v;
            let grads = g.backward(l.joint);
            g.accumulate(&grads, &mut self.ps, scale);
        }
        if !self.ps.grads_finite() {
            return Err(Error::NonFinite("recognizer gradients".into()));
        }
        adam.step(&mut self.ps);
        Ok(total * scale)
    }

    pub fn decode(&self, clip: &AudioClip) -> Result<Vec<usize>> {
        let lm = log_mel_spectrogram(clip)?;
        let out = self.forward(&normalize_logmel(&lm.values))?;
        Ok(greedy_decode(&out.ctc_logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.ps)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Recognizer::new(ck.config()?, 0)?;
        ck.restore(&mut model.ps)?;
        Ok(model)
    }
}

/// Encoder states repeated to the 10 ms grid and truncated to the log-mel
/// frame count. Decoders are not run and nothing here is trainable.
pub fn extract_pron_features(clip: &AudioClip, model: &Recognizer) -> Result<FrameFeatureSequence> {
    extract_pron_from_logmel(&log_mel_spectrogram(clip)?, model)
}

pub fn extract_pron_from_logmel(lm: &FrameFeatureSequence, model: &Recognizer) -> Result<FrameFeatureSequence> {
    let t = lm.frames();
    let out = model.forward(&normalize_logmel(&lm.values))?;
    let factor = model.config.subsample_factor;
    let idx: Vec<usize> = (0..t).map(|i| i / factor).collect();
    let values = out.encoder_states.gather_rows(&idx);
    let kind = if model.config.d_model == FeatureKind::Pron144.dim() {
        FeatureKind::Pron144
    } else {
        FeatureKind::Hidden(model.config.d_model)
    };
    FrameFeatureSequence::new(values, kind, SHIFT_MS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PronTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    /// Cap on training utterances drawn from the manifest; 0 uses all.
    pub max_utterances: usize,
    pub adam: AdamConfig,
}

impl Default for PronTrainConfig {
    fn default() -> Self {
        PronTrainConfig {
            epochs: 30,
            batch_size: 8,
            heldout_fraction: 0.1,
            max_utterances: 0,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PronTrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub heldout_per: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

pub fn load_examples(manifest: &TrialManifest) -> Result<Vec<PronExample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let tp = r.transcript_path();
            if !tp.exists() {
                return Err(Error::InsufficientData(format!(
                    "missing transcript sidecar {}",
                    tp.display()
                )));
            }
            PronExample::from_clip(&read_wav(&r.path)?, read_transcript(&tp)?)
        })
        .collect()
}

fn mean_loss(model: &Recognizer, data: &[PronExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += model.joint_loss_value(ex)?;
    }
    Ok(total / data.len() as f64)
}

pub fn heldout_per(model: &Recognizer, data: &[PronExample]) -> Result<f64> {
    let pairs = data
        .iter()
        .map(|ex| Ok((ex.targets.clone(), greedy_decode(&model.forward(&ex.logmel)?.ctc_logits))))
        .collect::<Result<Vec<_>>>()?;
    phoneme_error_rate(&pairs)
}

/// Trains on the manifest with a seeded 10% hold-out split.
pub fn train_recognizer(
    manifest: &TrialManifest,
    config: &RecognizerConfig,
    train: &PronTrainConfig,
    seed: u64,
) -> Result<(Recognizer, PronTrainReport)> {
    let examples = load_examples(manifest)?;
    train_recognizer_on(examples, config, train, seed)
}

pub fn train_recognizer_on(
    mut examples: Vec<PronExample>,
    config: &RecognizerConfig,
    train: &PronTrainConfig,
    seed: u64,
) -> Result<(Recognizer, PronTrainReport)> {
    if train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::Config("pron training needs positive epochs and batch size".into()));
    }
    if !(0.0..1.0).contains(&train.heldout_fraction) {
        return Err(Error::Range("heldout_fraction must lie in [0, 1)".into()));
    }
    if examples.len() < 2 {
        return Err(Error::InsufficientData("pron training needs at least 2 utterances".into()));
    }
    let mut rng = seeded(seed, stream::PRON_DATA);
    examples.shuffle(&mut rng);
    let n_held = ((examples.len() as f64 * train.heldout_fraction).ceil() as usize).max(1);
    let heldout = examples.split_off(examples.len() - n_held);
    if train.max_utterances > 0 {
        examples.truncate(train.max_utterances);
    }
    let mut model = Recognizer::new(config.clone(), seed)?;
    let mut adam = Adam::new(train.adam.clone());
    let mut report = PronTrainReport {
        initial_heldout_loss: mean_loss(&model, &heldout)?,
        n_train: examples.len(),
        n_heldout: heldout.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&PronExample> = chunk.iter().map(|&i| &examples[i]).collect();
            total += model.train_step(&batch, &mut adam)? * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        log::info!("pron epoch {}: train loss {mean:.4}", epoch + 1);
        report.epoch_train_loss.push(mean);
    }
    report.final_heldout_loss = mean_loss(&model, &heldout)?;
    report.heldout_per = heldout_per(&model, &heldout)?;
    Ok((model, report))
}
