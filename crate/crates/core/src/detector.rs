//! Back-end classifier (Max-Feature-Map LCNN, stacked BiLSTMs, global average
//! pooling, affine output) and the full trainable model that bundles it with
//! the SSL projection and the fusion stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::frame_encoders::{Projection128, PROJ_DIM, W2V_DIM};
use crate::fusion::{Fusion, FusionConfig, View, ViewVars};
use crate::nn::layers::{BiLstm, Conv2d, Linear};
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};
use crate::rng::{seeded, stream};

pub const CHECKPOINT_KIND: &str = "spoof-detector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Channels after each Max-Feature-Map (each conv emits twice as many).
    pub lcnn_channels: Vec<usize>,
    pub blstm_hidden: usize,
    pub blstm_layers: usize,
    pub n_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            lcnn_channels: vec![32, 48, 64],
            blstm_hidden: 80,
            blstm_layers: 2,
            n_classes: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if input_dim == 0 {
            return Err(Error::Config("detector input_dim must be positive".into()));
        }
        if self.lcnn_channels.is_empty() || self.lcnn_channels.contains(&0) {
            return Err(Error::Config("lcnn_channels must be non-empty and positive".into()));
        }
        if self.blstm_hidden == 0 || self.blstm_layers == 0 {
            return Err(Error::Config("BiLSTM sizes must be positive".into()));
        }
        if self.n_classes != 2 {
            return Err(Error::Config("the detector is a two-class model".into()));
        }
        let shrink = 1usize << self.lcnn_channels.len();
        if input_dim < shrink {
            return Err(Error::Config(format!(
                "input_dim {input_dim} vanishes after {} pooling stages",
                self.lcnn_channels.len()
            )));
        }
        Ok(())
    }

    /// Rows left after the pooling stages (floor halving each time).
    pub fn pooled_len(&self, rows: usize) -> usize {
        self.lcnn_channels.iter().fold(rows, |r, _| r / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Backend {
    pub convs: Vec<Conv2d>,
    pub blstms: Vec<BiLstm>,
    pub fc: Linear,
    pub input_dim: usize,
    pub config: DetectorConfig,
}

impl Backend {
    pub fn new(ps: &mut ParamStore, init: &mut Init, config: DetectorConfig, input_dim: usize) -> Result<Self> {
        config.validate(input_dim)?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.lcnn_channels.iter().enumerate() {
            convs.push(Conv2d::new(ps, init, &format!("det.lcnn{i}"), c_in, 2 * c, 3, 1, 1));
            c_in = c;
        }
        let freq = config.lcnn_channels.iter().fold(input_dim, |d, _| d / 2);
        let mut blstms = Vec::new();
        let mut width = c_in * freq;
        for i in 0..config.blstm_layers {
            blstms.push(BiLstm::new(ps, init, &format!("det.blstm{i}"), width, config.blstm_hidden));
            width = 2 * config.blstm_hidden;
        }
        let fc = Linear::new(ps, init, "det.fc", width, config.n_classes, true);
        Ok(Backend {
            convs,
            blstms,
            fc,
            input_dim,
            config,
        })
    }

    /// `[L × D]` fused frames to `[1 × 2]` logits (bonafide, spoof).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (l, d) = (g.shape(x)[0], g.shape(x)[1]);
        if d != self.input_dim {
            return Err(Error::Shape(format!("detector expects D = {}, got {d}", self.input_dim)));
        }
        if self.config.pooled_len(l) == 0 {
            return Err(Error::TooShort(format!("{l} frames vanish after pooling")));
        }
        let mut h = g.reshape(x, &[1, l, d]);
        for conv in &self.convs {
            h = conv.forward(g, ps, h);
            h = g.mfm(h);
            h = g.max_pool2(h);
        }
        let s = g.shape(h).to_vec();
        let (c, t, f) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(c * t * f);
        for ti in 0..t {
            for ci in 0..c {
                for fi in 0..f {
                    idx.push(Some(ci * t * f + ti * f + fi));
                }
            }
        }
        let mut seq = g.gather(h, idx, &[t, c * f]);
        for b in &self.blstms {
            seq = b.run(g, ps, seq);
        }
        let pooled = g.mean_rows(seq);
        Ok(self.fc.forward(g, ps, pooled))
    }
}

/// Bonafide log-odds: `logit_bonafide − logit_spoof`.
pub fn score_from_logits(logits: &[f64]) -> f64 {
    logits[Label::Bonafide.index()] - logits[Label::Spoof.index()]
}

/// Mean softmax cross-entropy over a batch of `[B × 2]` logits.
pub fn detector_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || labels.len() != logits.rows() {
        return Err(Error::InsufficientData("detector loss needs one label per row".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Range(format!("label {y} outside 0..{}", logits.cols())));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub detector: DetectorConfig,
    pub w2v_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion: FusionConfig::default(),
            detector: DetectorConfig::default(),
            w2v_dim: W2V_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.fusion.has(View::W2v) && self.fusion.d_model != PROJ_DIM {
            return Err(Error::Config(format!(
                "the w2v view is projected to {PROJ_DIM} dims, so fusion.d_model must be {PROJ_DIM}"
            )));
        }
        self.detector.validate(self.fusion.output_dim())
    }
}

/// Length-fixed per-utterance views on the common 10 ms grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UtteranceViews {
    /// Raw SSL frames `[L × w2v_dim]`, projected inside the model.
    pub w2v: Option<Tensor>,
    pub lfcc: Option<Tensor>,
    pub duration: Option<Vec<usize>>,
    pub pron: Option<Tensor>,
}

impl UtteranceViews {
    pub fn frames(&self) -> Option<usize> {
        self.w2v
            .as_ref()
            .map(Tensor::rows)
            .or(self.lfcc.as_ref().map(Tensor::rows))
            .or(self.duration.as_ref().map(Vec::len))
            .or(self.pron.as_ref().map(Tensor::rows))
    }
}

/// Everything trained jointly by the detector optimizer.
#[derive(Clone, Debug)]
pub struct SpoofModel {
    pub config: ModelConfig,
    pub ps: ParamStore,
    pub projection: Option<Projection128>,
    pub fusion: Fusion,
    pub backend: Backend,
}

impl SpoofModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut init = Init::new(seeded(seed, stream::DETECTOR_INIT));
        let projection = config
            .fusion
            .has(View::W2v)
            .then(|| Projection128::new(&mut ps, &mut init, "w2v_proj", config.w2v_dim));
        let fusion = Fusion::new(&mut ps, &mut init, config.fusion.clone())?;
        let backend = Backend::new(&mut ps, &mut init, config.detector.clone(), config.fusion.output_dim())?;
        Ok(SpoofModel {
            config,
            ps,
            projection,
            fusion,
            backend,
        })
    }

    /// Builds the forward graph and returns the `[1 × 2]` logits.
    pub fn logits_graph(&self, g: &mut Graph, views: &UtteranceViews) -> Result<Var> {
        let need = |v: View, present: bool| {
            if self.config.fusion.has(v) && !present {
                Err(Error::Config(format!("utterance is missing the {v} view")))
            } else {
                Ok(())
            }
        };
        need(View::W2v, views.w2v.is_some())?;
        need(View::Lfcc, views.lfcc.is_some())?;
        need(View::Duration, views.duration.is_some())?;
        need(View::Pron, views.pron.is_some())?;
        let w2v = match (&self.projection, &views.w2v) {
            (Some(p), Some(x)) => {
                if x.cols() != self.config.w2v_dim {
                    return Err(Error::Shape(format!(
                        "w2v frames are {}-d, model expects {}",
                        x.cols(),
                        self.config.w2v_dim
                    )));
                }
                let x = g.input(x.clone());
                Some(p.forward(g, &self.ps, x))
            }
            _ => None,
        };
        let has = |v: View| self.config.fusion.has(v);
        let lfcc = match &views.lfcc {
            Some(x) if has(View::Lfcc) => Some(g.input(x.clone())),
            _ => None,
        };
        let pron = match &views.pron {
            Some(x) if has(View::Pron) => Some(g.input(x.clone())),
            _ => None,
        };
        let vv = ViewVars {
            w2v,
            lfcc,
            duration: views.duration.as_deref().filter(|_| has(View::Duration)),
            pron,
        };
        let lens: Vec<usize> = [vv.w2v, vv.lfcc, vv.pron]
            .iter()
            .flatten()
            .map(|&v| g.shape(v)[0])
            .chain(vv.duration.map(<[usize]>::len))
            .collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Shape(format!("views disagree on frame count: {lens:?}")));
        }
        let fused = self.fusion.forward(g, &self.ps, &vv)?;
        self.backend.forward(g, &self.ps, fused)
    }

    pub fn logits(&self, views: &UtteranceViews) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let out = self.logits_graph(&mut g, views)?;
        let v = g.value(out).data();
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("detector logits".into()));
        }
        Ok([v[0], v[1]])
    }

    pub fn score(&self, views: &UtteranceViews) -> Result<f64> {
        Ok(score_from_logits(&self.logits(views)?))
    }

    pub fn checkpoint<E: Serialize>(&self, echo: &E) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, echo, &self.ps)
    }

    pub fn save<E: Serialize>(&self, path: &Path, echo: &E) -> Result<()> {
        self.checkpoint(echo)?.save(path)
    }

    /// Rebuilds the model from `config` and restores the stored tensors.
    pub fn from_checkpoint(ck: &Checkpoint, config: ModelConfig) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = SpoofModel::new(config, 0)?;
        ck.restore(&mut model.ps)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::nn::gradcheck::{check_parameter_gradients, worst};
    use crate::nn::layers::Lstm;
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed, 0);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            lcnn_channels: vec![4],
            blstm_hidden: 3,
            blstm_layers: 1,
            n_classes: 2,
        }
    }

    #[test]
    fn pooled_length_of_500_frames_is_62() {
        assert_eq!(DetectorConfig::default().pooled_len(500), 62);
    }

    #[test]
    fn backend_is_deterministic_and_checks_shapes() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seeded(1, 1));
        let cfg = DetectorConfig {
            lcnn_channels: vec![4, 6, 8],
            blstm_hidden: 5,
            ..DetectorConfig::default()
        };
        let b = Backend::new(&mut ps, &mut init, cfg, 273).unwrap();
        let x = random_matrix(500, 273, 3);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let out = b.forward(&mut g, &ps, v).unwrap();
            g.value(out).clone()
        };
        let a = run(&x);
        assert_eq!(a.shape(), &[1, 2]);
        assert_eq!(a, run(&x));
        assert!(a.all_finite());
        let mut g = Graph::new();
        let v = g.input(random_matrix(500, 272, 3));
        assert!(matches!(b.forward(&mut g, &ps, v), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_cases() {
        let ln2 = 2f64.ln();
        assert!((detector_loss(&Tensor::zeros(&[1, 2]), &[1]).unwrap() - ln2).abs() < 1e-15);
        let sat = Tensor::from_rows(&[vec![20.0, 0.0]]);
        assert!(detector_loss(&sat, &[0]).unwrap() < 1e-8);
        let logits = random_matrix(4, 2, 9).map(|x| 3.0 * x);
        let labels = [0, 1, 1, 0];
        let oracle: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let (a, b) = (logits.get(i, 0), logits.get(i, 1));
                -(logits.get(i, y).exp() / (a.exp() + b.exp())).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((detector_loss(&logits, &labels).unwrap() - oracle).abs() < 1e-9);
        assert!(detector_loss(&logits, &[0, 1, 2, 0]).is_err());
        assert!(detector_loss(&Tensor::zeros(&[0, 2]), &[]).is_err());
    }

    #[test]
    fn score_is_bonafide_minus_spoof_logit() {
        assert_eq!(score_from_logits(&[2.5, -1.0]), 3.5);
    }

    #[test]
    fn tiny_detector_gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seeded(2, 1));
        let b = Backend::new(&mut ps, &mut init, tiny(), 6).unwrap();
        let x = random_matrix(8, 6, 4);
        let reports = check_parameter_gradients(&mut ps, 1e-5, |ps| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let logits = b.forward(&mut g, ps, v).unwrap();
            let loss = g.cross_entropy(logits, &[1]);
            (g, loss)
        });
        assert_eq!(reports.len(), ps.len());
        let w = worst(&reports).unwrap();
        assert!(w.relative_error < 1e-3, "{}: {}", w.name, w.relative_error);
    }

    #[test]
    fn pooled_bilstm_output_is_reversal_symmetric_under_direction_swap() {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seeded(3, 1));
        let a = Lstm::new(&mut ps, &mut init, "a", 4, 3);
        let b = Lstm::new(&mut ps, &mut init, "b", 4, 3);
        let fwd_bwd = BiLstm {
            forward: a.clone(),
            backward: b.clone(),
        };
        let swapped = BiLstm { forward: b, backward: a };
        let x = random_matrix(7, 4, 5);
        let rev: Vec<usize> = (0..7).rev().collect();
        let pooled = |bl: &BiLstm, x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let o = bl.run(&mut g, &ps, v);
            let m = g.mean_rows(o);
            g.value(m).clone()
        };
        let p = pooled(&fwd_bwd, &x);
        let q = pooled(&swapped, &x.gather_rows(&rev));
        for j in 0..3 {
            assert!((p.get(0, j) - q.get(0, 3 + j)).abs() < 1e-12);
            assert!((p.get(0, 3 + j) - q.get(0, j)).abs() < 1e-12);
        }
    }

    fn small_model(mode: FusionMode, views: Vec<View>) -> SpoofModel {
        let config = ModelConfig {
            fusion: FusionConfig {
                mode,
                views,
                n_blocks: 1,
                d_model: 128,
                ..FusionConfig::default()
            },
            detector: DetectorConfig {
                lcnn_channels: vec![2, 2, 2],
                blstm_hidden: 4,
                ..DetectorConfig::default()
            },
            w2v_dim: 16,
        };
        SpoofModel::new(config, 5).unwrap()
    }

    fn views(l: usize) -> UtteranceViews {
        UtteranceViews {
            w2v: Some(random_matrix(l, 16, 1)),
            lfcc: Some(random_matrix(l, 60, 2)),
            duration: Some((0..l).map(|i| i % 100 + 1).collect()),
            pron: Some(random_matrix(l, 144, 3)),
        }
    }

    #[test]
    fn full_model_scores_are_finite_and_repeatable() {
        let m = small_model(FusionMode::Attention, vec![View::W2v, View::Duration, View::Pron]);
        let v = views(40);
        let s = m.score(&v).unwrap();
        assert!(s.is_finite());
        assert_eq!(s, m.score(&v).unwrap());
        let mut missing = v.clone();
        missing.pron = None;
        assert!(matches!(m.score(&missing), Err(Error::Config(_))));
        let mut ragged = v;
        ragged.pron = Some(random_matrix(39, 144, 3));
        assert!(matches!(m.score(&ragged), Err(Error::Shape(_))));
    }

    #[test]
    fn duration_table_receives_gradient_for_present_ids() {
        let m = small_model(FusionMode::Attention, vec![View::W2v, View::Duration]);
        let v = views(16);
        let mut g = Graph::new();
        let logits = m.logits_graph(&mut g, &v).unwrap();
        let loss = g.cross_entropy(logits, &[0]);
        let grads = g.backward(loss);
        let mut ps = m.ps.clone();
        ps.zero_grad();
        g.accumulate(&grads, &mut ps, 1.0);
        let table = m.fusion.duration_embed.as_ref().unwrap().table;
        let grad = ps.grad(table);
        let present = 5;
        let absent = 60;
        assert!(grad.row(present).iter().any(|&x| x != 0.0));
        assert!(grad.row(absent).iter().all(|&x| x == 0.0));
        // finite-difference spot check on one entry of a present row
        let eps = 1e-5;
        let loss_at = |delta: f64| {
            let mut m2 = m.clone();
            let t = m2.ps.value_mut(table);
            let cur = t.get(present, 0);
            t.set(present, 0, cur + delta);
            let l = m2.logits(&v).unwrap();
            detector_loss(&Tensor::matrix(1, 2, l.to_vec()), &[0]).unwrap()
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        assert!((numeric - grad.get(present, 0)).abs() < 1e-6 * (1.0 + numeric.abs()));
    }

    #[test]
    fn checkpoint_round_trip_restores_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let m = small_model(FusionMode::Concat, vec![View::W2v, View::Duration, View::Pron]);
        m.save(&path, &m.config).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let back = SpoofModel::from_checkpoint(&ck, ck.config().unwrap()).unwrap();
        let v = views(24);
        assert_eq!(back.score(&v).unwrap(), m.score(&v).unwrap());
    }
}
