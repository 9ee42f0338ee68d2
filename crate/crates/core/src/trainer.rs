//! Length fixing, batching, and the detector optimization loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::detector::{ModelConfig, SpoofModel, UtteranceViews};
use crate::duration::DurationVector;
use crate::dsp::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::rng::{seeded, stream};

pub const DEFAULT_FIXED_FRAMES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub fixed_frames: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 200,
            fixed_frames: DEFAULT_FIXED_FRAMES,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.fixed_frames == 0 {
            return Err(Error::Config("batch_size, epochs and fixed_frames must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Range("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn tile_index(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i % len).collect()
}

/// Truncates to the first `n` rows, or tiles the rows end-to-end and cuts at `n`.
pub fn fix_length_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    if t.rows() == 0 {
        return Err(Error::InsufficientData("cannot fix the length of an empty sequence".into()));
    }
    Ok(t.gather_rows(&tile_index(t.rows(), n)))
}

pub fn fix_length(seq: &FrameFeatureSequence, n: usize) -> Result<FrameFeatureSequence> {
    FrameFeatureSequence::new(fix_length_rows(&seq.values, n)?, seq.kind, seq.frame_shift_ms)
}

pub fn fix_length_ids(dv: &DurationVector, n: usize) -> Result<DurationVector> {
    if dv.ids.is_empty() {
        return Err(Error::InsufficientData("cannot fix the length of an empty sequence".into()));
    }
    Ok(DurationVector {
        ids: tile_index(dv.ids.len(), n).into_iter().map(|i| dv.ids[i]).collect(),
    })
}

/// Index batches for one epoch; the order depends only on `(seed, epoch)`.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(seed, stream::DETECTOR_DATA + ((epoch as u64 + 1) << 16));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seeded split holding out `fraction` of each label (rounded up, at least
/// one per label when that label has two or more members).
pub fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(seed, stream::SPLIT);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for label in [Label::Bonafide, Label::Spoof] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let mut k = (idx.len() as f64 * fraction).ceil() as usize;
        if fraction > 0.0 && idx.len() >= 2 {
            k = k.max(1);
        }
        k = k.min(idx.len().saturating_sub(1));
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub views: Vec<UtteranceViews>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, name: String, views: UtteranceViews, label: Label) {
        self.names.push(name);
        self.views.push(views);
        self.labels.push(label);
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            views: idx.iter().map(|&i| self.views[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

pub struct TrainOutcome {
    pub final_model: SpoofModel,
    pub best_model: SpoofModel,
    pub trace: TrainTrace,
}

/// Where and how to persist checkpoints during training.
pub struct CheckpointSink<'a, E: Serialize> {
    pub dir: PathBuf,
    pub echo: &'a E,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Summed cross-entropy of one utterance plus the gradient accumulation
/// into `model.ps` scaled by `scale`.
fn accumulate_example(model: &mut SpoofModel, views: &UtteranceViews, label: Label, scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let logits = model.logits_graph(&mut g, views)?;
    let loss = g.cross_entropy(logits, &[label.index()]);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("detector loss diverged ({value})")));
    }
    let grads = g.backward(loss);
    g.accumulate(&grads, &mut model.ps, scale);
    Ok(value)
}

pub fn mean_loss(model: &SpoofModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (v, &y) in data.views.iter().zip(&data.labels) {
        let l = model.logits(v)?;
        total += crate::detector::detector_loss(&Tensor::matrix(1, 2, l.to_vec()), &[y.index()])?;
    }
    Ok(total / data.len() as f64)
}

/// One epoch of mini-batch Adam updates; returns the mean training loss.
pub fn run_epoch(model: &mut SpoofModel, adam: &mut Adam, data: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<f64> {
    let mut total = 0.0;
    for batch in make_batches(data.len(), batch_size, seed, epoch) {
        model.ps.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            total += accumulate_example(model, &data.views[i], data.labels[i], scale)?;
        }
        if !model.ps.grads_finite() {
            return Err(Error::NonFinite("detector gradients".into()));
        }
        adam.step(&mut model.ps);
    }
    Ok(total / data.len() as f64)
}

/// Trains detector, fusion, and projection jointly. `data` must already be
/// length-fixed. A seeded stratified validation split selects the best epoch.
pub fn train_detector<E: Serialize>(
    data: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    sink: Option<&CheckpointSink<E>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !data.labels.contains(&Label::Bonafide) || !data.labels.contains(&Label::Spoof) {
        return Err(Error::InsufficientData("training data needs both classes".into()));
    }
    let (train_idx, val_idx) = stratified_split(&data.labels, config.validation_fraction, seed);
    let train = data.subset(&train_idx);
    let val = data.subset(&val_idx);
    let mut model = SpoofModel::new(model_config.clone(), seed)?;
    let mut adam = Adam::new(config.adam.clone());
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, SpoofModel)> = None;
    for epoch in 0..config.epochs {
        let loss = run_epoch(&mut model, &mut adam, &train, config.batch_size, seed, epoch)?;
        trace.epoch_loss.push(loss);
        let v = if val.is_empty() { loss } else { mean_loss(&model, &val)? };
        trace.validation_loss.push(v);
        log::info!("epoch {}: train loss {loss:.5}, validation loss {v:.5}", epoch + 1);
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            trace.best_epoch = epoch + 1;
            if let Some(s) = sink {
                model.save(&s.dir.join(BEST_CHECKPOINT), s.echo)?;
            }
            best = Some((v, model.clone()));
        }
    }
    if let Some(s) = sink {
        model.save(&s.dir.join(FINAL_CHECKPOINT), s.echo)?;
        crate::checkpoint::write_atomic(
            &s.dir.join("trace.json"),
            serde_json::to_string_pretty(&trace).expect("trace serializes").as_bytes(),
        )?;
    }
    let best_model = best.map(|(_, m)| m).expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        trace,
    })
}

pub fn checkpoint_path(dir: &Path, best: bool) -> PathBuf {
    dir.join(if best { BEST_CHECKPOINT } else { FINAL_CHECKPOINT })
}
