//! Run configuration and the end-to-end plumbing shared by the CLI and the
//! acceptance tests: frozen feature extraction, detector training, and
//! cross-dataset scoring.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{read_wav, AudioClip, Label, SynthCorpusConfig, TrialManifest};
use crate::detector::{DetectorConfig, ModelConfig, SpoofModel, UtteranceViews};
use crate::dsp::{
    lfcc, log_mel_spectrogram, read_feature_cache, write_feature_cache, FeatureKind, FrameFeatureSequence,
    SHIFT_MS,
};
use crate::duration::{fit_quantizer, quantize, DurationVector, Quantizer, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, ReportRow, TrialScore, write_scores};
use crate::frame_encoders::{ToyEncoder, HUBERT_DIM, W2V_DIM};
use crate::fusion::{FusionConfig, View};
use crate::nn::Tensor;
use crate::pron::{extract_pron_from_logmel, PronTrainConfig, Recognizer, RecognizerConfig};
use crate::trainer::{
    fix_length_ids, fix_length_rows, train_detector, CheckpointSink, Dataset, TrainConfig, TrainOutcome,
};

/// Environment variable naming the feature-cache directory.
pub const CACHE_ENV: &str = "MVSPOOF_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Seed of the frozen toy encoders. Kept apart from the run seed so the
    /// stand-ins for pretrained models stay fixed across experiment seeds.
    pub encoder_seed: u64,
    pub w2v_dim: usize,
    pub hubert_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            encoder_seed: 0,
            w2v_dim: W2V_DIM,
            hubert_dim: HUBERT_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub k: usize,
    /// Upper bound on pooled frames used for fitting (evenly strided); 0 keeps all.
    pub max_frames: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            k: DEFAULT_VOCAB,
            max_frames: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PronSection {
    pub recognizer: RecognizerConfig,
    pub train: PronTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every component derives its own stream from it.
    pub seed: u64,
    pub corpus: SynthCorpusConfig,
    pub features: FeatureConfig,
    pub quantizer: QuantizerConfig,
    pub pron: PronSection,
    pub fusion: FusionConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every resolved value, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.pron.recognizer.validate()?;
        self.train.validate()?;
        if self.quantizer.k == 0 || self.features.hubert_dim == 0 || self.features.w2v_dim == 0 {
            return Err(Error::Config("quantizer.k and feature dims must be positive".into()));
        }
        if self.fusion.duration_vocab != self.quantizer.k {
            return Err(Error::Config(format!(
                "fusion.duration_vocab ({}) must equal quantizer.k ({})",
                self.fusion.duration_vocab, self.quantizer.k
            )));
        }
        if self.fusion.pron_dim != self.pron.recognizer.d_model {
            return Err(Error::Config(format!(
                "fusion.pron_dim ({}) must equal pron.recognizer.d_model ({})",
                self.fusion.pron_dim, self.pron.recognizer.d_model
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fusion: self.fusion.clone(),
            detector: self.detector.clone(),
            w2v_dim: self.features.w2v_dim,
        }
    }
}

/// `w2v+duration+pron` style label of a view list.
pub fn views_label(views: &[View]) -> String {
    views.iter().map(View::to_string).collect::<Vec<_>>().join("+")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Runs `f` on a pool capped at `jobs` threads; 0 uses the global pool.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn hubert(config: &RunConfig) -> ToyEncoder {
    ToyEncoder::hubert(config.features.encoder_seed, config.features.hubert_dim)
}

/// Pools toy-HuBERT frames of the manifest's bonafide records and fits the
/// duration quantizer on them.
pub fn fit_duration_quantizer(manifest: &TrialManifest, config: &RunConfig) -> Result<Quantizer> {
    let bona = manifest.filter(Label::Bonafide);
    if bona.is_empty() {
        return Err(Error::InsufficientData(
            "quantizer fitting needs bonafide records".into(),
        ));
    }
    let enc = hubert(config);
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for r in &bona.records {
        let h = enc.encode_logmel(&log_mel_spectrogram(&read_wav(&r.path)?)?)?;
        rows.extend_from_slice(h.values.data());
        n += h.frames();
    }
    let d = config.features.hubert_dim;
    let mut points = Tensor::matrix(n, d, rows);
    let cap = config.quantizer.max_frames;
    if cap > 0 && n > cap {
        let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
        points = points.gather_rows(&idx);
    }
    log::info!("fitting K = {} on {} frames", config.quantizer.k, points.rows());
    fit_quantizer(&points, config.quantizer.k, config.seed)
}

/// Frozen components the feature extractor may need.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub quantizer: Option<Quantizer>,
    pub recognizer: Option<Recognizer>,
}

impl Artifacts {
    pub fn load(quantizer: Option<&Path>, pron: Option<&Path>) -> Result<Self> {
        Ok(Artifacts {
            quantizer: quantizer.map(Quantizer::load).transpose()?,
            recognizer: pron.map(Recognizer::load).transpose()?,
        })
    }
}

fn round_f32(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Turns audio into length-fixed [`UtteranceViews`] using only frozen
/// components. Real-valued views are rounded to `f32` precision so cached
/// and freshly computed features are identical.
pub struct FeatureExtractor {
    views: Vec<View>,
    fixed_frames: usize,
    w2v: Option<ToyEncoder>,
    hubert: ToyEncoder,
    quantizer: Option<Quantizer>,
    recognizer: Option<Recognizer>,
    fingerprint: String,
    cache_dir: Option<PathBuf>,
}

impl FeatureExtractor {
    pub fn new(config: &RunConfig, artifacts: Artifacts) -> Result<Self> {
        config.validate()?;
        let views = config.fusion.views.clone();
        let has = |v| views.contains(&v);
        let quantizer = if has(View::Duration) {
            let q = artifacts.quantizer.ok_or_else(|| {
                Error::Config("the duration view needs a fitted quantizer (run fit-quantizer)".into())
            })?;
            if q.dim() != config.features.hubert_dim || q.k() != config.quantizer.k {
                return Err(Error::Mismatch(format!(
                    "quantizer is K = {}, D = {}; config expects K = {}, D = {}",
                    q.k(),
                    q.dim(),
                    config.quantizer.k,
                    config.features.hubert_dim
                )));
            }
            Some(q)
        } else {
            None
        };
        let recognizer = if has(View::Pron) {
            let r = artifacts.recognizer.ok_or_else(|| {
                Error::Config("the pron view needs a trained recognizer (run train-pron)".into())
            })?;
            if r.config.d_model != config.fusion.pron_dim {
                return Err(Error::Mismatch(format!(
                    "recognizer width {} differs from fusion.pron_dim {}",
                    r.config.d_model, config.fusion.pron_dim
                )));
            }
            Some(r)
        } else {
            None
        };
        let w2v = has(View::W2v).then(|| {
            ToyEncoder::new(
                "toy_w2v",
                crate::frame_encoders::ToyEncoderParams::generate(
                    config.features.encoder_seed,
                    config.features.w2v_dim,
                    crate::rng::stream::TOY_W2V,
                ),
            )
        });

        let mut h = Sha256::new();
        h.update(format!("views={};frames={};", views_label(&views), config.train.fixed_frames));
        if w2v.is_some() {
            h.update(format!("w2v={}:{};", config.features.encoder_seed, config.features.w2v_dim));
        }
        if let Some(q) = &quantizer {
            h.update(format!("hubert={}:{};", config.features.encoder_seed, config.features.hubert_dim));
            h.update(q.to_bytes());
        }
        if let Some(r) = &recognizer {
            h.update(serde_json::to_vec(&r.config).expect("config serializes"));
            h.update(r.ps.checksum());
        }
        let cache_dir = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Ok(FeatureExtractor {
            views,
            fixed_frames: config.train.fixed_frames,
            w2v,
            hubert: hubert(config),
            quantizer,
            recognizer,
            fingerprint: hex(&h.finalize()),
            cache_dir,
        })
    }

    /// Identifies the frozen components and extraction settings.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn recognizer(&self) -> Option<&Recognizer> {
        self.recognizer.as_ref()
    }

    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    /// Unfixed duration IDs of a clip.
    pub fn duration_vector(&self, clip: &AudioClip) -> Result<DurationVector> {
        let q = self
            .quantizer
            .as_ref()
            .ok_or_else(|| Error::Config("no quantizer loaded".into()))?;
        quantize(&self.hubert.encode_logmel(&log_mel_spectrogram(clip)?)?, q)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<UtteranceViews> {
        let n = self.fixed_frames;
        let lm = log_mel_spectrogram(clip)?;
        let mut out = UtteranceViews::default();
        for &v in &self.views {
            match v {
                View::W2v => {
                    let x = self.w2v.as_ref().expect("w2v encoder").encode_logmel(&lm)?;
                    out.w2v = Some(round_f32(fix_length_rows(&x.values, n)?));
                }
                View::Lfcc => out.lfcc = Some(round_f32(fix_length_rows(&lfcc(clip)?.values, n)?)),
                View::Duration => {
                    let h = self.hubert.encode_logmel(&lm)?;
                    let dv = quantize(&h, self.quantizer.as_ref().expect("quantizer"))?;
                    out.duration = Some(fix_length_ids(&dv, n)?.ids);
                }
                View::Pron => {
                    let p = extract_pron_from_logmel(&lm, self.recognizer.as_ref().expect("recognizer"))?;
                    out.pron = Some(round_f32(fix_length_rows(&p.values, n)?));
                }
            }
        }
        Ok(out)
    }

    fn cache_key(&self, clip: &AudioClip) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update(clip.sample_rate.to_le_bytes());
        for s in &clip.samples {
            h.update(s.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    fn load_cached(&self, dir: &Path, key: &str) -> Option<UtteranceViews> {
        let mut out = UtteranceViews::default();
        for &v in &self.views {
            let seq = read_feature_cache(&dir.join(format!("{key}.{v}.feat"))).ok()?;
            match v {
                View::W2v => out.w2v = Some(seq.values),
                View::Lfcc => out.lfcc = Some(seq.values),
                View::Pron => out.pron = Some(seq.values),
                View::Duration => out.duration = Some(seq.values.data().iter().map(|&x| x as usize).collect()),
            }
        }
        Some(out)
    }

    fn store_cached(&self, dir: &Path, key: &str, views: &UtteranceViews) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for &v in &self.views {
            let (values, kind) = match v {
                View::W2v => (views.w2v.clone(), FeatureKind::Hidden(self.w2v_dim())),
                View::Lfcc => (views.lfcc.clone(), FeatureKind::Lfcc60),
                View::Pron => (views.pron.clone(), FeatureKind::Hidden(self.pron_dim())),
                View::Duration => (
                    views.duration.as_ref().map(|ids| {
                        Tensor::matrix(ids.len(), 1, ids.iter().map(|&i| i as f64).collect())
                    }),
                    FeatureKind::DurationIds,
                ),
            };
            let values = values.expect("extracted view present");
            let kind = if values.cols() == kind.dim() { kind } else { FeatureKind::Hidden(values.cols()) };
            let seq = FrameFeatureSequence::new(values, kind, SHIFT_MS)?;
            write_feature_cache(&dir.join(format!("{key}.{v}.feat")), &seq)?;
        }
        Ok(())
    }

    fn w2v_dim(&self) -> usize {
        self.w2v.as_ref().map_or(0, |e| e.params().output_dim)
    }

    fn pron_dim(&self) -> usize {
        self.recognizer.as_ref().map_or(0, |r| r.config.d_model)
    }

    /// Extracts with the on-disk cache when one is configured.
    pub fn extract_cached(&self, clip: &AudioClip) -> Result<UtteranceViews> {
        let Some(dir) = &self.cache_dir else {
            return self.extract(clip);
        };
        let key = self.cache_key(clip);
        if let Some(v) = self.load_cached(dir, &key) {
            return Ok(v);
        }
        let v = self.extract(clip)?;
        self.store_cached(dir, &key, &v)?;
        Ok(v)
    }

    pub fn extract_manifest(&self, manifest: &TrialManifest) -> Result<Dataset> {
        let views: Vec<UtteranceViews> = manifest
            .records
            .par_iter()
            .map(|r| self.extract_cached(&read_wav(&r.path)?))
            .collect::<Result<_>>()?;
        let mut data = Dataset::default();
        for (r, v) in manifest.records.iter().zip(views) {
            data.push(r.path.display().to_string(), v, r.label);
        }
        Ok(data)
    }

    pub fn score_manifest(&self, model: &SpoofModel, manifest: &TrialManifest) -> Result<Vec<TrialScore>> {
        manifest
            .records
            .par_iter()
            .map(|r| {
                let views = self.extract_cached(&read_wav(&r.path)?)?;
                Ok(TrialScore {
                    name: r.path.display().to_string(),
                    score: model.score(&views)?,
                    label: Some(r.label),
                })
            })
            .collect()
    }
}

/// Everything a detector checkpoint records about how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEcho {
    pub run: RunConfig,
    pub extractor_fingerprint: String,
    pub quantizer_path: Option<PathBuf>,
    pub pron_path: Option<PathBuf>,
}

/// Extracts the manifest with frozen components and trains the detector.
pub fn train_pipeline(
    config: &RunConfig,
    manifest: &TrialManifest,
    extractor: &FeatureExtractor,
    echo: Option<(&Path, &DetectorEcho)>,
) -> Result<TrainOutcome> {
    manifest.require_two_classes()?;
    let data = extractor.extract_manifest(manifest)?;
    log::info!("extracted {} utterances ({})", data.len(), views_label(&config.fusion.views));
    let sink = echo.map(|(dir, e)| CheckpointSink {
        dir: dir.to_path_buf(),
        echo: e,
    });
    train_detector(&data, &config.model_config(), &config.train, config.seed, sink.as_ref())
}

/// Dataset tag for a manifest: the common record tag, else the manifest name.
pub fn dataset_tag(manifest: &TrialManifest) -> String {
    match manifest.records.first() {
        Some(first) if manifest.records.iter().all(|r| r.dataset == first.dataset) => first.dataset.clone(),
        _ => manifest.name.clone(),
    }
}

/// Scores every manifest with the frozen model; one row per manifest.
/// With `out_dir`, per-dataset score files `scores_<tag>.tsv` are written.
pub fn cross_dataset_eval(
    model: &SpoofModel,
    extractor: &FeatureExtractor,
    manifests: &[TrialManifest],
    out_dir: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    let views = views_label(&model.config.fusion.views);
    let mode = model.config.fusion.mode.to_string();
    let mut rows = Vec::with_capacity(manifests.len());
    let mut used: Vec<String> = Vec::new();
    for m in manifests {
        m.require_two_classes()?;
        let scores = extractor.score_manifest(model, m)?;
        let mut tag = dataset_tag(m);
        if used.contains(&tag) {
            tag = format!("{tag}-{}", used.len() + 1);
        }
        used.push(tag.clone());
        if let Some(dir) = out_dir {
            write_scores(&dir.join(format!("scores_{tag}.tsv")), &scores)?;
        }
        rows.push(ReportRow::from_scores(&tag, &views, &mode, &scores)?);
    }
    Ok(rows)
}

/// Loads a detector checkpoint, rebuilds the frozen extractor from the
/// recorded (or overriding) artifact paths, and checks they match.
pub fn load_for_evaluation(
    checkpoint: &Path,
    quantizer: Option<&Path>,
    pron: Option<&Path>,
) -> Result<(SpoofModel, FeatureExtractor, DetectorEcho, String)> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ck = Checkpoint::load(checkpoint)?;
    let echo: DetectorEcho = ck.config()?;
    let model = SpoofModel::from_checkpoint(&ck, echo.run.model_config())?;
    let q = quantizer.map(Path::to_path_buf).or_else(|| echo.quantizer_path.clone());
    let p = pron.map(Path::to_path_buf).or_else(|| echo.pron_path.clone());
    let artifacts = Artifacts::load(
        q.as_deref().filter(|_| echo.run.fusion.has(View::Duration)),
        p.as_deref().filter(|_| echo.run.fusion.has(View::Pron)),
    )?;
    let extractor = FeatureExtractor::new(&echo.run, artifacts)?;
    if extractor.fingerprint() != echo.extractor_fingerprint {
        return Err(Error::Mismatch(
            "frozen feature extractors differ from the ones the checkpoint was trained with".into(),
        ));
    }
    let id = sha256_hex(&bytes)[..16].to_string();
    Ok((model, extractor, echo, id))
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifests: &[TrialManifest],
    quantizer: Option<&Path>,
    pron: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (model, extractor, echo, id) = load_for_evaluation(checkpoint, quantizer, pron)?;
    let rows = cross_dataset_eval(&model, &extractor, manifests, out_dir)?;
    Ok(EvalReport {
        rows,
        checkpoint_id: id,
        seeds: vec![echo.run.seed],
    })
}
