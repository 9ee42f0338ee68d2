//! Audio I/O, trial manifests and the seeded synthetic corpus.
//!
//! Synthetic utterances are chains of "pseudo-phoneme" segments. Every
//! template is a fixed pair of sinusoids; bonafide utterances draw segment
//! durations with wide jitter while spoofed ones are nearly isochronous.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

pub const SAMPLE_RATE: u32 = 16_000;

/// Segment base duration in seconds.
const BASE_SEGMENT_S: f64 = 0.120;
/// Cross-fade length in seconds.
const FADE_S: f64 = 0.005;
const MIN_SEGMENTS: usize = 5;
const MAX_SEGMENTS: usize = 12;
const FORMANT_LO_HZ: f64 = 200.0;
const FORMANT_HI_HZ: f64 = 4000.0;
const FORMANT_GAINS: [f64; 2] = [0.45, 0.3];

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let clip = AudioClip {
            samples,
            sample_rate,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Format(format!(
                "sample rate {} Hz, expected {SAMPLE_RATE}",
                self.sample_rate
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::TooShort("audio clip has no samples".into()));
        }
        if let Some(bad) = self.samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::Range(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: {}-bit {:?}, expected PCM16",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} (no resampling)",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    AudioClip::new(samples, spec.sample_rate).map_err(|e| wav_err(e.to_string()))
}

pub fn quantize_sample(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other),
    })?;
    for &s in &clip.samples {
        w.write_sample(quantize_sample(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the detector: bonafide 0, spoof 1.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label {other:?} (expected bonafide|spoof)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub path: PathBuf,
    pub label: Label,
    pub dataset: String,
}

impl TrialRecord {
    /// Transcript sidecar: same basename with a `.phn` extension.
    pub fn transcript_path(&self) -> PathBuf {
        self.path.with_extension("phn")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialManifest {
    pub name: String,
    pub records: Vec<TrialRecord>,
}

impl TrialManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Evaluation and training need both classes present.
    pub fn require_two_classes(&self) -> Result<()> {
        if self.count(Label::Bonafide) == 0 || self.count(Label::Spoof) == 0 {
            return Err(Error::InsufficientData(format!(
                "manifest {:?} needs at least one bonafide and one spoof record",
                self.name
            )));
        }
        Ok(())
    }

    pub fn filter(&self, label: Label) -> TrialManifest {
        TrialManifest {
            name: format!("{}-{}", self.name, label),
            records: self
                .records
                .iter()
                .filter(|r| r.label == label)
                .cloned()
                .collect(),
        }
    }

    /// Seeded split keeping `fraction` of each label in the second part.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> (TrialManifest, TrialManifest) {
        let mut rng = seeded(seed, stream::SPLIT);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for label in [Label::Bonafide, Label::Spoof] {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].label == label)
                .collect();
            idx.shuffle(&mut rng);
            let n_held = ((idx.len() as f64) * fraction).round() as usize;
            let n_held = n_held.min(idx.len().saturating_sub(1));
            held.extend_from_slice(&idx[..n_held]);
            keep.extend_from_slice(&idx[n_held..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        let pick = |ids: &[usize], suffix: &str| TrialManifest {
            name: format!("{}-{suffix}", self.name),
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
        };
        (pick(&keep, "train"), pick(&held, "heldout"))
    }

    /// Writes `path<TAB>label<TAB>dataset` lines; paths under the manifest's
    /// directory are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for r in &self.records {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            out.push_str(&format!("{}\t{}\t{}\n", p.display(), r.label, r.dataset));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<TrialManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label = fields[1].parse::<Label>().map_err(|m| parse_err(line_no, m))?;
        if fields[2].is_empty() {
            return Err(parse_err(line_no, "empty dataset tag".into()));
        }
        let p = Path::new(fields[0]);
        let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        records.push(TrialRecord {
            path: p,
            label,
            dataset: fields[2].to_string(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TrialManifest { name, records })
}

/// Reads a `.phn` transcript of space-separated 1-based template IDs.
pub fn read_transcript(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("bad transcript token {tok:?}: {e}"),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub n_pseudo_phonemes: usize,
    pub real_duration_jitter: f64,
    pub fake_duration_jitter: f64,
    pub seed: u64,
    /// Dataset tag written into the manifest.
    pub dataset: String,
}

fn default_dataset() -> String {
    "SYN".to_string()
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            n_real: 50,
            n_fake: 50,
            n_pseudo_phonemes: 20,
            real_duration_jitter: 0.5,
            fake_duration_jitter: 0.05,
            seed: 7,
            dataset: default_dataset(),
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_real == 0 || self.n_fake == 0 || self.n_pseudo_phonemes < 2 {
            return Err(Error::Config(
                "n_real and n_fake must be positive and n_pseudo_phonemes at least 2".into(),
            ));
        }
        for j in [self.real_duration_jitter, self.fake_duration_jitter] {
            if !(0.0..=1.0).contains(&j) {
                return Err(Error::Config(format!("duration jitter {j} outside [0, 1]")));
            }
        }
        if self.real_duration_jitter <= self.fake_duration_jitter {
            return Err(Error::Config(format!(
                "real_duration_jitter ({}) must exceed fake_duration_jitter ({})",
                self.real_duration_jitter, self.fake_duration_jitter
            )));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset tag must be non-empty".into()));
        }
        Ok(())
    }
}

/// A pseudo-phoneme: two fixed "formant" sinusoids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Template {
    pub freqs_hz: [f64; 2],
}

/// Everything needed to render one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePlan {
    pub file_stem: String,
    pub label: Label,
    /// 1-based template IDs, one per segment; adjacent IDs always differ.
    pub template_ids: Vec<usize>,
    pub segment_samples: Vec<usize>,
}

pub fn make_templates(config: &SynthCorpusConfig) -> Vec<Template> {
    let mut rng = seeded(config.seed, stream::CORPUS_TEMPLATES);
    (0..config.n_pseudo_phonemes)
        .map(|_| {
            let a = rng.gen_range(FORMANT_LO_HZ..FORMANT_HI_HZ);
            let b = rng.gen_range(FORMANT_LO_HZ..FORMANT_HI_HZ);
            Template {
                freqs_hz: [a.min(b), a.max(b)],
            }
        })
        .collect()
}

/// Draws the segment structure of every utterance: bonafide first, then spoof.
pub fn plan_utterances(config: &SynthCorpusConfig) -> Vec<UtterancePlan> {
    let mut rng = seeded(config.seed, stream::CORPUS_UTTERANCES);
    let base = BASE_SEGMENT_S * f64::from(SAMPLE_RATE);
    let mut plans = Vec::with_capacity(config.n_real + config.n_fake);
    let groups = [
        (Label::Bonafide, config.n_real, config.real_duration_jitter, "real"),
        (Label::Spoof, config.n_fake, config.fake_duration_jitter, "fake"),
    ];
    for (label, n, jitter, prefix) in groups {
        for i in 0..n {
            let n_seg = rng.gen_range(MIN_SEGMENTS..=MAX_SEGMENTS);
            let mut ids = Vec::with_capacity(n_seg);
            let mut lens = Vec::with_capacity(n_seg);
            for _ in 0..n_seg {
                let id = loop {
                    let id = rng.gen_range(1..=config.n_pseudo_phonemes);
                    if ids.last() != Some(&id) {
                        break id;
                    }
                };
                let u = if jitter > 0.0 {
                    rng.gen_range(-jitter..=jitter)
                } else {
                    0.0
                };
                ids.push(id);
                lens.push((base * (1.0 + u)).round() as usize);
            }
            plans.push(UtterancePlan {
                file_stem: format!("{prefix}_{i:04}"),
                label,
                template_ids: ids,
                segment_samples: lens,
            });
        }
    }
    plans
}

/// Renders a plan with raised-cosine cross-fades between segments.
pub fn render_utterance(plan: &UtterancePlan, templates: &[Template]) -> AudioClip {
    let sr = f64::from(SAMPLE_RATE);
    let fade = (FADE_S * sr).round() as usize;
    let total: usize = plan.segment_samples.iter().sum();
    let mut out = vec![0.0; total];
    let mut start = 0;
    let last = plan.segment_samples.len() - 1;
    for (k, (&id, &len)) in plan
        .template_ids
        .iter()
        .zip(&plan.segment_samples)
        .enumerate()
    {
        let t = &templates[id - 1];
        let span = if k < last { len + fade } else { len };
        for n in 0..span {
            let pos = start + n;
            if pos >= total {
                break;
            }
            let time = n as f64 / sr;
            let mut v = 0.0;
            for (f, a) in t.freqs_hz.iter().zip(FORMANT_GAINS) {
                v += a * (2.0 * PI * f * time).sin();
            }
            let mut w = 1.0;
            if k > 0 && n < fade {
                w *= 0.5 * (1.0 - (PI * n as f64 / fade as f64).cos());
            }
            if k < last && n >= len {
                w *= 0.5 * (1.0 + (PI * (n - len) as f64 / fade as f64).cos());
            }
            out[pos] += w * v;
        }
        start += len;
    }
    AudioClip {
        samples: out,
        sample_rate: SAMPLE_RATE,
    }
}

/// Writes `n_real + n_fake` WAVs with `.phn` sidecars plus `manifest.tsv`
/// into `out_dir`. Byte-identical for identical configs.
pub fn generate_synth_corpus(config: &SynthCorpusConfig, out_dir: &Path) -> Result<TrialManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let templates = make_templates(config);
    let plans = plan_utterances(config);
    let mut records = Vec::with_capacity(plans.len());
    for plan in &plans {
        let clip = render_utterance(plan, &templates);
        let wav = out_dir.join(format!("{}.wav", plan.file_stem));
        write_wav(&wav, &clip)?;
        let phn = wav.with_extension("phn");
        let ids: Vec<String> = plan.template_ids.iter().map(usize::to_string).collect();
        fs::write(&phn, format!("{}\n", ids.join(" "))).map_err(|e| Error::io(&phn, e))?;
        records.push(TrialRecord {
            path: wav,
            label: plan.label,
            dataset: config.dataset.clone(),
        });
    }
    let manifest = TrialManifest {
        name: "manifest".to_string(),
        records,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
