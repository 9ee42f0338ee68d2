//! Spectral front-ends on the 20 ms / 10 ms frame grid: log-mel spectrogram,
//! LFCC with deltas, and the on-disk feature cache layout.

use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FRAME_MS: f64 = 20.0;
pub const SHIFT_MS: f64 = 10.0;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const N_LFCC_FILTERS: usize = 20;
pub const ENERGY_FLOOR: f64 = 1e-10;
pub const MAX_FREQ_HZ: f64 = 8000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LogMel80,
    Lfcc60,
    Ssl1024,
    SslProj128,
    Pron144,
    DurationIds,
    /// Encoder output of configurable width (the HuBERT stand-in).
    Hidden(usize),
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::LogMel80 => 80,
            FeatureKind::Lfcc60 => 60,
            FeatureKind::Ssl1024 => 1024,
            FeatureKind::SslProj128 => 128,
            FeatureKind::Pron144 => 144,
            FeatureKind::DurationIds => 1,
            FeatureKind::Hidden(d) => d,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            FeatureKind::LogMel80 => 0,
            FeatureKind::Lfcc60 => 1,
            FeatureKind::Ssl1024 => 2,
            FeatureKind::SslProj128 => 3,
            FeatureKind::Pron144 => 4,
            FeatureKind::DurationIds => 5,
            FeatureKind::Hidden(_) => 6,
        }
    }

    pub fn from_id(id: u8, dim: usize) -> Option<Self> {
        Some(match id {
            0 => FeatureKind::LogMel80,
            1 => FeatureKind::Lfcc60,
            2 => FeatureKind::Ssl1024,
            3 => FeatureKind::SslProj128,
            4 => FeatureKind::Pron144,
            5 => FeatureKind::DurationIds,
            6 => FeatureKind::Hidden(dim),
            _ => return None,
        })
    }
}

/// `[T × D]` per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    pub values: Tensor,
    pub kind: FeatureKind,
    pub frame_shift_ms: f64,
}

impl FrameFeatureSequence {
    pub fn new(values: Tensor, kind: FeatureKind, frame_shift_ms: f64) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence needs [T × D] with T ≥ 1, got {:?}",
                values.shape()
            )));
        }
        if values.cols() != kind.dim() {
            return Err(Error::Shape(format!(
                "{kind:?} expects D = {}, got {}",
                kind.dim(),
                values.cols()
            )));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite(format!("{kind:?} features")));
        }
        Ok(FrameFeatureSequence {
            values,
            kind,
            frame_shift_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

/// Number of whole frames; the tail remainder is dropped.
pub fn frame_count(n_samples: usize, frame_len: usize, shift: usize) -> Option<usize> {
    (n_samples >= frame_len).then(|| (n_samples - frame_len) / shift + 1)
}

pub fn frame_signal(clip: &AudioClip, frame_ms: f64, shift_ms: f64) -> Result<Vec<&[f64]>> {
    let len = ms_to_samples(frame_ms, clip.sample_rate);
    let shift = ms_to_samples(shift_ms, clip.sample_rate);
    if len == 0 || shift == 0 {
        return Err(Error::Config("frame length and shift must be positive".into()));
    }
    let count = frame_count(clip.len(), len, shift).ok_or_else(|| {
        Error::TooShort(format!(
            "{} samples is shorter than one {len}-sample frame",
            clip.len()
        ))
    })?;
    Ok((0..count)
        .map(|t| &clip.samples[t * shift..t * shift + len])
        .collect())
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: Vec<Vec<(usize, f64)>>,
    linear: Vec<Vec<(usize, f64)>>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters whose `n + 2` edge frequencies are given; each filter is
/// a sparse list of `(fft bin, weight)`.
fn triangular_bank(edges_hz: &[f64], sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let n_bins = N_FFT / 2 + 1;
    (1..edges_hz.len() - 1)
        .map(|m| {
            let (lo, mid, hi) = (edges_hz[m - 1], edges_hz[m], edges_hz[m + 1]);
            (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * sample_rate / N_FFT as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    let w = up.min(down);
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Center frequencies of the 80 mel filters.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_edges()[1..=N_MELS].to_vec()
}

fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(MAX_FREQ_HZ);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

fn linear_edges() -> Vec<f64> {
    (0..N_LFCC_FILTERS + 2)
        .map(|i| MAX_FREQ_HZ * i as f64 / (N_LFCC_FILTERS + 1) as f64)
        .collect()
}

fn analyzer() -> &'static Analyzer {
    static ANALYZER: OnceLock<Analyzer> = OnceLock::new();
    ANALYZER.get_or_init(|| {
        let frame_len = ms_to_samples(FRAME_MS, crate::corpus::SAMPLE_RATE);
        let sr = f64::from(crate::corpus::SAMPLE_RATE);
        Analyzer {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window: (0..frame_len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos())
                .collect(),
            mel: triangular_bank(&mel_edges(), sr),
            linear: triangular_bank(&linear_edges(), sr),
        }
    })
}

/// Power spectra `|X_k|²` (257 bins) of Hann-windowed, zero-padded frames.
fn power_spectra(clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
    clip.validate()?;
    let frames = frame_signal(clip, FRAME_MS, SHIFT_MS)?;
    let a = analyzer();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    Ok(frames
        .iter()
        .map(|frame| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for ((b, &s), &w) in buf.iter_mut().zip(frame.iter()).zip(&a.window) {
                b.re = s * w;
            }
            a.fft.process(&mut buf);
            buf[..=N_FFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect())
}

fn log_filter_energies(spectra: &[Vec<f64>], bank: &[Vec<(usize, f64)>]) -> Tensor {
    let mut out = Tensor::zeros(&[spectra.len(), bank.len()]);
    for (t, spec) in spectra.iter().enumerate() {
        let row = out.row_mut(t);
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().map(|&(k, w)| w * spec[k]).sum();
            row[m] = (e + ENERGY_FLOOR).ln();
        }
    }
    out
}

pub fn log_mel_spectrogram(clip: &AudioClip) -> Result<FrameFeatureSequence> {
    let spectra = power_spectra(clip)?;
    let values = log_filter_energies(&spectra, &analyzer().mel);
    FrameFeatureSequence::new(values, FeatureKind::LogMel80, SHIFT_MS)
}

/// Orthonormal DCT-II of each row.
fn dct2_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = Tensor::zeros(&[x.rows(), n]);
    let basis: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect();
    for t in 0..x.rows() {
        let src = x.row(t).to_vec();
        for (k, b) in basis.iter().enumerate() {
            out.set(t, k, b.iter().zip(&src).map(|(a, v)| a * v).sum());
        }
    }
    out
}

pub fn lfcc(clip: &AudioClip) -> Result<FrameFeatureSequence> {
    let spectra = power_spectra(clip)?;
    let energies = log_filter_energies(&spectra, &analyzer().linear);
    let statics = dct2_rows(&energies);
    let with_deltas = add_deltas_matrix(&statics);
    FrameFeatureSequence::new(with_deltas, FeatureKind::Lfcc60, SHIFT_MS)
}

/// `(x[t+1] − x[t−1]) / 2` with edge replication.
fn delta(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[t, d]);
    for i in 0..t {
        let next = x.row((i + 1).min(t - 1));
        let prev = x.row(i.saturating_sub(1));
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(next.iter().zip(prev)) {
            *o = (a - b) / 2.0;
        }
    }
    out
}

fn add_deltas_matrix(x: &Tensor) -> Tensor {
    let d1 = delta(x);
    let d2 = delta(&d1);
    Tensor::concat_cols(&[x, &d1, &d2])
}

/// Appends delta and delta-delta blocks: `[T × D] → [T × 3D]`.
///
/// The result keeps the input's kind only when the widths line up (20-d
/// statics become `Lfcc60`); other inputs come back as `Hidden(3D)`.
pub fn add_deltas(seq: &FrameFeatureSequence) -> Result<FrameFeatureSequence> {
    let values = add_deltas_matrix(&seq.values);
    let kind = if values.cols() == FeatureKind::Lfcc60.dim() {
        FeatureKind::Lfcc60
    } else {
        FeatureKind::Hidden(values.cols())
    };
    FrameFeatureSequence::new(values, kind, seq.frame_shift_ms)
}

/// Feature cache layout: `kind: u8, T: u32, D: u32` little-endian, then
/// `T × D` row-major `f32` values.
pub fn write_feature_cache(path: &Path, seq: &FrameFeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * seq.values.len());
    buf.push(seq.kind.id());
    buf.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.values.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FrameFeatureSequence> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if buf.len() < 9 {
        return Err(bad("truncated header"));
    }
    let t = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let kind = FeatureKind::from_id(buf[0], d).ok_or_else(|| bad("unknown feature kind"))?;
    if buf.len() != 9 + 4 * t * d {
        return Err(bad("payload length does not match header"));
    }
    let values = buf[9..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    FrameFeatureSequence::new(Tensor::matrix(t, d, values), kind, SHIFT_MS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16000).unwrap()
    }

    fn sine(freq: f64, n: usize) -> AudioClip {
        clip((0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect())
    }

    #[test]
    fn frame_counts_follow_floor_formula() {
        let c = clip(vec![0.0; 16000]);
        let frames = frame_signal(&c, 20.0, 10.0).unwrap();
        assert_eq!(frames.len(), 99);
        assert!(frames.iter().all(|f| f.len() == 320));
        assert_eq!(frame_signal(&clip(vec![0.0; 320]), 20.0, 10.0).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&clip(vec![0.0; 319]), 20.0, 10.0),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn silence_hits_the_energy_floor() {
        let m = log_mel_spectrogram(&clip(vec![0.0; 16000])).unwrap();
        assert_eq!(m.values.shape(), &[99, 80]);
        let floor = ENERGY_FLOOR.ln();
        assert!(m.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_khz_tone_peaks_in_the_nearest_mel_filter() {
        // independent center table: inverse mel of evenly spaced mel points
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf(top * i as f64 / 81.0 / 2595.0) - 1.0))
            .collect();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let m = log_mel_spectrogram(&sine(1000.0, 16000)).unwrap();
        for t in 0..m.frames() {
            let row = m.values.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn lfcc_has_sixty_dims_and_constant_input_has_zero_deltas() {
        let f = lfcc(&clip(vec![0.0; 16000])).unwrap();
        assert_eq!(f.values.shape(), &[99, 60]);
        for t in 0..f.frames() {
            assert_eq!(&f.values.row(t)[..20], &f.values.row(0)[..20]);
            assert!(f.values.row(t)[20..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn delta_stencil_matches_hand_values() {
        let seq = FrameFeatureSequence::new(
            Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]),
            FeatureKind::Hidden(1),
            10.0,
        )
        .unwrap();
        let d = add_deltas(&seq).unwrap();
        let col = |c: usize| (0..4).map(|t| d.values.get(t, c)).collect::<Vec<_>>();
        assert_eq!(col(1), vec![0.5, 1.0, 1.0, 0.5]);
        assert_eq!(col(2), vec![0.25, 0.25, -0.25, -0.25]);
    }

    #[test]
    fn single_frame_and_constant_sequences_have_zero_deltas() {
        let one = FrameFeatureSequence::new(
            Tensor::matrix(1, 2, vec![3.0, -1.0]),
            FeatureKind::Hidden(2),
            10.0,
        )
        .unwrap();
        let d = add_deltas(&one).unwrap();
        assert_eq!(d.values.data(), &[3.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let flat = FrameFeatureSequence::new(Tensor::full(&[5, 20], 2.0), FeatureKind::Hidden(20), 10.0)
            .unwrap();
        let d = add_deltas(&flat).unwrap();
        assert_eq!(d.kind, FeatureKind::Lfcc60);
        assert!(d.values.data().iter().enumerate().all(|(i, &v)| i % 60 < 20 || v == 0.0));
    }

    #[test]
    fn white_noise_deltas_average_out() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(99, 0);
        let c = clip((0..160_000).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let f = lfcc(&c).unwrap();
        for d in 20..60 {
            let mean = (0..f.frames()).map(|t| f.values.get(t, d)).sum::<f64>() / f.frames() as f64;
            assert!(mean.abs() < 0.05, "coefficient {d}: {mean}");
        }
    }

    #[test]
    fn shifting_by_one_hop_shifts_frames_by_one() {
        let base = sine(437.0, 8000);
        let shifted = clip(base.samples[160..].to_vec());
        let a = lfcc(&base).unwrap();
        let b = lfcc(&shifted).unwrap();
        // interior frames only: edge replication differs at the ends
        for t in 2..b.frames() - 2 {
            for (x, y) in b.values.row(t).iter().zip(a.values.row(t + 1)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let ma = log_mel_spectrogram(&base).unwrap();
        let mb = log_mel_spectrogram(&shifted).unwrap();
        for t in 0..mb.frames() {
            assert!(mb.values.row(t).iter().zip(ma.values.row(t + 1)).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn feature_cache_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let f = log_mel_spectrogram(&sine(300.0, 4000)).unwrap();
        write_feature_cache(&p, &f).unwrap();
        let back = read_feature_cache(&p).unwrap();
        assert_eq!(back.kind, FeatureKind::LogMel80);
        assert!(back.values.max_abs_diff(&f.values) < 1e-4);
        let raw = fs::read(&p).unwrap();
        assert_eq!(raw[0], 0);
        assert_eq!(u32::from_le_bytes(raw[1..5].try_into().unwrap()), f.frames() as u32);
        assert_eq!(u32::from_le_bytes(raw[5..9].try_into().unwrap()), 80);
    }
}
