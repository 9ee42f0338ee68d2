//! Frame encoders standing in for pretrained self-supervised models, and the
//! trainable 1024 → 128 projection that feeds the fusion stage.

use std::fs;
use std::path::Path;

use crate::corpus::AudioClip;
use crate::dsp::{log_mel_spectrogram, FeatureKind, FrameFeatureSequence, N_MELS, SHIFT_MS};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};
use crate::rng::{seeded, stream};

pub const W2V_DIM: usize = 1024;
pub const HUBERT_DIM: usize = 64;
pub const PROJ_DIM: usize = 128;

/// Anything that maps audio to a `[T × output_dim]` frame sequence on the
/// 10 ms grid. Implementations must be deterministic.
pub trait FrameEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn frame_shift_ms(&self) -> f64 {
        SHIFT_MS
    }
    fn encode(&self, clip: &AudioClip) -> Result<FrameFeatureSequence>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoderParams {
    pub seed: u64,
    pub output_dim: usize,
    /// `[80 × output_dim]`, standard normal scaled by 1/√80.
    pub projection: Tensor,
}

const PARAMS_MAGIC: &[u8; 8] = b"MVTOYENC";

impl ToyEncoderParams {
    pub fn generate(seed: u64, output_dim: usize, stream_id: u64) -> Self {
        let mut init = Init::new(seeded(seed, stream_id));
        let projection = init.normal(&[N_MELS, output_dim], 1.0 / (N_MELS as f64).sqrt());
        ToyEncoderParams {
            seed,
            output_dim,
            projection,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * self.projection.len());
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        buf.extend_from_slice(&(self.output_dim as u32).to_le_bytes());
        for v in self.projection.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = || Error::Checkpoint(format!("{}: malformed encoder parameters", path.display()));
        if buf.len() < 24 || &buf[..8] != PARAMS_MAGIC {
            return Err(bad());
        }
        let seed = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let rows = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(buf[20..24].try_into().unwrap()) as usize;
        if rows != N_MELS || buf.len() != 24 + 8 * rows * cols {
            return Err(bad());
        }
        let data = buf[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ToyEncoderParams {
            seed,
            output_dim: cols,
            projection: Tensor::matrix(rows, cols, data),
        })
    }
}

/// Seeded random linear projection of the log-mel spectrogram.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    name: String,
    params: ToyEncoderParams,
}

impl ToyEncoder {
    pub fn new(name: impl Into<String>, params: ToyEncoderParams) -> Self {
        ToyEncoder {
            name: name.into(),
            params,
        }
    }

    /// The 1024-d wav2vec stand-in.
    pub fn w2v(seed: u64) -> Self {
        ToyEncoder::new("toy_w2v", ToyEncoderParams::generate(seed, W2V_DIM, stream::TOY_W2V))
    }

    /// The HuBERT stand-in feeding k-means.
    pub fn hubert(seed: u64, dim: usize) -> Self {
        ToyEncoder::new("toy_hubert", ToyEncoderParams::generate(seed, dim, stream::TOY_HUBERT))
    }

    pub fn params(&self) -> &ToyEncoderParams {
        &self.params
    }

    /// Encodes an already computed log-mel sequence.
    pub fn encode_logmel(&self, logmel: &FrameFeatureSequence) -> Result<FrameFeatureSequence> {
        if logmel.kind != FeatureKind::LogMel80 {
            return Err(Error::Shape(format!("expected log-mel input, got {:?}", logmel.kind)));
        }
        let values = logmel.values.matmul(&self.params.projection);
        let kind = if self.params.output_dim == W2V_DIM {
            FeatureKind::Ssl1024
        } else {
            FeatureKind::Hidden(self.params.output_dim)
        };
        FrameFeatureSequence::new(values, kind, logmel.frame_shift_ms)
    }
}

impl FrameEncoder for ToyEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.params.output_dim
    }

    fn encode(&self, clip: &AudioClip) -> Result<FrameFeatureSequence> {
        self.encode_logmel(&log_mel_spectrogram(clip)?)
    }
}

/// Registry of built-in encoders.
pub fn encoder_by_name(name: &str, seed: u64, dim: Option<usize>) -> Result<Box<dyn FrameEncoder>> {
    match name {
        "toy_w2v" => Ok(Box::new(ToyEncoder::new(
            "toy_w2v",
            ToyEncoderParams::generate(seed, dim.unwrap_or(W2V_DIM), stream::TOY_W2V),
        ))),
        "toy_hubert" => Ok(Box::new(ToyEncoder::hubert(seed, dim.unwrap_or(HUBERT_DIM)))),
        other => Err(Error::Config(format!(
            "unknown frame encoder {other:?} (known: toy_w2v, toy_hubert)"
        ))),
    }
}

/// Trainable row-wise affine map from SSL features to the fusion width.
#[derive(Clone, Debug)]
pub struct Projection128 {
    pub linear: Linear,
}

impl Projection128 {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize) -> Self {
        Projection128 {
            linear: Linear::new(ps, init, name, in_dim, PROJ_DIM, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        self.linear.forward(g, ps, x)
    }
}

/// Graph-free projection of a 1024-d sequence.
pub fn project_ssl(
    seq: &FrameFeatureSequence,
    proj: &Projection128,
    ps: &ParamStore,
) -> Result<FrameFeatureSequence> {
    if seq.dim() != proj.linear.in_dim {
        return Err(Error::Shape(format!(
            "projection expects D = {}, got {}",
            proj.linear.in_dim,
            seq.dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(seq.values.clone());
    let y = proj.forward(&mut g, ps, x);
    FrameFeatureSequence::new(g.value(y).clone(), FeatureKind::SslProj128, seq.frame_shift_ms)
}
