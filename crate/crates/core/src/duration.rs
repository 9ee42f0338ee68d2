//! Discrete-unit duration view: k-means quantization of frame embeddings into
//! 1-based unit IDs, plus run-length analytics over the resulting sequences.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dsp::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{seeded, stream};

pub const DEFAULT_VOCAB: usize = 100;
pub const MAX_ITERATIONS: usize = 300;
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    /// `[K × D]`
    pub centroids: Tensor,
    pub seed: u64,
}

/// Per-frame unit IDs in `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DurationVector {
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub quantizer: Quantizer,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties resolve to the lowest index.
fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl Quantizer {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// `K: u32, D: u32, seed: u64`, then `K × D` `f32` centroids, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 4 * self.centroids.len());
        buf.extend_from_slice(&(self.k() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.centroids.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 {
            return Err(Error::Checkpoint(format!("{}: truncated quantizer", path.display())));
        }
        let k = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        if buf.len() != 16 + 4 * k * d {
            return Err(Error::Checkpoint(format!(
                "{}: quantizer payload does not match {k}×{d}",
                path.display()
            )));
        }
        let data = buf[16..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Quantizer {
            centroids: Tensor::matrix(k, d, data),
            seed,
        })
    }
}

fn count_distinct(points: &Tensor) -> usize {
    let mut seen = HashSet::new();
    for i in 0..points.rows() {
        let key: Vec<u64> = points.row(i).iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

/// k-means++ seeding: first center uniform, the rest proportional to the
/// squared distance from the nearest chosen center.
fn kmeans_pp(points: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.gather_rows(&chosen)
}

pub fn fit_quantizer(points: &Tensor, k: usize, seed: u64) -> Result<Quantizer> {
    fit_quantizer_with_history(points, k, seed).map(|r| r.quantizer)
}

/// Lloyd iterations from k-means++ seeds. Stops when no centroid moves more
/// than [`CONVERGENCE_TOL`] or after [`MAX_ITERATIONS`]. An empty cluster is
/// reseeded at the point farthest from its assigned centroid.
pub fn fit_quantizer_with_history(points: &Tensor, k: usize, seed: u64) -> Result<FitReport> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::InsufficientData(format!(
            "{distinct} distinct points for {k} clusters"
        )));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let (n, d) = (points.rows(), points.cols());
    let mut rng = seeded(seed, stream::KMEANS);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centroids);
            assign[i] = c;
            dist[i] = dd;
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        // reseed empties before measuring so the history stays monotone
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|i| !taken.contains(i) && counts[assign[*i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("distinct points ≥ k leaves a donor cluster");
            taken.insert(far);
            counts[assign[far]] -= 1;
            counts[c] = 1;
            assign[far] = c;
            dist[far] = 0.0;
            centroids.row_mut(c).copy_from_slice(points.row(far));
        }
        history.push(dist.iter().sum());
        let mut sums = Tensor::zeros(&[k, d]);
        for (i, &a) in assign.iter().enumerate() {
            for (s, x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            moved = moved.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if moved < CONVERGENCE_TOL {
            break;
        }
    }
    // persisted centroids are f32; keep the in-memory model identical
    let centroids = centroids.map(|v| f64::from(v as f32));
    Ok(FitReport {
        quantizer: Quantizer { centroids, seed },
        wcss_history: history,
        iterations,
    })
}

/// Within-cluster sum of squares of `points` under nearest-centroid assignment.
pub fn wcss(points: &Tensor, centroids: &Tensor) -> f64 {
    (0..points.rows()).map(|i| nearest(points.row(i), centroids).1).sum()
}

pub fn quantize(seq: &FrameFeatureSequence, q: &Quantizer) -> Result<DurationVector> {
    quantize_matrix(&seq.values, q)
}

pub fn quantize_matrix(values: &Tensor, q: &Quantizer) -> Result<DurationVector> {
    if values.cols() != q.dim() {
        return Err(Error::Shape(format!(
            "quantizer expects D = {}, got {}",
            q.dim(),
            values.cols()
        )));
    }
    let ids = (0..values.rows())
        .map(|t| nearest(values.row(t), &q.centroids).0 + 1)
        .collect();
    Ok(DurationVector { ids })
}

/// Maximal runs of equal IDs as `(id, length)`.
pub fn run_lengths(dv: &DurationVector) -> Result<Vec<(usize, usize)>> {
    if dv.ids.is_empty() {
        return Err(Error::InsufficientData("empty duration vector".into()));
    }
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &id in &dv.ids {
        match runs.last_mut() {
            Some((last, len)) if *last == id => *len += 1,
            _ => runs.push((id, 1)),
        }
    }
    Ok(runs)
}

/// Population standard deviation of run lengths.
pub fn duration_uniformity(dv: &DurationVector) -> Result<f64> {
    let runs = run_lengths(dv)?;
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.1 as f64).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.1 as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}
