//! Fréchet feature distance, perceptual path length, and pose accuracy (OKS).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::MaskedSample;
use crate::error::{Error, Result};
use crate::generator::{Conditioning, GeneratorState, LATENT_DIM};
use crate::mask::Mask;
use crate::pose::{oks, Keypoints17};
use crate::projector::{extract_features, FeatureNetwork};
use crate::tensor::Tensor;

pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub n: u64,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass sample mean and unbiased covariance.
    pub fn from_samples(xs: &[Vec<f64>]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::TooFewSamples(xs.len()));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for x in xs {
            for i in 0..d {
                let di = x[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (x[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n - 1.0);
        Ok(Self {
            mean,
            cov,
            n: xs.len() as u64,
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Streaming mean and co-moment accumulator; partial results merge exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        assert_eq!(x.len(), d);
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let post = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[j * d + i] += delta[j] * post;
            }
        }
    }

    /// Chan et al. parallel combination.
    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let d = self.mean.len();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += other.m2[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.n += other.n;
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::TooFewSamples(self.n as usize));
        }
        let d = self.mean.len();
        let scale = 1.0 / (self.n as f64 - 1.0);
        let mut cov: Vec<f64> = self.m2.iter().map(|v| v * scale).collect();
        // exact symmetry
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        Ok(FeatureStats {
            mean: self.mean.clone(),
            cov,
            n: self.n,
        })
    }
}

/// Streams `images` through `extractor` into feature statistics.
pub fn accumulate_stats<I, F>(extractor: F, images: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = Tensor>,
    F: Fn(&Tensor) -> Vec<f64>,
{
    let mut acc: Option<Welford> = None;
    for img in images {
        let f = extractor(&img);
        acc.get_or_insert_with(|| Welford::new(f.len())).push(&f);
    }
    match acc {
        Some(a) => a.finish(),
        None => Err(Error::TooFewSamples(0)),
    }
}

/// Global-average-pooled features of all four levels, concatenated.
pub fn pooled_features(net: &FeatureNetwork, image: &Tensor) -> Vec<f64> {
    let s = image.shape();
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]]);
    let mut out = Vec::new();
    for f in extract_features(net, &batch, 0.0) {
        let (_, c, h, w) = f.dims4();
        for ch in 0..c {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            out.push(plane.iter().sum::<f64>() / (h * w) as f64);
        }
    }
    out
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if let Some(bad) = eig.eigenvalues.iter().copied().find(|l| *l < -PSD_TOLERANCE) {
        return Err(Error::NonPsd(bad));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the square root
/// taken from the symmetric `Σa^½ Σb Σa^½`, which has the same spectrum.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(&sa)?;
    psd_sqrt(&sb)?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for l in eig.eigenvalues.iter() {
        if *l < -PSD_TOLERANCE {
            return Err(Error::NonPsd(*l));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Root-mean-square pixel difference over the mask's missing pixels (all
/// pixels if nothing is missing). Its square is the mean squared difference.
pub fn masked_rms_distance(mask: &Mask, a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = mask.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    let all = mask.missing_count() == 0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if all || mask.get(y, x) == 0 {
                    let i = (c * h + y) * w + x;
                    total += (a.data()[i] - b.data()[i]).powi(2);
                    count += 1;
                }
            }
        }
    }
    (total / count as f64).sqrt()
}

/// Perceptual path length: mean of `d(G(lerp(t)), G(lerp(t + ε)))² / ε²`.
///
/// `generate(pair, z)` maps a `[2, 64]` latent batch to two images for the
/// condition chosen by `pair`; `distance(pair, a, b)` compares them.
pub fn ppl<G, D, R>(mut generate: G, distance: D, epsilon: f64, n_pairs: usize, latent_dim: usize, rng: &mut R) -> Result<f64>
where
    G: FnMut(usize, &Tensor) -> Result<(Tensor, Tensor)>,
    D: Fn(usize, &Tensor, &Tensor) -> f64,
    R: Rng,
{
    assert!(epsilon > 0.0 && n_pairs >= 1);
    let mut total = 0.0;
    for pair in 0..n_pairs {
        let z1: Vec<f64> = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let z2: Vec<f64> = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let t: f64 = rng.random_range(0.0..1.0);
        let lerp = |s: f64| z1.iter().zip(&z2).map(move |(a, b)| a + s * (b - a));
        let z: Vec<f64> = lerp(t).chain(lerp(t + epsilon)).collect();
        let (a, b) = generate(pair, &Tensor::from_vec(&[2, latent_dim], z))?;
        let d = distance(pair, &a, &b);
        total += d * d / (epsilon * epsilon);
    }
    Ok(total / n_pairs as f64)
}

/// PPL of a generator snapshot over `samples`, cycling conditions per pair.
pub fn generator_ppl(
    state: &GeneratorState,
    use_ema: bool,
    samples: &[MaskedSample],
    epsilon: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = if use_ema { &state.ema } else { &state.params };
    let pick = |pair: usize| &samples[pair % samples.len()];
    let generate = |pair: usize, z: &Tensor| {
        let s = pick(pair);
        let item = (&s.image, &s.mask, &s.pose);
        let cond = Conditioning::new(&[item, item])?;
        let out = state.synthesize_with(params, z, &cond)?;
        Ok((out.index0(0), out.index0(1)))
    };
    let distance = |pair: usize, a: &Tensor, b: &Tensor| masked_rms_distance(&pick(pair).mask, a, b);
    ppl(generate, distance, epsilon, n_pairs, LATENT_DIM, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Anything that fills the missing region of a sample.
pub trait Inpainter {
    /// Composited outputs for `samples`; `indices` are their dataset positions.
    fn inpaint(&self, samples: &[MaskedSample], indices: &[usize]) -> Result<Vec<Tensor>>;
}

/// Pastes the ground-truth image back; an upper bound for the pipeline.
pub struct GroundTruthInpainter;

impl Inpainter for GroundTruthInpainter {
    fn inpaint(&self, samples: &[MaskedSample], _: &[usize]) -> Result<Vec<Tensor>> {
        Ok(samples.iter().map(|s| s.image.clone()).collect())
    }
}

/// Generator snapshot with a fixed latent per dataset index.
pub struct GeneratorInpainter<'a> {
    pub state: &'a GeneratorState,
    pub use_ema: bool,
    pub seed: u64,
}

pub fn sample_latent(seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect()
}

impl Inpainter for GeneratorInpainter<'_> {
    fn inpaint(&self, samples: &[MaskedSample], indices: &[usize]) -> Result<Vec<Tensor>> {
        let items: Vec<_> = samples.iter().map(|s| (&s.image, &s.mask, &s.pose)).collect();
        let cond = Conditioning::new(&items)?;
        let z: Vec<f64> = indices.iter().flat_map(|&i| sample_latent(self.seed, i)).collect();
        let z = Tensor::from_vec(&[samples.len(), LATENT_DIM], z);
        let params = if self.use_ema { &self.state.ema } else { &self.state.params };
        let out = self.state.synthesize_with(params, &z, &cond)?;
        Ok((0..samples.len()).map(|i| out.index0(i)).collect())
    }
}

/// Mean OKS of keypoints re-detected on inpainted outputs. The object scale is
/// the area of the missing region's bounding box. Samples without visible
/// ground truth are skipped.
pub fn evaluate_oks<P, D>(inpainter: &P, samples: &[MaskedSample], redetect: D, batch: usize) -> Result<f64>
where
    P: Inpainter + ?Sized,
    D: Fn(&Tensor, &MaskedSample) -> Keypoints17,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (chunk_i, chunk) in samples.chunks(batch.max(1)).enumerate() {
        let indices: Vec<usize> = (0..chunk.len()).map(|j| chunk_i * batch.max(1) + j).collect();
        let outputs = inpainter.inpaint(chunk, &indices)?;
        for (s, out) in chunk.iter().zip(&outputs) {
            let (h, w) = s.resolution();
            let area = match s.mask.missing_bbox_area() {
                a if a > 0.0 => a,
                _ => (h * w) as f64,
            };
            let pred = redetect(out, s);
            match oks(&pred, &s.keypoints, area) {
                Ok(v) => {
                    total += v;
                    counted += 1;
                }
                Err(Error::NoVisibleGroundTruth) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if counted == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / counted as f64)
}
