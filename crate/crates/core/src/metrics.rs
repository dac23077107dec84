//! Evaluation metrics: windowed SSIM, a perceptual distance over a pluggable
//! image embedder, and the Fréchet distance between Gaussian fits of video
//! embeddings (VFID).
//!
//! Images are `H × W × C` tensors and clips `f × H × W × C`, both in
//! `[-1, 1]`. All arithmetic is done in f64.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Pixel value range of `[-1, 1]` images.
pub const PIXEL_RANGE: f64 = 2.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SQRT_JITTER: f64 = 1e-6;
const TRACE_RESIDUE: f64 = 1e-6;
/// Eigenvalues below this fraction of the largest are round-off; their
/// square roots would otherwise add noise of order `√ε`.
const EIGEN_FLOOR: f64 = 1e-12;

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a single `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// SSIM over `[-1, 1]` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_range(a, b, PIXEL_RANGE)
}

/// Mean windowed SSIM with an 11×11 Gaussian window (σ = 1.5), shrunk to the
/// largest odd size that fits when an image side is shorter. Channels are
/// scored separately and averaged.
pub fn ssim_with_range(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return shape_err(format!("ssim inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (h, w, c) = match *a.dims() {
        [h, w] => (h, w, 1),
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => return shape_err(format!("ssim expects H×W×{{1,3}}, got {:?}", a.dims())),
    };
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return shape_err("ssim on an empty image");
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (av, bv) = (to_vec(a)?, to_vec(b)?);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| av[i * c + ch]).collect();
        let y: Vec<f64> = (0..h * w).map(|i| bv[i * c + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// Mean SSIM over the frames of two clips.
pub fn clip_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() || a.rank() != 4 {
        return shape_err(format!("clip ssim inputs {:?} vs {:?}", a.dims(), b.dims()));
    }
    let f = a.dims()[0];
    let mut s = 0.0;
    for i in 0..f {
        s += ssim(&a.get(i)?, &b.get(i)?)?;
    }
    Ok(s / f as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Image,
    Video,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    /// `cout × cin × k^rank`, row-major.
    weight: Vec<f64>,
}

impl ConvLayer {
    fn seeded(rng: &mut ChaCha8Rng, cin: usize, cout: usize, taps: usize) -> Self {
        let std = (2.0 / (cin * taps) as f64).sqrt();
        let weight = (0..cout * cin * taps)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Self { cin, cout, weight }
    }
}

/// Volume `d × h × w × c`; images use `d = 1`.
#[derive(Debug, Clone)]
struct Volume {
    dims: [usize; 3],
    c: usize,
    data: Vec<f64>,
}

impl Volume {
    fn at(&self, z: usize, y: usize, x: usize, ch: usize) -> f64 {
        let [_, h, w] = self.dims;
        self.data[((z * h + y) * w + x) * self.c + ch]
    }

    /// Kernel 3, stride 2, zero padding 1 on every spatial axis with
    /// extent > 1; singleton axes use a single tap. Followed by ReLU.
    fn conv_relu(&self, layer: &ConvLayer) -> Volume {
        let taps: Vec<usize> = self.dims.iter().map(|&d| if d > 1 { 3 } else { 1 }).collect();
        let out_dims: [usize; 3] = std::array::from_fn(|a| if self.dims[a] > 1 { self.dims[a].div_ceil(2) } else { 1 });
        let mut data = vec![0.0; out_dims.iter().product::<usize>() * layer.cout];
        let mut idx = 0;
        for oz in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[2] {
                    for co in 0..layer.cout {
                        let mut acc = 0.0;
                        for tz in 0..taps[0] {
                            let z = (oz * 2 + tz) as isize - (taps[0] / 2) as isize;
                            if z < 0 || z >= self.dims[0] as isize {
                                continue;
                            }
                            for ty in 0..taps[1] {
                                let y = (oy * 2 + ty) as isize - (taps[1] / 2) as isize;
                                if y < 0 || y >= self.dims[1] as isize {
                                    continue;
                                }
                                for tx in 0..taps[2] {
                                    let x = (ox * 2 + tx) as isize - (taps[2] / 2) as isize;
                                    if x < 0 || x >= self.dims[2] as isize {
                                        continue;
                                    }
                                    let tap = (slot(tz, taps[0]) * 3 + slot(ty, taps[1])) * 3 + slot(tx, taps[2]);
                                    for ci in 0..layer.cin {
                                        let wi = (co * layer.cin + ci) * 27 + tap;
                                        acc += layer.weight[wi] * self.at(z as usize, y as usize, x as usize, ci);
                                    }
                                }
                            }
                        }
                        data[idx] = acc.max(0.0);
                        idx += 1;
                    }
                }
            }
        }
        Volume { dims: out_dims, c: layer.cout, data }
    }

    fn channel_means(&self) -> Vec<f64> {
        let n = self.data.len() / self.c;
        let mut m = vec![0.0; self.c];
        for (i, v) in self.data.iter().enumerate() {
            m[i % self.c] += v;
        }
        m.into_iter().map(|v| v / n as f64).collect()
    }
}

/// Slot of a tap in the full 3-wide kernel; singleton axes use the centre.
fn slot(t: usize, taps: usize) -> usize {
    if taps == 1 {
        1
    } else {
        t
    }
}

#[derive(Debug, Clone)]
enum Embedder {
    /// Average-pools to `pool × pool × 3` then projects with a fixed
    /// Gaussian matrix. Linear in its input.
    Linear { pool: usize, proj: Vec<f64>, dim: usize },
    /// Two random conv layers with ReLU. Image variants give normalized
    /// per-location features; video variants give pooled channel means.
    Conv { layers: Vec<ConvLayer> },
}

/// A deterministic, seeded feature embedder.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub id: String,
    pub arity: Arity,
    pub seed: u64,
    embedder: Embedder,
}

const LINEAR_POOL: usize = 8;
const LINEAR_DIM: usize = 32;
const CONV_WIDTHS: [usize; 3] = [3, 8, 16];

impl FeatureExtractor {
    /// Linear image embedder for tests.
    pub fn linear(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = LINEAR_POOL * LINEAR_POOL * 3;
        let proj = (0..LINEAR_DIM * n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v / (n as f64).sqrt()
            })
            .collect();
        Self {
            id: format!("linear:{seed}"),
            arity: Arity::Image,
            seed,
            embedder: Embedder::Linear { pool: LINEAR_POOL, proj, dim: LINEAR_DIM },
        }
    }

    fn conv(seed: u64, arity: Arity) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CONV_WIDTHS.windows(2).map(|w| ConvLayer::seeded(&mut rng, w[0], w[1], 27)).collect();
        let id = match arity {
            Arity::Image => format!("random2d:{seed}"),
            Arity::Video => format!("random3d:{seed}"),
        };
        Self { id, arity, seed, embedder: Embedder::Conv { layers } }
    }

    /// Random-weight 2D conv embedder for perceptual distance.
    pub fn random_image(seed: u64) -> Self {
        Self::conv(seed, Arity::Image)
    }

    /// Random-weight 3D conv embedder for VFID.
    pub fn random_video(seed: u64) -> Self {
        Self::conv(seed, Arity::Video)
    }

    /// Embedding dimension for video extractors (concatenated channel means of
    /// every layer) and for the linear extractor.
    pub fn dim(&self) -> usize {
        match &self.embedder {
            Embedder::Linear { dim, .. } => *dim,
            Embedder::Conv { layers } => layers.iter().map(|l| l.cout).sum(),
        }
    }

    fn volume(x: &Tensor) -> Result<Volume> {
        let (dims, c) = match *x.dims() {
            [h, w, c] => ([1, h, w], c),
            [f, h, w, c] => ([f, h, w], c),
            _ => return shape_err(format!("extractor input must be H×W×C or f×H×W×C, got {:?}", x.dims())),
        };
        if c != CONV_WIDTHS[0] {
            return shape_err(format!("extractor expects {} channels, got {c}", CONV_WIDTHS[0]));
        }
        Ok(Volume { dims, c, data: to_vec(x)? })
    }

    fn check_arity(&self, x: &Tensor) -> Result<()> {
        let want = match self.arity {
            Arity::Image => 3,
            Arity::Video => 4,
        };
        if x.rank() != want {
            return Err(Error::Config(format!("extractor {} has arity {:?}, input has rank {}", self.id, self.arity, x.rank())));
        }
        Ok(())
    }

    fn layer_maps(&self, x: &Tensor) -> Result<Vec<Volume>> {
        let Embedder::Conv { layers } = &self.embedder else {
            return Err(Error::Config(format!("extractor {} has no layer maps", self.id)));
        };
        let mut v = Self::volume(x)?;
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            v = v.conv_relu(l);
            out.push(v.clone());
        }
        Ok(out)
    }

    /// Fixed-length feature vector for one input.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_arity(x)?;
        match &self.embedder {
            Embedder::Linear { pool, proj, dim } => {
                let (h, w, c) = x.dims3()?;
                if h % pool != 0 || w % pool != 0 || c != 3 {
                    return shape_err(format!("linear extractor needs sides divisible by {pool}, got {:?}", x.dims()));
                }
                let v = to_vec(x)?;
                let (bh, bw) = (h / pool, w / pool);
                let mut pooled = vec![0.0; pool * pool * 3];
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..3 {
                            pooled[((i / bh) * pool + j / bw) * 3 + ch] += v[(i * w + j) * 3 + ch];
                        }
                    }
                }
                let norm = (bh * bw) as f64;
                let n = pooled.len();
                Ok((0..*dim).map(|r| (0..n).map(|k| proj[r * n + k] * pooled[k] / norm).sum()).collect())
            }
            Embedder::Conv { .. } => Ok(self.layer_maps(x)?.iter().flat_map(|m| m.channel_means()).collect()),
        }
    }
}

impl fmt::Display for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

impl FromStr for FeatureExtractor {
    type Err = Error;

    /// Parses `linear:<seed>`, `random2d:<seed>` or `random3d:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, seed) = s.split_once(':').unwrap_or((s, "0"));
        let seed: u64 = seed.parse().map_err(|_| Error::Config(format!("bad extractor seed in {s:?}")))?;
        match kind {
            "linear" => Ok(Self::linear(seed)),
            "random2d" => Ok(Self::random_image(seed)),
            "random3d" => Ok(Self::random_video(seed)),
            _ => Err(Error::Config(format!("unknown extractor {s:?}"))),
        }
    }
}

/// Feature-space distance between two images. For conv extractors each layer
/// map is unit-normalized across channels per location, squared differences
/// are averaged over locations, and layers are averaged. For the linear
/// extractor it is the mean squared feature difference.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    if extractor.arity != Arity::Image {
        return Err(Error::Config(format!("perceptual distance needs an image extractor, got {}", extractor.id)));
    }
    if a.dims() != b.dims() {
        return shape_err(format!("perceptual inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    match &extractor.embedder {
        Embedder::Linear { .. } => {
            let (fa, fb) = (extractor.embed(a)?, extractor.embed(b)?);
            Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len() as f64)
        }
        Embedder::Conv { .. } => {
            extractor.check_arity(a)?;
            let (ma, mb) = (extractor.layer_maps(a)?, extractor.layer_maps(b)?);
            let mut total = 0.0;
            for (va, vb) in ma.iter().zip(&mb) {
                let c = va.c;
                let locs = va.data.len() / c;
                let mut acc = 0.0;
                for l in 0..locs {
                    let pa = &va.data[l * c..(l + 1) * c];
                    let pb = &vb.data[l * c..(l + 1) * c];
                    let na = pa.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                    let nb = pb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                    acc += pa.iter().zip(pb).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>();
                }
                total += acc / locs as f64;
            }
            Ok(total / ma.len() as f64)
        }
    }
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return shape_err("feature vectors differ in length");
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

/// Eigenvalues of a symmetric matrix, `None` when the solver does not converge.
fn sym_eigen(m: &DMatrix<f64>) -> Option<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m).ok_or_else(|| Error::Divergence("matrix square root did not converge".into()))?;
    let floor = EIGEN_FLOOR * e.eigenvalues.amax();
    let vals = e.eigenvalues.map(|v| if v > floor { v.sqrt() } else { 0.0 });
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// `Tr (Σ1 Σ2)^{1/2}` through the symmetric form `(√Σ1 Σ2 √Σ1)^{1/2}`.
/// Returns `None` when the product has clearly negative eigenvalues.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<Option<f64>> {
    let r = psd_sqrt(s1)?;
    let m = &r * s2 * &r;
    let m = (&m + m.transpose()) * 0.5;
    let e = sym_eigen(&m).ok_or_else(|| Error::Divergence("matrix square root did not converge".into()))?;
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if e.eigenvalues.iter().any(|&v| v < -1e-8 * scale) {
        return Ok(None);
    }
    let floor = EIGEN_FLOOR * scale;
    Ok(Some(e.eigenvalues.iter().filter(|&&v| v > floor).map(|v| v.sqrt()).sum()))
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    let d = s1.mean.len();
    if s2.mean.len() != d || s1.cov.shape() != (d, d) || s2.cov.shape() != (d, d) {
        return shape_err(format!("stats dimensions differ: {} vs {}", d, s2.mean.len()));
    }
    let mean_term = (&s1.mean - &s2.mean).norm_squared();
    let tr = match trace_sqrt_product(&s1.cov, &s2.cov)? {
        Some(t) => t,
        None => {
            let j = DMatrix::identity(d, d) * SQRT_JITTER;
            trace_sqrt_product(&(&s1.cov + &j), &(&s2.cov + &j))?
                .ok_or_else(|| Error::Divergence("covariance product is not positive semidefinite".into()))?
        }
    };
    let v = mean_term + s1.cov.trace() + s2.cov.trace() - 2.0 * tr;
    if v < -TRACE_RESIDUE {
        return Err(Error::Divergence(format!("negative Fréchet distance {v}")));
    }
    Ok(v.max(0.0))
}

/// Fréchet distance between whole-clip embeddings of two clip sets.
pub fn vfid(real: &[Tensor], generated: &[Tensor], extractor: &FeatureExtractor) -> Result<f64> {
    if extractor.arity != Arity::Video {
        return Err(Error::Config(format!("vfid needs a video extractor, got {}", extractor.id)));
    }
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Data(format!("vfid needs ≥ 2 clips per side, got {} and {}", real.len(), generated.len())));
    }
    let shape = real[0].dims();
    if real.iter().chain(generated).any(|c| c.dims() != shape) {
        return shape_err("vfid clips differ in shape");
    }
    let embed = |set: &[Tensor]| set.iter().map(|c| extractor.embed(c)).collect::<Result<Vec<_>>>();
    frechet_distance(&gaussian_stats(&embed(real)?)?, &gaussian_stats(&embed(generated)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..h * w * 3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        Tensor::from_vec(v, (h, w, 3), &Device::Cpu).unwrap()
    }

    #[test]
    fn ssim_identity_is_exact() {
        let x = image(1, 24, 20);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (m1, m2) = (0.3f64, -0.2f64);
        let a = Tensor::full(m1 as f32, (16, 16, 1), &Device::Cpu).unwrap();
        let b = Tensor::full(m2 as f32, (16, 16, 1), &Device::Cpu).unwrap();
        let (m1, m2) = (m1 as f32 as f64, m2 as f32 as f64);
        let c1 = (0.01 * PIXEL_RANGE).powi(2);
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn ssim_small_images_shrink_window() {
        let (a, b) = (image(1, 4, 6), image(2, 4, 6));
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(ssim(&a, &image(3, 6, 4)).is_err());
    }

    #[test]
    fn gaussian_stats_identical_vectors() {
        let s = gaussian_stats(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(s.cov.iter().all(|v| *v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        let s1 = GaussianStats { mean: DVector::from_vec(vec![1.0, 0.0, 2.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25])), n: 10 };
        let s2 = GaussianStats { mean: DVector::from_vec(vec![0.0, 1.0, 2.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 0.25])), n: 10 };
        let want = 2.0 + (1.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2);
        assert!((frechet_distance(&s1, &s2).unwrap() - want).abs() < 1e-8);
        assert!((frechet_distance(&s2, &s1).unwrap() - want).abs() < 1e-8);
        assert!(frechet_distance(&s1, &s1).unwrap().abs() < 1e-8);
    }

    #[test]
    fn linear_extractor_distance_grows_with_perturbation() {
        let e = FeatureExtractor::linear(5);
        let a = image(1, 16, 16);
        let delta = image(2, 16, 16);
        let mut last = 0.0;
        for s in [0.1, 0.2, 0.4] {
            let b = (&a + (&delta * s).unwrap()).unwrap();
            let d = perceptual_distance(&a, &b, &e).unwrap();
            assert!(d > last);
            last = d;
        }
        assert_eq!(perceptual_distance(&a, &a, &e).unwrap(), 0.0);
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let a = image(1, 16, 16);
        assert!(perceptual_distance(&a, &a, &FeatureExtractor::random_video(0)).is_err());
        assert!(vfid(&[a.clone(), a.clone()], &[a.clone(), a], &FeatureExtractor::random_image(0)).is_err());
    }

    #[test]
    fn extractor_ids_parse() {
        let e: FeatureExtractor = "random3d:7".parse().unwrap();
        assert_eq!(e.id, "random3d:7");
        assert_eq!(e.arity, Arity::Video);
        assert!("bogus:1".parse::<FeatureExtractor>().is_err());
    }
}
