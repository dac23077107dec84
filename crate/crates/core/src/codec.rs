//! Pixel-space video tensors, their latents, and the codecs mapping between
//! them. Every codec downsamples by exactly 8 in both spatial axes and
//! produces 4 latent channels.

use std::cell::RefCell;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Optimizer, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamBuilder;

pub const DOWNSAMPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

/// Raw frames `f × H × W × 3` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct VideoTensor {
    pub data: Tensor,
    pub fps: f32,
}

impl VideoTensor {
    pub fn new(data: Tensor, fps: f32) -> Result<Self> {
        let (f, h, w, c) = data.dims4()?;
        if f == 0 || c != 3 {
            return shape_err(format!("video must be f×H×W×3 with f ≥ 1, got {:?}", data.dims()));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return shape_err(format!("video spatial dims {h}×{w} not divisible by {DOWNSAMPLE}"));
        }
        let lo = data.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = data.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lo < -1.0 - 1e-6 || hi > 1.0 + 1e-6 {
            return shape_err(format!("video values must lie in [-1,1], found [{lo}, {hi}]"));
        }
        Ok(Self { data, fps })
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }
}

/// Encoded latent `f × h × w × 4`.
#[derive(Debug, Clone)]
pub struct VideoLatent {
    pub data: Tensor,
}

impl VideoLatent {
    pub fn new(data: Tensor) -> Result<Self> {
        let (f, _, _, c) = data.dims4()?;
        if f == 0 || c != LATENT_CHANNELS {
            return shape_err(format!("latent must be f×h×w×4, got {:?}", data.dims()));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecKind {
    /// Space-to-depth(8) followed by a fixed seeded projection 192 → 4.
    Linear { seed: u64 },
    /// Small convolutional autoencoder; `weights` is a safetensors file
    /// produced by [`ConvCodec::fit`].
    Conv { seed: u64, weights: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    #[serde(flatten)]
    pub kind: CodecKind,
    /// Multiplier applied to latents after encoding (and divided out before
    /// decoding).
    #[serde(default = "one")]
    pub latent_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self { kind: CodecKind::Linear { seed: 0 }, latent_scale: 1.0 }
    }
}

/// A built codec, ready to encode and decode.
pub enum Codec {
    Linear(LinearCodec),
    Conv(ConvCodec),
}

impl Codec {
    pub fn from_spec(spec: &CodecSpec, device: &Device) -> Result<Self> {
        match &spec.kind {
            CodecKind::Linear { seed } => {
                Ok(Codec::Linear(LinearCodec::new(*seed, spec.latent_scale, device)?))
            }
            CodecKind::Conv { seed, weights } => {
                let mut codec = ConvCodec::new(*seed, spec.latent_scale, device)?;
                if let Some(path) = weights {
                    codec.varmap.load(path)?;
                }
                Ok(Codec::Conv(codec))
            }
        }
    }

    /// Encodes a batch of frames. Raw tensors are accepted so that masks and
    /// pose maps share the path; the shape is validated here.
    pub fn encode_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = frames.dims4()?;
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return shape_err(format!("frame dims {h}×{w} not divisible by {DOWNSAMPLE}"));
        }
        if c != 3 {
            return shape_err(format!("expected 3 colour channels, got {c}"));
        }
        match self {
            Codec::Linear(c) => c.encode(frames),
            Codec::Conv(c) => c.encode(frames),
        }
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<VideoLatent> {
        VideoLatent::new(self.encode_tensor(&video.data)?)
    }

    pub fn decode(&self, latent: &VideoLatent) -> Result<VideoTensor> {
        let out = match self {
            Codec::Linear(c) => c.decode(&latent.data)?,
            Codec::Conv(c) => c.decode(&latent.data)?,
        };
        VideoTensor::new(out.clamp(-1.0, 1.0)?, 8.0)
    }
}

/// Rearranges `f×H×W×3` into `f×h×w×192` blocks ordered (dy, dx, channel).
pub fn space_to_depth(x: &Tensor, k: usize) -> Result<Tensor> {
    let (f, h, w, c) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return shape_err(format!("{h}×{w} not divisible by {k}"));
    }
    Ok(x.reshape((f, h / k, k, w / k, k, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((f, h / k, w / k, k * k * c))?)
}

pub fn depth_to_space(x: &Tensor, k: usize, c: usize) -> Result<Tensor> {
    let (f, h, w, kkc) = x.dims4()?;
    if kkc != k * k * c {
        return shape_err(format!("depth {kkc} != {k}·{k}·{c}"));
    }
    Ok(x.reshape((f, h, w, k, k, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((f, h * k, w * k, c))?)
}

/// Orthonormalises the rows of `rows` in place (modified Gram-Schmidt).
pub(crate) fn gram_schmidt(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
}

/// Linear test codec. The projection spans the per-channel block means plus
/// one seeded random direction, rotated by a seeded orthogonal matrix, so
/// decoded latents are the block-mean colours of the input.
pub struct LinearCodec {
    /// `192 × 4`, applied as `blocks · proj`.
    proj: Tensor,
    /// `4 × 192` pseudo-inverse of `proj`.
    inv: Tensor,
    latent_scale: f64,
}

impl LinearCodec {
    pub fn new(seed: u64, latent_scale: f64, device: &Device) -> Result<Self> {
        let depth = DOWNSAMPLE * DOWNSAMPLE * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..depth).map(|i| if i % 3 == c { 1.0 } else { 0.0 }).collect())
            .collect();
        basis.push((0..depth).map(|_| StandardNormal.sample(&mut rng)).collect());
        gram_schmidt(&mut basis);
        let mut rot: Vec<Vec<f64>> =
            (0..4).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        gram_schmidt(&mut rot);
        // rows of the projection: rot · basis, scaled so a latent is a block mean
        let scale = 1.0 / DOWNSAMPLE as f64;
        let mut proj = vec![0f64; depth * 4];
        let mut inv = vec![0f64; 4 * depth];
        for r in 0..4 {
            for i in 0..depth {
                let v: f64 = (0..4).map(|k| rot[r][k] * basis[k][i]).sum();
                proj[i * 4 + r] = v * scale;
                inv[r * depth + i] = v / scale;
            }
        }
        Ok(Self {
            proj: Tensor::from_vec(proj, (depth, 4), device)?,
            inv: Tensor::from_vec(inv, (4, depth), device)?,
            latent_scale,
        })
    }

    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let blocks = space_to_depth(frames, DOWNSAMPLE)?;
        let proj = self.proj.to_dtype(frames.dtype())?;
        Ok((blocks.broadcast_matmul(&proj)? * self.latent_scale)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let inv = self.inv.to_dtype(latent.dtype())?;
        let blocks = (latent / self.latent_scale)?.broadcast_matmul(&inv)?;
        depth_to_space(&blocks, DOWNSAMPLE, 3)
    }
}

/// Tiny convolutional autoencoder, three stride-2 stages each way.
pub struct ConvCodec {
    pub varmap: VarMap,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    latent_scale: f64,
}

impl ConvCodec {
    pub fn new(seed: u64, latent_scale: f64, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        let vb = ParamBuilder::new(&varmap, &rng, DType::F32, device);
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let same = Conv2dConfig { padding: 1, ..Default::default() };
        let enc = vec![
            vb.conv2d(3, 16, 3, down, "enc.0")?,
            vb.conv2d(16, 32, 3, down, "enc.1")?,
            vb.conv2d(32, LATENT_CHANNELS, 3, down, "enc.2")?,
        ];
        let dec = vec![
            vb.conv2d(LATENT_CHANNELS, 32, 3, same, "dec.0")?,
            vb.conv2d(32, 16, 3, same, "dec.1")?,
            vb.conv2d(16, 16, 3, same, "dec.2")?,
            vb.conv2d(16, 3, 3, same, "dec.3")?,
        ];
        Ok(Self { varmap, enc, dec, latent_scale })
    }

    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let dtype = frames.dtype();
        let mut x = frames.to_dtype(DType::F32)?.permute((0, 3, 1, 2))?.contiguous()?;
        for (i, conv) in self.enc.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.enc.len() {
                x = x.silu()?;
            }
        }
        Ok((x.permute((0, 2, 3, 1))?.contiguous()? * self.latent_scale)?.to_dtype(dtype)?)
    }

    /// Unclamped decoder output.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let dtype = latent.dtype();
        let mut x = (latent.to_dtype(DType::F32)? / self.latent_scale)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        x = self.dec[0].forward(&x)?.silu()?;
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate().skip(1) {
            let (_, _, h, w) = x.dims4()?;
            x = conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?;
            if i < last {
                x = x.silu()?;
            }
        }
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Fits the autoencoder to `frames` (`n × H × W × 3`) with a mean squared
    /// reconstruction loss. Returns the per-step loss history.
    pub fn fit(&mut self, frames: &Tensor, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f32>> {
        use rand::Rng;
        let n = frames.dims()[0];
        if n == 0 {
            return Err(Error::Data("no frames to fit the codec on".into()));
        }
        let mut opt = candle_nn::AdamW::new(
            self.varmap.all_vars(),
            candle_nn::ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = frames.to_dtype(DType::F32)?;
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<u32> = (0..batch.min(n)).map(|_| rng.gen_range(0..n) as u32).collect();
            let idx = Tensor::new(idx.as_slice(), frames.device())?;
            let x = frames.index_select(&idx, 0)?;
            let recon = self.decode(&self.encode(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            history.push(loss.to_scalar::<f32>()?);
        }
        Ok(history)
    }
}

/// Mean absolute reconstruction error per frame, useful for codec reports.
pub fn reconstruction_error(codec: &Codec, video: &VideoTensor) -> Result<f64> {
    let rec = codec.decode(&codec.encode(video)?)?;
    let err = (rec.data - &video.data)?.abs()?.mean(D::Minus1)?.mean_all()?;
    Ok(err.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
