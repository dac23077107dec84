//! Procedural "dancing figure" scenes and the try-on conditioning built from
//! them: agnostic frames, pose maps, inpainting masks and garment images.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::VideoTensor;
use crate::error::{shape_err, Error, Result};

/// Value written into neutralised (agnostic) pixels.
pub const NEUTRAL: f32 = 0.0;
pub const DILATION_RADIUS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentTexture {
    Stripes,
    Checker,
    Glyph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPattern {
    Plain,
    Gradient,
    Dots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub total_frames: usize,
    /// Horizontal and vertical path amplitudes in pixels.
    pub amplitude: (f64, f64),
    /// Cycles per frame of the horizontal motion.
    pub frequency: f64,
    pub phase: f64,
    /// Peak rotation of the figure in radians.
    pub rotation: f64,
    /// Torso ellipse radii in pixels.
    pub torso: (f64, f64),
    pub head_radius: f64,
    pub texture: GarmentTexture,
    pub background: BackgroundPattern,
    pub garment_colors: ([f32; 3], [f32; 3]),
    pub skin: [f32; 3],
    pub background_color: [f32; 3],
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]
}

impl SyntheticSceneSpec {
    /// Draws a scene whose figure stays inside a `height × width` canvas.
    pub fn random(seed: u64, height: usize, width: usize, total_frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = height.min(width) as f64;
        let torso = (s * rng.gen_range(0.13..0.16), s * rng.gen_range(0.17..0.2));
        let textures = [GarmentTexture::Stripes, GarmentTexture::Checker, GarmentTexture::Glyph];
        let backgrounds = [BackgroundPattern::Plain, BackgroundPattern::Gradient, BackgroundPattern::Dots];
        let mut c1 = color(&mut rng);
        let mut c2 = color(&mut rng);
        // keep the two garment colours distinguishable
        if (0..3).map(|i| (c1[i] - c2[i]).abs()).sum::<f32>() < 1.0 {
            c1 = [0.8, -0.6, -0.6];
            c2 = [-0.6, -0.6, 0.8];
        }
        Self {
            seed,
            height,
            width,
            total_frames,
            amplitude: (s * rng.gen_range(0.04..0.08), s * rng.gen_range(0.01..0.03)),
            frequency: rng.gen_range(0.02..0.05),
            phase: rng.gen_range(0.0..2.0 * PI),
            rotation: rng.gen_range(0.05..0.2),
            torso,
            head_radius: s * rng.gen_range(0.07..0.09),
            texture: textures[rng.gen_range(0..3)],
            background: backgrounds[rng.gen_range(0..3)],
            garment_colors: (c1, c2),
            skin: [rng.gen_range(0.2..0.7), rng.gen_range(-0.1..0.3), rng.gen_range(-0.4..0.0)],
            background_color: color(&mut rng),
        }
    }

    /// Torso centre at frame `t`.
    pub fn center(&self, t: usize) -> (f64, f64) {
        let w = 2.0 * PI * self.frequency * t as f64 + self.phase;
        (
            self.width as f64 / 2.0 + self.amplitude.0 * w.sin(),
            self.height as f64 / 2.0 + self.amplitude.1 * (2.0 * w).sin(),
        )
    }

    pub fn angle(&self, t: usize) -> f64 {
        let w = 2.0 * PI * self.frequency * t as f64 + self.phase;
        self.rotation * (w + 0.5).sin()
    }

    /// Garment rectangle half extents, inscribed in the torso ellipse.
    pub fn garment_half(&self) -> (f64, f64) {
        (0.6 * self.torso.0, 0.6 * self.torso.1)
    }

    fn arm_box(&self) -> (f64, f64, f64, f64) {
        // centre offset (u, v) of the right arm and its half extents
        let (rx, ry) = self.torso;
        (rx + 0.18 * rx, -0.1 * ry, 0.22 * rx, 0.75 * ry)
    }

    /// Largest distance from the torso centre to any figure pixel.
    pub fn figure_radius(&self) -> f64 {
        let (rx, ry) = self.torso;
        let head = ry + 0.8 * self.head_radius + self.head_radius;
        let (au, av, ahu, ahv) = self.arm_box();
        let arm = ((au + ahu).powi(2) + (av.abs() + ahv).powi(2)).sqrt();
        head.max(arm).max(rx).max(ry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.total_frames == 0 {
            return Err(Error::Data(format!(
                "scene canvas {}×{} must be divisible by 8 with at least one frame",
                self.height, self.width
            )));
        }
        let r = self.figure_radius();
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        if cx - self.amplitude.0 - r < 0.0
            || cx + self.amplitude.0 + r > self.width as f64
            || cy - self.amplitude.1 - r < 0.0
            || cy + self.amplitude.1 + r > self.height as f64
        {
            return Err(Error::Data(format!("figure of radius {r:.1}px leaves the {}×{} frame", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Background,
    Head,
    Torso,
    LeftArm,
    RightArm,
}

impl Part {
    fn pose_color(self) -> [f32; 3] {
        match self {
            Part::Background => [-1.0, -1.0, -1.0],
            Part::Head => [1.0, -1.0, -1.0],
            Part::Torso => [-1.0, 1.0, -1.0],
            Part::LeftArm => [-1.0, -1.0, 1.0],
            Part::RightArm => [1.0, 1.0, -1.0],
        }
    }
}

const GLYPHS: [[u8; 7]; 2] = [
    // V
    [0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b01010, 0b00100],
    // T
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
];

/// Texture colour at normalised garment coordinates `(s, t) ∈ [0,1]²`.
fn garment_texel(spec: &SyntheticSceneSpec, s: f64, t: f64) -> [f32; 3] {
    let (a, b) = spec.garment_colors;
    let second = match spec.texture {
        GarmentTexture::Stripes => ((s * 6.0).floor() as i64) % 2 == 1,
        GarmentTexture::Checker => ((s * 4.0).floor() as i64 + (t * 4.0).floor() as i64) % 2 == 1,
        GarmentTexture::Glyph => {
            // two 5×7 letters side by side with a one-cell margin
            let gx = (s * 13.0).floor() as i64 - 1;
            let gy = (t * 9.0).floor() as i64 - 1;
            if !(0..7).contains(&gy) || gx < 0 {
                false
            } else {
                let (letter, col) = ((gx / 6) as usize, gx % 6);
                letter < 2 && col < 5 && (GLYPHS[letter][gy as usize] >> (4 - col)) & 1 == 1
            }
        }
    };
    if second {
        b
    } else {
        a
    }
}

fn background(spec: &SyntheticSceneSpec, x: f64, y: f64) -> [f32; 3] {
    let c = spec.background_color;
    match spec.background {
        BackgroundPattern::Plain => c,
        BackgroundPattern::Gradient => {
            let g = (y / spec.height as f64 - 0.5) as f32 * 0.6;
            [(c[0] + g).clamp(-1.0, 1.0), (c[1] + g).clamp(-1.0, 1.0), (c[2] - g).clamp(-1.0, 1.0)]
        }
        BackgroundPattern::Dots => {
            let (u, v) = ((x / 8.0).fract() - 0.5, (y / 8.0).fract() - 0.5);
            if u * u + v * v < 0.04 {
                [-c[0] * 0.5, -c[1] * 0.5, -c[2] * 0.5]
            } else {
                c
            }
        }
    }
}

/// A rendered scene: all frames with their garment masks and pose maps.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub spec: SyntheticSceneSpec,
    /// `F × H × W × 3`.
    pub frames: Tensor,
    /// `F × H × W × 1` garment parsing mask in `{0, 1}`.
    pub garment_mask: Tensor,
    /// `F × H × W × 1` figure silhouette in `{0, 1}`.
    pub silhouette: Tensor,
    /// `F × H × W × 3` colour-coded part map.
    pub pose: Tensor,
    /// `1 × H × W × 3` in-shop garment image.
    pub garment_image: Tensor,
}

pub fn render_scene(spec: &SyntheticSceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let (h, w, n) = (spec.height, spec.width, spec.total_frames);
    let mut frames = Vec::with_capacity(n * h * w * 3);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut sil = Vec::with_capacity(n * h * w);
    let mut pose = Vec::with_capacity(n * h * w * 3);
    let (rx, ry) = spec.torso;
    let (gw, gh) = spec.garment_half();
    let (au, av, ahu, ahv) = spec.arm_box();
    let head = (0.0, -ry - 0.8 * spec.head_radius);
    for t in 0..n {
        let (cx, cy) = spec.center(t);
        let (sin, cos) = spec.angle(t).sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // world → figure-local coordinates
                let u = cos * px + sin * py;
                let v = -sin * px + cos * py;
                let in_garment = u.abs() <= gw && v.abs() <= gh;
                let part = if in_garment || (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    Part::Torso
                } else if (u - head.0).powi(2) + (v - head.1).powi(2) <= spec.head_radius.powi(2) {
                    Part::Head
                } else if (u - au).abs() <= ahu && (v - av).abs() <= ahv {
                    Part::RightArm
                } else if (u + au).abs() <= ahu && (v - av).abs() <= ahv {
                    Part::LeftArm
                } else {
                    Part::Background
                };
                let rgb = if in_garment {
                    garment_texel(spec, (u + gw) / (2.0 * gw), (v + gh) / (2.0 * gh))
                } else if part == Part::Background {
                    background(spec, x as f64, y as f64)
                } else {
                    spec.skin
                };
                frames.extend(rgb);
                pose.extend(part.pose_color());
                masks.push(if in_garment { 1f32 } else { 0.0 });
                sil.push(if part == Part::Background { 0f32 } else { 1.0 });
            }
        }
    }
    // garment image: flat, upright and centred on a white canvas
    let mut garment = Vec::with_capacity(h * w * 3);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if u.abs() <= gw && v.abs() <= gh {
                garment.extend(garment_texel(spec, (u + gw) / (2.0 * gw), (v + gh) / (2.0 * gh)));
            } else {
                garment.extend([1f32; 3]);
            }
        }
    }
    let dev = Device::Cpu;
    Ok(RenderedScene {
        spec: spec.clone(),
        frames: Tensor::from_vec(frames, (n, h, w, 3), &dev)?,
        garment_mask: Tensor::from_vec(masks, (n, h, w, 1), &dev)?,
        silhouette: Tensor::from_vec(sil, (n, h, w, 1), &dev)?,
        pose: Tensor::from_vec(pose, (n, h, w, 3), &dev)?,
        garment_image: Tensor::from_vec(garment, (1, h, w, 3), &dev)?,
    })
}

/// Binary dilation with a disk of the given radius. `mask` is `H × W`.
pub fn dilate(mask: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as i64;
    let mut out = vec![0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 && mask[(sy * w as i64 + sx) as usize] > 0.5 {
                        out[(y * w as i64 + x) as usize] = 1.0;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Neutralises the dilated garment region of one frame.
///
/// `frame` is `H × W × 3`, `garment_mask` is `H × W × 1`; returns the
/// agnostic frame and the inpainting mask, both with the input layouts.
pub fn derive_agnostic(frame: &Tensor, garment_mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = frame.dims3()?;
    if garment_mask.dims() != [h, w, 1] || c != 3 {
        return shape_err(format!("frame {:?} and mask {:?} disagree", frame.dims(), garment_mask.dims()));
    }
    let m: Vec<f32> = garment_mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let dilated = dilate(&m, h, w, DILATION_RADIUS);
    let mut px: Vec<f32> = frame.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    for (i, d) in dilated.iter().enumerate() {
        if *d > 0.5 {
            px[3 * i..3 * i + 3].fill(NEUTRAL);
        }
    }
    let dev = frame.device();
    Ok((Tensor::from_vec(px, (h, w, 3), dev)?, Tensor::from_vec(dilated, (h, w, 1), dev)?))
}

/// The try-on four-tuple for a clip.
#[derive(Debug, Clone)]
pub struct ConditioningTuple {
    /// `f × H × W × 3`.
    pub agnostic: Tensor,
    /// `f × H × W × 3`.
    pub pose: Tensor,
    /// `f × H × W × 1`.
    pub mask: Tensor,
    /// `1 × H × W × 3`.
    pub garment: Tensor,
}

impl ConditioningTuple {
    pub fn frames(&self) -> usize {
        self.agnostic.dims()[0]
    }
}

impl RenderedScene {
    pub fn total_frames(&self) -> usize {
        self.spec.total_frames
    }

    pub fn select(&self, t: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        Ok(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?)
    }

    /// Conditioning tuple for the given frame indices.
    pub fn tuple(&self, indices: &[usize]) -> Result<ConditioningTuple> {
        let mut agn = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            let (a, m) = derive_agnostic(&self.frames.get(i)?, &self.garment_mask.get(i)?)?;
            agn.push(a);
            masks.push(m);
        }
        Ok(ConditioningTuple {
            agnostic: Tensor::stack(&agn, 0)?,
            pose: self.select(&self.pose, indices)?,
            mask: Tensor::stack(&masks, 0)?,
            garment: self.garment_image.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClipSample {
    pub frames: VideoTensor,
    pub cond: ConditioningTuple,
    pub stride: usize,
    pub start: usize,
    pub indices: Vec<usize>,
}

pub fn clip_indices(start: usize, stride: usize, f: usize) -> Vec<usize> {
    (0..f).map(|i| start + i * stride).collect()
}

/// Draws a stride uniformly from `stride_range` (inclusive) and a start so
/// the whole clip fits in the scene.
pub fn sample_stride_clip(
    scene: &RenderedScene,
    f: usize,
    stride_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample> {
    let (stride, start) = draw_stride_start(scene.total_frames(), f, stride_range, rng)?;
    let indices = clip_indices(start, stride, f);
    Ok(ClipSample {
        frames: VideoTensor::new(scene.select(&scene.frames, &indices)?, 8.0)?,
        cond: scene.tuple(&indices)?,
        stride,
        start,
        indices,
    })
}

/// The `(stride, start)` draw behind [`sample_stride_clip`].
pub fn draw_stride_start(
    total: usize,
    f: usize,
    stride_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let (lo, hi) = stride_range;
    if f == 0 || lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid clip request f={f}, strides {lo}..={hi}")));
    }
    if total < hi * (f - 1) + 1 {
        return Err(Error::Data(format!(
            "scene of {total} frames too short for {f} frames at stride {hi}"
        )));
    }
    let stride = rng.gen_range(lo..=hi);
    let start = rng.gen_range(0..=total - 1 - stride * (f - 1));
    Ok((stride, start))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwapPattern {
    #[default]
    Scattered,
    Contiguous,
}

/// Chooses `k` distinct frame positions out of `f`.
pub fn choose_swap_indices(f: usize, k: usize, pattern: SwapPattern, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > f {
        return Err(Error::Config(format!("cannot swap {k} of {f} frames")));
    }
    let mut idx = match pattern {
        SwapPattern::Scattered => sample_indices(rng, f, k).into_vec(),
        SwapPattern::Contiguous => {
            if k == 0 {
                Vec::new()
            } else {
                let start = rng.gen_range(0..=f - k);
                (start..start + k).collect()
            }
        }
    };
    idx.sort_unstable();
    Ok(idx)
}

/// Result of the random agnostic swap.
#[derive(Debug, Clone)]
pub struct SwappedCondition {
    /// ControlNet-side tuple: at the swapped frames the agnostic frame is the
    /// ground truth and the mask is zero.
    pub control: ConditioningTuple,
    /// Untouched tuple for the denoiser side.
    pub original: ConditioningTuple,
    pub swapped: Vec<usize>,
}

pub fn random_swap(
    clip: &ClipSample,
    k: usize,
    pattern: SwapPattern,
    rng: &mut ChaCha8Rng,
) -> Result<SwappedCondition> {
    let f = clip.cond.frames();
    let swapped = choose_swap_indices(f, k, pattern, rng)?;
    let mut agn = Vec::with_capacity(f);
    let mut masks = Vec::with_capacity(f);
    for i in 0..f {
        if swapped.binary_search(&i).is_ok() {
            agn.push(clip.frames.data.get(i)?);
            masks.push(clip.cond.mask.get(i)?.zeros_like()?);
        } else {
            agn.push(clip.cond.agnostic.get(i)?);
            masks.push(clip.cond.mask.get(i)?);
        }
    }
    let control = ConditioningTuple {
        agnostic: Tensor::stack(&agn, 0)?,
        pose: clip.cond.pose.clone(),
        mask: Tensor::stack(&masks, 0)?,
        garment: clip.cond.garment.clone(),
    };
    Ok(SwappedCondition { control, original: clip.cond.clone(), swapped })
}

fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let m = x.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Rotates by `angle` radians and scales isotropically about the image
/// centre, with bilinear sampling and reflected borders. `img` is
/// `1 × H × W × 3` (or `H × W × 3`); the canvas size is preserved.
pub fn augment_with(img: &Tensor, angle: f64, scale: f64) -> Result<Tensor> {
    let dims = img.dims().to_vec();
    let (h, w) = match dims.as_slice() {
        [1, h, w, 3] | [h, w, 3] => (*h, *w),
        _ => return shape_err(format!("garment image must be H×W×3, got {dims:?}")),
    };
    if h == 0 || w == 0 {
        return shape_err("empty garment image");
    }
    let src: Vec<f32> = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let (sin, cos) = angle.sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse map into the source, in pixel-index coordinates
            let sx = reflect((cos * dx + sin * dy) / scale + cx - 0.5, w);
            let sy = reflect((-sin * dx + cos * dy) / scale + cy - 0.5, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_vec(out, dims, img.device())?)
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

/// Random rotation in ±15° and isotropic resize in [0.8, 1.2].
pub fn augment_garment(img: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    augment_with(img, angle, scale)
}
