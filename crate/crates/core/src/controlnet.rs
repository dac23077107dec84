//! Identity-preservation control branch: a trainable copy of the denoiser's
//! front half, bracketed by zero-initialised linear layers.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Linear, VarMap};

use crate::codec::{Codec, DOWNSAMPLE, LATENT_CHANNELS};
use crate::data::ConditioningTuple;
use crate::dit::block::StDitBlock;
use crate::dit::embed::sincos_2d;
use crate::dit::{Denoiser, StepConditioning};
use crate::error::{shape_err, Error, Result};
use crate::garment::GarmentFeatureSet;
use crate::params::{get_var, param_names, Init, ParamBuilder};
use crate::tokens::to_patches;

pub const CONTROL_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

/// `f × h × w × 9` latent laid out as `[z_a | z_p | m_c]`.
#[derive(Debug, Clone)]
pub struct ControlInput {
    pub data: Tensor,
}

impl ControlInput {
    pub fn from_parts(agnostic: &Tensor, pose: &Tensor, mask: &Tensor) -> Result<Self> {
        let (fa, ha, wa, ca) = agnostic.dims4()?;
        let (fp, hp, wp, cp) = pose.dims4()?;
        let (fm, hm, wm, cm) = mask.dims4()?;
        if (fa, ha, wa) != (fp, hp, wp) || (fa, ha, wa) != (fm, hm, wm) {
            return shape_err(format!(
                "control parts disagree: {:?} {:?} {:?}",
                agnostic.dims(),
                pose.dims(),
                mask.dims()
            ));
        }
        if ca != LATENT_CHANNELS || cp != LATENT_CHANNELS || cm != 1 {
            return shape_err(format!("control channel layout must be 4+4+1, got {ca}+{cp}+{cm}"));
        }
        let mask = mask.to_dtype(agnostic.dtype())?;
        Ok(Self { data: Tensor::cat(&[agnostic, &pose.to_dtype(agnostic.dtype())?, &mask], 3)? })
    }

    pub fn mask(&self) -> Result<Tensor> {
        Ok(self.data.narrow(3, 2 * LATENT_CHANNELS, 1)?)
    }
}

/// Nearest-neighbour downsampling of a pixel mask `f × H × W × 1` by 8,
/// sampling the pixel at the centre of each block.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let (f, h, w, c) = mask.dims4()?;
    if c != 1 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return shape_err(format!("mask {:?} must be f×H×W×1 with H, W divisible by 8", mask.dims()));
    }
    let k = DOWNSAMPLE;
    let blocks = mask.reshape((f, h / k, k, w / k, k))?;
    Ok(blocks.narrow(2, k / 2, 1)?.narrow(4, k / 2, 1)?.reshape((f, h / k, w / k, 1))?)
}

/// Encodes the agnostic and pose videos and appends the resized mask.
pub fn build_control_input(cond: &ConditioningTuple, codec: &Codec) -> Result<ControlInput> {
    let a = cond.agnostic.dims();
    if a != cond.pose.dims() || a[..3] != cond.mask.dims()[..3] {
        return shape_err(format!(
            "tuple members disagree: x_a {:?}, d_p {:?}, m_c {:?}",
            a,
            cond.pose.dims(),
            cond.mask.dims()
        ));
    }
    let za = codec.encode_tensor(&cond.agnostic)?;
    let zp = codec.encode_tensor(&cond.pose)?;
    ControlInput::from_parts(&za, &zp, &downsample_mask(&cond.mask)?)
}

/// `N/2` residuals, each `f × s × d`.
#[derive(Debug, Clone)]
pub struct ControlResidualSet {
    pub residuals: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct IdControlNet {
    pub control_in: Linear,
    pub blocks: Vec<StDitBlock>,
    pub zero_out: Vec<Linear>,
    pub patch_size: usize,
    pub hidden: usize,
    /// Add the noisy latent tokens to the control tokens at the branch input.
    pub include_noisy_input: bool,
}

impl IdControlNet {
    /// Builds the branch under `pb`'s prefix and copies the denoiser's front
    /// half into it by value. Both networks must live in `varmap`.
    pub fn init_from_denoiser(
        pb: &ParamBuilder,
        varmap: &VarMap,
        denoiser_prefix: &str,
        denoiser: &Denoiser,
        include_noisy_input: bool,
    ) -> Result<Self> {
        let cfg = denoiser.cfg;
        if cfg.depth % 2 != 0 {
            return Err(Error::Config(format!("cannot mirror half of {} blocks", cfg.depth)));
        }
        let half = cfg.depth / 2;
        let d = cfg.hidden;
        let control_in = pb.linear(cfg.patch_dim(CONTROL_CHANNELS), d, "control_in", Init::Zeros)?;
        let blocks = (0..half)
            .map(|i| StDitBlock::new(&pb.pp(format!("blocks.{i}")), cfg.block(true, true, true)))
            .collect::<Result<Vec<_>>>()?;
        let zero_out = (0..half)
            .map(|i| pb.pp("zero_out").linear(d, d, &i.to_string(), Init::Zeros))
            .collect::<Result<Vec<_>>>()?;
        let net = Self { control_in, blocks, zero_out, patch_size: cfg.patch_size, hidden: d, include_noisy_input };
        net.copy_blocks_from(varmap, denoiser_prefix, pb.prefix())?;
        Ok(net)
    }

    fn copy_blocks_from(&self, varmap: &VarMap, src: &str, dst: &str) -> Result<()> {
        for name in param_names(varmap) {
            let Some(rest) = name.strip_prefix(&format!("{dst}.blocks.")) else { continue };
            let source = get_var(varmap, &format!("{src}.blocks.{rest}"))?;
            let target = get_var(varmap, &name)?;
            target.set(&source.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// `noisy_tokens` are the denoiser's embedded input tokens (`f × s × d`).
    pub fn forward(
        &self,
        control: &ControlInput,
        noisy_tokens: &Tensor,
        cond: &StepConditioning,
        garment: &GarmentFeatureSet,
    ) -> Result<ControlResidualSet> {
        if garment.features.len() < self.blocks.len() {
            return Err(Error::Config(format!(
                "control branch needs {} garment features, got {}",
                self.blocks.len(),
                garment.features.len()
            )));
        }
        let (_, h, w, _) = control.data.dims4()?;
        let control_data = control.data.to_dtype(noisy_tokens.dtype())?;
        let ctrl = self.control_in.forward(&to_patches(&control_data, self.patch_size)?)?;
        if ctrl.dims() != noisy_tokens.dims() {
            return shape_err(format!(
                "control tokens {:?} do not match noisy tokens {:?}",
                ctrl.dims(),
                noisy_tokens.dims()
            ));
        }
        let mut x = if self.include_noisy_input {
            (noisy_tokens + ctrl)?
        } else {
            let p = self.patch_size;
            let pos = sincos_2d(h / p, w / p, self.hidden, ctrl.dtype(), ctrl.device())?;
            ctrl.broadcast_add(&pos)?
        };
        let ctx = cond.context();
        let mut residuals = Vec::with_capacity(self.blocks.len());
        for (i, (block, out)) in self.blocks.iter().zip(&self.zero_out).enumerate() {
            x = block.forward(&x, &ctx, Some(&garment.features[i]))?;
            residuals.push(out.forward(&x)?);
        }
        Ok(ControlResidualSet { residuals })
    }
}

/// All-zero control latent with a full mask, used when a frame carries no
/// identity information.
pub fn full_mask_control(frames: usize, h: usize, w: usize, dtype: DType, device: &candle_core::Device) -> Result<ControlInput> {
    let z = Tensor::zeros((frames, h, w, LATENT_CHANNELS), dtype, device)?;
    let m = Tensor::ones((frames, h, w, 1), dtype, device)?;
    ControlInput::from_parts(&z, &z, &m)
}
