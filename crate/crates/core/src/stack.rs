//! The three networks together: denoiser, garment extractor and control
//! branch, sharing one parameter store.

use std::cell::RefCell;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::condition::{ClipCondition, GarmentSource};
use crate::controlnet::{ControlInput, ControlResidualSet, IdControlNet};
use crate::diffusion::NoisePredictor;
use crate::dit::{Denoiser, DenoiserConfig, PromptEmbedding};
use crate::error::{Error, Result};
use crate::garment::{GarmentExtractor, GarmentFeatureSet};
use crate::params::{param_names, ParamBuilder};

pub const DENOISER: &str = "denoiser";
pub const EXTRACTOR: &str = "garment_extractor";
pub const CONTROLNET: &str = "controlnet";

pub struct ModelStack {
    pub varmap: VarMap,
    pub cfg: DenoiserConfig,
    pub denoiser: Denoiser,
    pub extractor: GarmentExtractor,
    pub controlnet: IdControlNet,
    pub prompt: PromptEmbedding,
    pub dtype: DType,
    pub device: Device,
}

impl ModelStack {
    pub fn new(cfg: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_options(cfg, seed, dtype, device, true)
    }

    /// `include_noisy_input = false` gives the control branch only the
    /// conditions, without the noisy latent tokens.
    pub fn with_options(
        cfg: DenoiserConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
        include_noisy_input: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let varmap = VarMap::new();
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        let pb = ParamBuilder::new(&varmap, &rng, dtype, device);
        let denoiser = Denoiser::new(&pb.pp(DENOISER), cfg)?;
        let extractor = GarmentExtractor::new(&pb.pp(EXTRACTOR), cfg)?;
        let controlnet =
            IdControlNet::init_from_denoiser(&pb.pp(CONTROLNET), &varmap, DENOISER, &denoiser, include_noisy_input)?;
        let prompt = PromptEmbedding::default_prompt(dtype, device)?;
        Ok(Self { varmap, cfg, denoiser, extractor, controlnet, prompt, dtype, device: device.clone() })
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(&self.varmap)
    }

    pub fn param_count(&self, pattern: &str) -> usize {
        let data = self.varmap.data().lock().unwrap();
        data.iter()
            .filter(|(n, _)| crate::params::glob_match(pattern, n))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn garment_features(&self, garment_latent: &Tensor) -> Result<GarmentFeatureSet> {
        self.extractor.extract(&garment_latent.to_dtype(self.dtype)?, &self.prompt.tokens)
    }

    fn resolve_garment(&self, source: Option<&GarmentSource>) -> Result<Arc<GarmentFeatureSet>> {
        match source {
            Some(GarmentSource::Latent(z)) => Ok(Arc::new(self.garment_features(z)?)),
            Some(GarmentSource::Features(f)) => Ok(f.clone()),
            None => Err(Error::Config("the try-on stack requires a garment".into())),
        }
    }

    /// Control residuals for a clip, or `None` without a control input.
    pub fn control_residuals(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ClipCondition,
        garment: &GarmentFeatureSet,
    ) -> Result<Option<ControlResidualSet>> {
        let Some(control) = &cond.control else { return Ok(None) };
        let emb = self.denoiser.embed(z_t)?;
        let step = self.denoiser.conditioning(t, &self.prompt.tokens, z_t.dims()[0], self.dtype, &self.device)?;
        let ctrl = ControlInput { data: control.to_dtype(self.dtype)? };
        Ok(Some(self.controlnet.forward(&ctrl, &emb.tokens, &step, garment)?))
    }

    /// Full forward that also reports which denoiser blocks received a
    /// control residual.
    pub fn forward_traced(&self, z_t: &Tensor, t: usize, cond: &ClipCondition) -> Result<(Tensor, Vec<bool>)> {
        let z_t = z_t.to_dtype(self.dtype)?;
        let garment = self.resolve_garment(cond.garment.as_ref())?;
        let frames = z_t.dims()[0];
        let emb = self.denoiser.embed(&z_t)?;
        let step = self.denoiser.conditioning(t, &self.prompt.tokens, frames, self.dtype, &self.device)?;
        let residuals = match &cond.control {
            Some(control) => {
                let ctrl = ControlInput { data: control.to_dtype(self.dtype)? };
                Some(self.controlnet.forward(&ctrl, &emb.tokens, &step, &garment)?.residuals)
            }
            None => None,
        };
        let (x, injected) = self.denoiser.run_blocks(&emb.tokens, &step, &garment, residuals.as_deref())?;
        Ok((self.denoiser.unembed(&x, &step, emb.grid)?, injected))
    }
}

impl NoisePredictor for ModelStack {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &ClipCondition) -> Result<Tensor> {
        Ok(self.forward_traced(z_t, t, cond)?.0)
    }
}
