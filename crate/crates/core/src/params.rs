//! Seeded parameter creation. Every tensor is registered in a shared
//! [`VarMap`] under a dotted name such as `denoiser.blocks.3.tsa.q.weight`;
//! freeze maps and checkpoints are expressed over these names.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarMap};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// `U(−1/√fan_in, 1/√fan_in)`.
    Uniform,
}

pub struct ParamBuilder<'a> {
    varmap: &'a VarMap,
    rng: &'a RefCell<ChaCha8Rng>,
    prefix: String,
    pub dtype: DType,
    pub device: Device,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(varmap: &'a VarMap, rng: &'a RefCell<ChaCha8Rng>, dtype: DType, device: &Device) -> Self {
        Self { varmap, rng, prefix: String::new(), dtype, device: device.clone() }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn pp(&self, name: impl AsRef<str>) -> ParamBuilder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_owned()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { varmap: self.varmap, rng: self.rng, prefix, dtype: self.dtype, device: self.device.clone() }
    }

    pub fn tensor(&self, shape: &[usize], name: &str, init: Init, fan_in: usize) -> Result<Tensor> {
        let full = format!("{}.{}", self.prefix, name);
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut *rng);
                    std * v
                })
                .collect(),
            Init::Uniform => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut data = self.varmap.data().lock().unwrap();
        if data.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter name {full}")));
        }
        let out = var.as_tensor().clone();
        data.insert(full, var);
        Ok(out)
    }

    pub fn linear(&self, in_dim: usize, out_dim: usize, name: &str, init: Init) -> Result<Linear> {
        let p = self.pp(name);
        let w = p.tensor(&[out_dim, in_dim], "weight", init, in_dim)?;
        let b = p.tensor(&[out_dim], "bias", Init::Zeros, in_dim)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(&self, cin: usize, cout: usize, k: usize, cfg: Conv2dConfig, name: &str) -> Result<Conv2d> {
        let p = self.pp(name);
        let fan_in = cin * k * k;
        let w = p.tensor(&[cout, cin, k, k], "weight", Init::Uniform, fan_in)?;
        let b = p.tensor(&[cout], "bias", Init::Zeros, fan_in)?;
        Ok(Conv2d::new(w, Some(b), cfg))
    }
}

/// Glob match with `*` as the only wildcard (matching any run of characters,
/// dots included).
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    true
}

/// Sorted parameter names of a var map.
pub fn param_names(varmap: &VarMap) -> Vec<String> {
    let mut names: Vec<String> = varmap.data().lock().unwrap().keys().cloned().collect();
    names.sort();
    names
}

pub fn get_var(varmap: &VarMap, name: &str) -> Result<Var> {
    varmap
        .data()
        .lock()
        .unwrap()
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
}

/// Overwrites every parameter whose name matches `pattern` with zeros and
/// returns how many tensors were touched.
pub fn zero_params(varmap: &VarMap, pattern: &str) -> Result<usize> {
    let data = varmap.data().lock().unwrap();
    let mut n = 0;
    for (name, var) in data.iter() {
        if glob_match(pattern, name) {
            var.set(&var.as_tensor().zeros_like()?)?;
            n += 1;
        }
    }
    Ok(n)
}
