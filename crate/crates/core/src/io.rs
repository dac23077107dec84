//! Array persistence: an `.npy` file plus a JSON sidecar manifest.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f32>,
    pub value_range: (f32, f32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn sidecar(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

/// Writes `tensor` to `path` (an `.npy` file) and its manifest next to it.
pub fn write_array(
    path: &Path,
    tensor: &Tensor,
    fps: Option<f32>,
    value_range: (f32, f32),
    config_hash: Option<&str>,
) -> Result<ArrayManifest> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    tensor.write_npy(path)?;
    let manifest = ArrayManifest {
        shape: tensor.dims().to_vec(),
        dtype: format!("{:?}", tensor.dtype()).to_lowercase(),
        fps,
        value_range,
        config_hash: config_hash.map(str::to_owned),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_array(path: &Path) -> Result<(Tensor, ArrayManifest)> {
    let manifest: ArrayManifest = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let tensor = Tensor::read_npy(path)?.to_device(&Device::Cpu)?;
    if tensor.dims() != manifest.shape.as_slice() {
        return Err(Error::Data(format!(
            "{}: array shape {:?} disagrees with manifest {:?}",
            path.display(),
            tensor.dims(),
            manifest.shape
        )));
    }
    Ok((tensor, manifest))
}

/// Writes a file through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves frames `f×H×W×3` in `[-1,1]` as numbered PNG files for inspection.
pub fn export_frames(dir: &Path, frames: &Tensor) -> Result<()> {
    let (f, h, w, _) = frames.dims4()?;
    fs::create_dir_all(dir)?;
    let data: Vec<f32> = frames.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    for i in 0..f {
        let start = i * h * w * 3;
        let bytes: Vec<u8> = data[start..start + h * w * 3]
            .iter()
            .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
            .collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Data("frame buffer size mismatch".into()))?;
        img.save(dir.join(format!("frame_{i:04}.png")))
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}
