//! Python bindings for the schedule, IAR planning, metrics and synthetic
//! scene rendering. Arrays cross the boundary as flat `list[float]` plus a
//! shape tuple; images are `H × W × C` in `[-1, 1]`, clips `F × H × W × C`.

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vitondit::data::{render_scene as render, SyntheticSceneSpec};
use vitondit::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use vitondit::iar::{self, IarPlan};
use vitondit::metrics::{self, FeatureExtractor};
use vitondit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Config(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(values: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor> {
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(PyValueError::new_err(format!("{} values do not fill shape {:?}", values.len(), shape)));
    }
    Tensor::from_vec(values, shape, &Device::Cpu).map_err(|e| py_err(e.into()))
}

fn flat(t: &Tensor) -> PyResult<(Vec<f32>, Vec<usize>)> {
    let v = t.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(|e| py_err(e.into()))?;
    Ok((v, t.dims().to_vec()))
}

/// Linear-beta DDPM schedule.
#[pyclass(name = "Schedule", module = "vitondit_py", frozen)]
struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = make_schedule(steps, ScheduleKind::Linear { beta_start, beta_end }).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn alpha_bar(&self) -> Vec<f64> {
        self.inner.alpha_bar.clone()
    }

    #[getter]
    fn sigma(&self) -> Vec<f64> {
        self.inner.sigma.clone()
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·noise` for a 1-based step `t`.
    fn q_sample(&self, z0: Vec<f32>, noise: Vec<f32>, shape: Vec<usize>, t: usize) -> PyResult<Vec<f32>> {
        let z0 = tensor(z0, shape.clone())?;
        let noise = tensor(noise, shape)?;
        let out = vitondit::diffusion::q_sample(&z0, t, &noise, &self.inner).map_err(py_err)?;
        Ok(flat(&out)?.0)
    }
}

/// Key-frame and window schedule for long-video generation.
#[pyclass(name = "IarPlan", module = "vitondit_py", frozen)]
struct PyIarPlan {
    inner: IarPlan,
}

#[pymethods]
impl PyIarPlan {
    #[getter]
    fn keyframes(&self) -> Vec<usize> {
        self.inner.keyframe_indices.clone()
    }

    /// `(start, end, tags)` per pass; tags use `K` key frame, `P` previous
    /// output and `A` generated.
    #[getter]
    fn windows(&self) -> Vec<(usize, usize, String)> {
        self.inner
            .iterations
            .iter()
            .map(|w| (w.start, w.end, w.tags.iter().map(|t| t.to_string()).collect()))
            .collect()
    }

    fn passes(&self) -> usize {
        self.inner.passes()
    }

    fn table(&self) -> String {
        self.inner.table()
    }

    fn __repr__(&self) -> String {
        format!(
            "IarPlan(frames={}, subvideos={}, window={}, overlap={}, passes={})",
            self.inner.frames,
            self.inner.subvideos,
            self.inner.window,
            self.inner.overlap,
            self.inner.passes()
        )
    }
}

#[pyfunction]
fn plan_iar(frames: usize, subvideos: usize, window: usize, overlap: usize) -> PyResult<PyIarPlan> {
    let inner = iar::plan(frames, subvideos, window, overlap).map_err(py_err)?;
    Ok(PyIarPlan { inner })
}

/// SSIM of two `H × W × C` images in `[-1, 1]`.
#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let a = tensor(a, shape.clone())?;
    let b = tensor(b, shape)?;
    metrics::ssim(&a, &b).map_err(py_err)
}

/// Fréchet distance between Gaussian fits of two feature sets
/// (rows are samples).
#[pyfunction]
fn frechet_distance(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    let s1 = metrics::gaussian_stats(&real).map_err(py_err)?;
    let s2 = metrics::gaussian_stats(&generated).map_err(py_err)?;
    metrics::frechet_distance(&s1, &s2).map_err(py_err)
}

/// Feature extractor parsed from `linear:<seed>`, `random2d:<seed>` or
/// `random3d:<seed>`.
#[pyclass(name = "FeatureExtractor", module = "vitondit_py", frozen)]
struct PyFeatureExtractor {
    inner: FeatureExtractor,
}

#[pymethods]
impl PyFeatureExtractor {
    #[new]
    fn new(id: &str) -> PyResult<Self> {
        let inner = id.parse().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, x: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let x = tensor(x, shape)?;
        self.inner.embed(&x).map_err(py_err)
    }

    fn perceptual_distance(&self, a: Vec<f32>, b: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
        let a = tensor(a, shape.clone())?;
        let b = tensor(b, shape)?;
        metrics::perceptual_distance(&a, &b, &self.inner).map_err(py_err)
    }

    /// VFID between two lists of `F × H × W × 3` clips sharing `shape`.
    fn vfid(&self, real: Vec<Vec<f32>>, generated: Vec<Vec<f32>>, shape: Vec<usize>) -> PyResult<f64> {
        let real = real.into_iter().map(|c| tensor(c, shape.clone())).collect::<PyResult<Vec<_>>>()?;
        let generated = generated.into_iter().map(|c| tensor(c, shape.clone())).collect::<PyResult<Vec<_>>>()?;
        metrics::vfid(&real, &generated, &self.inner).map_err(py_err)
    }
}

/// Renders a seeded synthetic scene. Returns a dict of `(values, shape)`
/// pairs for `frames`, `garment_mask`, `pose` and `garment_image`.
#[pyfunction]
#[pyo3(signature = (seed, height = 64, width = 64, frames = 24))]
fn render_scene(py: Python<'_>, seed: u64, height: usize, width: usize, frames: usize) -> PyResult<Py<PyAny>> {
    let spec = SyntheticSceneSpec::random(seed, height, width, frames);
    let scene = render(&spec).map_err(py_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("frames", flat(&scene.frames)?)?;
    out.set_item("garment_mask", flat(&scene.garment_mask)?)?;
    out.set_item("pose", flat(&scene.pose)?)?;
    out.set_item("garment_image", flat(&scene.garment_image)?)?;
    Ok(out.into_any().unbind())
}

#[pymodule]
fn vitondit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyIarPlan>()?;
    m.add_class::<PyFeatureExtractor>()?;
    m.add_function(wrap_pyfunction!(plan_iar, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    Ok(())
}
