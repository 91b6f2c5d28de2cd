use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tinerf_core::config::{version_string, RunConfig};
use tinerf_core::dataset::{load_dataset, synthesize, write_dataset, SceneDataset, Split};
use tinerf_core::imageio::Image;
use tinerf_core::metrics;
use tinerf_core::model::Model;
use tinerf_core::scene::preset;
use tinerf_core::train::{self, TrainOutput};

fn err(e: tinerf_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(text) => RunConfig::from_toml(text, &PathBuf::from("<python>")).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

fn rgb_image(width: usize, height: usize, data: Vec<f64>) -> PyResult<Image> {
    if data.len() != width * height * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {width}x{height} RGB image, got {}",
            width * height * 3,
            data.len()
        )));
    }
    Ok(Image { width, height, channels: 3, data })
}

/// Posed frames of a dynamic scene.
#[pyclass(name = "Dataset", module = "tinerf")]
struct PyDataset(SceneDataset);

#[pymethods]
impl PyDataset {
    /// Loads a split (`train`, `val` or `test`) from a dataset directory.
    #[staticmethod]
    fn load(dir: PathBuf, split: &str) -> PyResult<Self> {
        let split = Split::parse(split).map_err(err)?;
        load_dataset(&dir, split).map(Self).map_err(err)
    }

    /// Renders a built-in scene. `config` is a TOML document whose `[synth]`
    /// table overrides the defaults. Returns `(train, test)`.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthesize(config: Option<&str>) -> PyResult<(Self, Self)> {
        let cfg = run_config(config)?.synth;
        let scene = preset(&cfg.scene)
            .ok_or_else(|| PyValueError::new_err(format!("unknown scene `{}`", cfg.scene)))?;
        let (a, b) = synthesize(&scene, &cfg).map_err(err)?;
        Ok((Self(a), Self(b)))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        write_dataset(&dir, &self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.frames.len()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.0.focal
    }

    #[getter]
    fn near(&self) -> f64 {
        self.0.near
    }

    #[getter]
    fn far(&self) -> f64 {
        self.0.far
    }

    fn frame_times(&self) -> Vec<f64> {
        self.0.frame_times()
    }

    fn time(&self, index: usize) -> PyResult<f64> {
        self.frame(index).map(|f| f.time)
    }

    /// Row-major 4x4 camera-to-world matrix of frame `index`.
    fn pose(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let pose = self.frame(index)?.pose;
        Ok(pose.iter().map(|row| row.to_vec()).collect())
    }

    /// Ground-truth image of frame `index` as flat RGB values in `[0, 1]`.
    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        let f = self.frame(index)?;
        Ok(f.image.over([1.0; 3]).data)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(split={}, frames={}, {}x{})",
            self.0.split.name(),
            self.0.frames.len(),
            self.0.width,
            self.0.height
        )
    }
}

impl PyDataset {
    fn frame(&self, index: usize) -> PyResult<&tinerf_core::dataset::Frame> {
        self.0
            .frames
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("frame {index} out of range")))
    }
}

/// A trainable dynamic radiance field.
#[pyclass(name = "Model", module = "tinerf")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    /// Builds a freshly initialised model for `dataset`. `config` is a TOML
    /// document whose `[model]` table overrides the defaults.
    #[new]
    #[pyo3(signature = (dataset, config=None, seed=0))]
    fn new(dataset: &PyDataset, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Model::new(cfg.model, dataset.0.aabb, dataset.0.frame_times(), seed)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Model::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn representation(&self) -> String {
        self.0.representation().to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.tape().len()
    }

    /// Renders frame `index` of `dataset` from its camera and time. Returns
    /// flat RGB values.
    fn render(&self, py: Python<'_>, dataset: &PyDataset, index: usize) -> PyResult<Vec<f64>> {
        let f = dataset.frame(index)?;
        let camera = dataset.0.camera(index);
        let (t, near, far) = (f.time, dataset.0.near, dataset.0.far);
        let img = py.detach(|| self.0.render_image(&camera, t, near, far)).map_err(err)?;
        Ok(img.data)
    }

    /// Volume density at each point and time.
    fn density(&self, points: Vec<[f64; 3]>, times: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.density_at(&points, &times).map_err(err)
    }

    /// Trains in place. `config` is a TOML document whose `[train]` table
    /// overrides the defaults. Returns a summary dict.
    #[pyo3(signature = (train_set, eval_set=None, config=None, out=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_set: &PyDataset,
        eval_set: Option<&PyDataset>,
        config: Option<&str>,
        out: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = run_config(config)?;
        let output = out.map(|dir| TrainOutput { dir, write_snapshots: false });
        let model = &mut self.0;
        let report = py
            .detach(|| train::train(model, &train_set.0, eval_set.map(|d| &d.0), &cfg.train, output.as_ref()))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("iterations", report.iterations)?;
        d.set_item("color_loss", report.final_color_loss)?;
        d.set_item("smooth_loss", report.final_smooth_loss)?;
        d.set_item("eval_psnr", report.last_eval_psnr)?;
        d.set_item("eval_ssim", report.last_eval_ssim)?;
        d.set_item("rejected_steps", report.rejected_steps)?;
        d.set_item("seconds", report.seconds)?;
        Ok(d)
    }

    /// Mean PSNR and SSIM over the first `max_views` frames (0 for all).
    #[pyo3(signature = (dataset, max_views=0))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, max_views: usize) -> PyResult<(f64, f64)> {
        let (m, _) = py.detach(|| train::evaluate(&self.0, &dataset.0, max_views)).map_err(err)?;
        Ok((train::mean_psnr(&m), train::mean_ssim(&m)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(representation={}, parameters={})",
            self.0.representation(),
            self.0.tape().len()
        )
    }
}

/// PSNR between two flat RGB images in `[0, 1]`.
#[pyfunction]
fn psnr(width: usize, height: usize, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::psnr(&rgb_image(width, height, a)?, &rgb_image(width, height, b)?).map_err(err)
}

/// Mean SSIM between two flat RGB images in `[0, 1]`.
#[pyfunction]
fn ssim(width: usize, height: usize, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::ssim(&rgb_image(width, height, a)?, &rgb_image(width, height, b)?).map_err(err)
}

#[pyfunction]
fn version() -> String {
    version_string()
}

#[pymodule]
fn tinerf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
