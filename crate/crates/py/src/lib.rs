//! Python bindings: phantoms, fan-beam projection and FBP, noise
//! simulation, the diffusion schedule, metrics, trained-model
//! reconstruction and the property checks.
//!
//! Images cross the boundary as lists of rows of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptd_core::checkpoint::Checkpoint;
use ptd_core::dsb::DiffusionSchedule;
use ptd_core::fanbeam::{self, FanBeamGeometry};
use ptd_core::training::{self, SimConfig};
use ptd_core::{formats, metrics, phantoms, verify, PtdError};

fn py_err(e: PtdError) -> PyErr {
    match e {
        PtdError::File { .. } | PtdError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: ptd_core::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        let inner = ptd_core::Image::from_vec(h, w, rows.concat()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: formats::read_image(&path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_image(&path, &self.inner).map_err(py_err)
    }

    #[pyo3(signature = (path, window_hu = formats::DEFAULT_WINDOW_HU))]
    fn write_pgm(&self, path: PathBuf, window_hu: (f64, f64)) -> PyResult<()> {
        formats::write_pgm(&path, &self.inner, window_hu).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.data().chunks(self.inner.width().max(1)).map(<[f64]>::to_vec).collect()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.shape();
        format!("Image({}x{})", h, w)
    }
}

#[pyclass(name = "Sinogram", from_py_object)]
#[derive(Clone)]
pub struct PySinogram {
    inner: fanbeam::Sinogram,
}

#[pymethods]
impl PySinogram {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: formats::read_sinogram(&path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_sinogram(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_views, self.inner.n_det)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_views).map(|v| self.inner.row(v).to_vec()).collect()
    }
}

/// Fan-beam geometry scaled to an `image_n` grid with `n_views` equally
/// spaced views over the full turn.
#[pyclass(name = "Geometry", from_py_object)]
#[derive(Clone)]
pub struct PyGeometry {
    inner: FanBeamGeometry,
}

#[pymethods]
impl PyGeometry {
    #[new]
    fn new(image_n: usize, n_views: usize) -> PyResult<Self> {
        if image_n == 0 || n_views == 0 {
            return Err(PyValueError::new_err("image_n and n_views must be positive"));
        }
        Ok(Self { inner: FanBeamGeometry::desk_scale(image_n, n_views) })
    }

    #[getter]
    fn image_n(&self) -> usize {
        self.inner.grid.n
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.n_views()
    }

    #[getter]
    fn n_det(&self) -> usize {
        self.inner.n_det
    }

    fn forward(&self, image: &PyImage) -> PyResult<PySinogram> {
        Ok(PySinogram { inner: fanbeam::forward_project(&image.inner, &self.inner).map_err(py_err)? })
    }

    fn adjoint(&self, sino: &PySinogram) -> PyResult<PyImage> {
        Ok(PyImage { inner: fanbeam::back_project(&sino.inner, &self.inner).map_err(py_err)? })
    }

    fn fbp(&self, sino: &PySinogram) -> PyResult<PyImage> {
        Ok(PyImage { inner: fanbeam::fbp(&sino.inner, &self.inner).map_err(py_err)? })
    }

    /// Noisy measurement of `image` with the default dose settings.
    #[pyo3(signature = (image, seed, i0 = 1e6, sigma_e2 = 10.0))]
    fn simulate(&self, image: &PyImage, seed: u64, i0: f64, sigma_e2: f64) -> PyResult<PySinogram> {
        let sim = SimConfig { i0, sigma_e2, ..SimConfig::default() };
        sim.validate().map_err(py_err)?;
        let y = training::simulate_measurement(&image.inner, &self.inner, &sim, seed).map_err(py_err)?;
        Ok(PySinogram { inner: y })
    }
}

#[pyfunction]
fn shepp_logan(n: usize) -> PyImage {
    PyImage { inner: phantoms::shepp_logan(&phantoms::ImageGrid::desk_scale(n)) }
}

#[pyfunction]
#[pyo3(signature = (n, seed, min_ellipses = 3, max_ellipses = 8))]
fn random_phantom(n: usize, seed: u64, min_ellipses: usize, max_ellipses: usize) -> PyResult<PyImage> {
    if min_ellipses == 0 || max_ellipses < min_ellipses {
        return Err(PyValueError::new_err("need 1 <= min_ellipses <= max_ellipses"));
    }
    let grid = phantoms::ImageGrid::desk_scale(n);
    let spec = phantoms::random_phantom(seed, (min_ellipses, max_ellipses), grid.object_radius_mm());
    Ok(PyImage { inner: phantoms::rasterize(&spec, &grid, 2) })
}

#[pyfunction]
fn psnr(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    metrics::psnr(&reference.inner, &test.inner).map_err(py_err)
}

#[pyfunction]
fn ssim(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    metrics::ssim(&reference.inner, &test.inner).map_err(py_err)
}

#[pyclass(name = "Schedule")]
pub struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (n_steps = 10, beta_max = 0.3))]
    fn new(n_steps: usize, beta_max: f64) -> PyResult<Self> {
        Ok(Self { inner: DiffusionSchedule::build(n_steps, beta_max).map_err(py_err)? })
    }

    #[getter]
    fn t_grid(&self) -> Vec<f64> {
        self.inner.t_grid.clone()
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.inner.sigma2.clone()
    }

    #[getter]
    fn sigma_bar2(&self) -> Vec<f64> {
        self.inner.sigma_bar2.clone()
    }

    #[getter]
    fn alpha2(&self) -> Vec<f64> {
        self.inner.alpha2.clone()
    }

    fn marginal_coefficients(&self, index: usize) -> PyResult<(f64, f64, f64)> {
        if index > self.inner.n_steps {
            return Err(PyValueError::new_err(format!("index must be in 0..={}", self.inner.n_steps)));
        }
        Ok(self.inner.marginal_coefficients(index))
    }
}

/// A trained checkpoint ready for inference.
#[pyclass(name = "Model")]
pub struct PyModel {
    model: training::Model,
    geometry: FanBeamGeometry,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let geometry = FanBeamGeometry::desk_scale(ck.cfg.image_n, ck.cfg.n_views);
        let model = training::Model::new(ck.arch, ck.params, &ck.cfg).map_err(py_err)?;
        Ok(Self { model, geometry })
    }

    #[getter]
    fn geometry(&self) -> PyGeometry {
        PyGeometry { inner: self.geometry.clone() }
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.variant.name()
    }

    /// Returns `(x_fbp, x_init, x_out)`.
    #[pyo3(signature = (sino, steps = 1, seed = 0, deterministic = false))]
    fn reconstruct(
        &self,
        sino: &PySinogram,
        steps: usize,
        seed: u64,
        deterministic: bool,
    ) -> PyResult<(PyImage, PyImage, PyImage)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = training::reconstruct(&self.model, &sino.inner, &self.geometry, steps, &mut rng, !deterministic)
            .map_err(py_err)?;
        Ok((PyImage { inner: rec.x_fbp }, PyImage { inner: rec.x_init }, PyImage { inner: rec.x_out }))
    }
}

/// Runs one property suite; returns `(passed, report)`.
#[pyfunction]
fn run_suite(name: &str) -> PyResult<(bool, String)> {
    let report = verify::run_suite(name).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn ptd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySinogram>()?;
    m.add_class::<PyGeometry>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(shepp_logan, m)?)?;
    m.add_function(wrap_pyfunction!(random_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add("SUITES", verify::SUITES.to_vec())?;
    Ok(())
}
