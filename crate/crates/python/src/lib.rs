//! Python bindings. Volumes, masks and fields cross the boundary as flat
//! lists in x-fastest order together with their dims.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use defield_core::cohort::{self, Decision};
use defield_core::phantom::{self, PhantomSpec};
use defield_core::registration::{ConvergenceTrace, RegistrationParams, SymmetricTransform};
use defield_core::{config, defanalysis, io, stats, volume};

create_exception!(defield, DefieldError, PyException);

fn err(e: defield_core::Error) -> PyErr {
    DefieldError::new_err(format!("[{}] {e}", e.code()))
}

fn json_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn geometry(dims: [usize; 3]) -> PyResult<volume::GridGeometry> {
    volume::GridGeometry::with_dims(dims).map_err(err)
}

#[pyclass(name = "Volume", module = "defield", skip_from_py_object)]
struct PyVolume(volume::Volume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 3], data: Vec<f32>) -> PyResult<Self> {
        volume::Volume::new(geometry(dims)?, data)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_volume(path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_volume(path, &self.0).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.geometry().dims()
    }

    fn to_list(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn warp(&self, field: &PyField) -> PyResult<Self> {
        volume::warp_volume(&self.0, &field.0)
            .map(Self)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.dims())
    }
}

#[pyclass(name = "Mask", module = "defield", skip_from_py_object)]
struct PyMask(volume::Mask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: [usize; 3], data: Vec<bool>) -> PyResult<Self> {
        let data = data.into_iter().map(u8::from).collect();
        volume::Mask::new(geometry(dims)?, data)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_mask(path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_mask(path, &self.0).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.geometry().dims()
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    fn to_list(&self) -> Vec<bool> {
        self.0.data().iter().map(|&v| v != 0).collect()
    }

    /// Nearest-neighbour warp by a displacement field.
    fn warp(&self, field: &PyField) -> PyResult<Self> {
        volume::warp_mask(&self.0, &field.0).map(Self).map_err(err)
    }
}

/// Displacement or velocity field in voxels.
#[pyclass(name = "VectorField", module = "defield", skip_from_py_object)]
struct PyField(volume::VectorField);

#[pymethods]
impl PyField {
    #[new]
    fn new(dims: [usize; 3], data: Vec<[f64; 3]>) -> PyResult<Self> {
        volume::VectorField::new(geometry(dims)?, data)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_field(path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_field(path, &self.0).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.geometry().dims()
    }

    fn to_list(&self) -> Vec<[f64; 3]> {
        self.0.data().to_vec()
    }

    fn max_norm(&self) -> f64 {
        self.0.max_norm()
    }

    fn mean_norm(&self) -> f64 {
        self.0.mean_norm()
    }

    fn jacobian(&self) -> PyResult<PyJacobian> {
        defanalysis::jacobian_map(&self.0)
            .map(PyJacobian)
            .map_err(err)
    }
}

#[pyclass(name = "JacobianMap", module = "defield")]
struct PyJacobian(defanalysis::JacobianMap);

#[pymethods]
impl PyJacobian {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        defanalysis::JacobianMap::read(path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(path).map_err(err)
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    #[pyo3(signature = (margin = 1))]
    fn interior_min(&self, margin: usize) -> f64 {
        self.0.interior_min(margin)
    }
}

#[pyclass(name = "Transform", module = "defield")]
struct PyTransform {
    inner: SymmetricTransform,
    params: RegistrationParams,
    trace: ConvergenceTrace,
}

#[pymethods]
impl PyTransform {
    #[getter]
    fn forward(&self) -> PyField {
        PyField(self.inner.forward.clone())
    }

    #[getter]
    fn backward(&self) -> PyField {
        PyField(self.inner.backward.clone())
    }

    #[getter]
    fn velocity(&self) -> PyField {
        PyField(self.inner.velocity.clone())
    }

    /// Similarity after every iteration, as dicts.
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.trace.entries)
    }

    /// `(mean, max)` norm of forward composed with backward.
    fn inverse_residual(&self) -> PyResult<(f64, f64)> {
        self.inner.inverse_residual().map_err(err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner
            .write_dir(dir, &self.params, &self.trace)
            .map_err(err)
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        let (inner, params, trace) = SymmetricTransform::read_dir(dir).map_err(err)?;
        Ok(Self {
            inner,
            params,
            trace,
        })
    }
}

fn params_from(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<RegistrationParams> {
    let mut cfg = config::PipelineConfig::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            cfg.set(&key, &v.str()?.to_string()).map_err(err)?;
        }
    }
    cfg.registration.validate().map_err(err)?;
    Ok(cfg.registration)
}

/// Registers `source` onto `target`. Keyword arguments are registration
/// config keys, e.g. `pyramid_levels=2`.
#[pyfunction]
#[pyo3(signature = (source, target, **kwargs))]
fn register(
    py: Python<'_>,
    source: &PyVolume,
    target: &PyVolume,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyTransform> {
    let params = params_from(kwargs)?;
    let (s, t) = (source.0.clone(), target.0.clone());
    let (inner, trace) = py
        .detach(|| defield_core::register(&s, &t, &params))
        .map_err(err)?;
    Ok(PyTransform {
        inner,
        params,
        trace,
    })
}

#[pyclass(name = "RegionSamples", module = "defield", from_py_object)]
#[derive(Clone)]
struct PySamples(defanalysis::RegionSamples);

fn label(s: &str) -> PyResult<defanalysis::RegionLabel> {
    s.parse().map_err(DefieldError::new_err)
}

#[pymethods]
impl PySamples {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        defanalysis::RegionSamples::read_csv(path)
            .map(Self)
            .map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_csv(path).map_err(err)
    }

    fn samples(&self, region: &str) -> PyResult<Vec<f64>> {
        Ok(self.0.samples(label(region)?).to_vec())
    }

    fn count(&self, region: &str) -> PyResult<usize> {
        Ok(self.0.count(label(region)?))
    }

    fn mean(&self, region: &str) -> PyResult<Option<f64>> {
        Ok(self.0.mean(label(region)?))
    }

    /// Table-1-style summaries, confidence intervals and t matrix.
    #[pyo3(signature = (level = 0.95, resamples = 1000, seed = 0))]
    fn statistics<'py>(
        &self,
        py: Python<'py>,
        level: f64,
        resamples: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let st = cohort::region_statistics(&self.0, level, resamples, seed).map_err(err)?;
        json_to_py(py, &st)
    }
}

/// Partition of the later tumor against the warped earlier tumor, and
/// Jacobian samples per region. Returns `(labels, samples)` where labels
/// are region codes N=0, U=1, R=2, G=3.
#[pyfunction]
fn region_samples(
    mask_prev: &PyMask,
    mask_next: &PyMask,
    forward: &PyField,
) -> PyResult<(Vec<u8>, PySamples)> {
    let warped = volume::warp_mask(&mask_prev.0, &forward.0).map_err(err)?;
    let part = defanalysis::partition_regions(&warped, &mask_next.0).map_err(err)?;
    let j = defanalysis::jacobian_map(&forward.0).map_err(err)?;
    let s = defanalysis::collect_samples(&j, &part).map_err(err)?;
    Ok((
        part.labels().iter().map(|l| l.code()).collect(),
        PySamples(s),
    ))
}

#[pyfunction]
fn pool(samples: Vec<PySamples>) -> PyResult<PySamples> {
    let v: Vec<_> = samples.into_iter().map(|s| s.0).collect();
    defanalysis::pool(&v).map(PySamples).map_err(err)
}

/// `"PR"` or `"no-decision"` from region means; a missing mean is `None`.
#[pyfunction]
#[pyo3(signature = (mu_r, mu_g, mu_u, mu_n = None))]
fn classify(
    mu_r: Option<f64>,
    mu_g: Option<f64>,
    mu_u: Option<f64>,
    mu_n: Option<f64>,
) -> PyResult<&'static str> {
    let m = cohort::RegionMeans {
        mu_r,
        mu_g,
        mu_u,
        mu_n,
        counts: Default::default(),
        week_limit: cohort::WeekLimit::All,
        pairs: 0,
    };
    cohort::classify(&m).map(Decision::as_str).map_err(err)
}

/// `(odds_ratio, p)` of the two-sided Fisher exact test.
#[pyfunction]
fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> PyResult<(f64, f64)> {
    let t = stats::Contingency2x2::new(a, b, c, d).map_err(err)?;
    let r = stats::fisher_exact(&t).map_err(err)?;
    Ok((r.odds_ratio, r.p))
}

/// `(t, p, df)` of the pooled two-sample t-test from summary statistics.
#[pyfunction]
fn pooled_t_test(
    n1: usize,
    mean1: f64,
    sd1: f64,
    n2: usize,
    mean2: f64,
    sd2: f64,
) -> PyResult<(f64, f64, f64)> {
    let x = stats::SummaryStats {
        n: n1,
        mean: mean1,
        sd: sd1,
    };
    let y = stats::SummaryStats {
        n: n2,
        mean: mean2,
        sd: sd2,
    };
    let r = stats::pooled_t_test(&x, &y).map_err(err)?;
    Ok((r.t, r.p, r.df))
}

#[pyfunction]
#[pyo3(signature = (samples, resamples = 1000, level = 0.95, seed = 0))]
fn bootstrap_ci(
    samples: Vec<f64>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let i = stats::bootstrap_ci(&samples, resamples, level, seed).map_err(err)?;
    Ok((i.lo, i.hi))
}

#[pyfunction]
#[pyo3(signature = (samples, level = 0.95))]
fn normal_ci(samples: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    let s = stats::summarize(&samples).map_err(err)?;
    let i = stats::normal_ci(&s, level).map_err(err)?;
    Ok((i.lo, i.hi))
}

/// Tables, Fisher results and metrics rebuilt from the appendix fixture.
#[pyfunction]
fn reproduce_paper(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    let rep = cohort::reproduce_paper(&cohort::appendix_fixture()).map_err(err)?;
    json_to_py(py, &rep)
}

fn phantom_spec(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<PhantomSpec> {
    let Some(kw) = kwargs else {
        return Ok(PhantomSpec::default());
    };
    let json = kw.py().import("json")?;
    let text: String = json.call_method1("dumps", (kw,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

/// A synthetic course as `(volumes, masks, truth_fields)`. Keyword
/// arguments are phantom spec fields, e.g. `mode="grow"`, `dims=[32]*3`.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn synth_course(
    py: Python<'_>,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Vec<PyVolume>, Vec<PyMask>, Vec<PyField>)> {
    let spec = phantom_spec(kwargs)?;
    let c = py.detach(|| phantom::synth_course(&spec)).map_err(err)?;
    Ok((
        c.volumes.into_iter().map(PyVolume).collect(),
        c.masks.into_iter().map(PyMask).collect(),
        c.forward_fields.into_iter().map(PyField).collect(),
    ))
}

/// Writes a synthetic cohort and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (dir, patients = 10, **kwargs))]
fn write_cohort(
    dir: PathBuf,
    patients: usize,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<PathBuf> {
    let spec = phantom_spec(kwargs)?;
    phantom::write_cohort(&spec, patients, &dir).map_err(err)
}

/// Registers and classifies a cohort manifest; returns the report as a dict.
/// Keyword arguments are config keys.
#[pyfunction]
#[pyo3(signature = (manifest, **kwargs))]
fn classify_cohort<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    kwargs: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config::PipelineConfig::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            cfg.set(&key, &v.str()?.to_string()).map_err(err)?;
        }
    }
    cfg.validate().map_err(err)?;
    let records = cohort::read_manifest(&manifest).map_err(err)?;
    let rep = py
        .detach(|| {
            cohort::analyze_cohort(&records, &cfg.registration, cfg.week_limit, &cfg.split())
        })
        .map_err(err)?;
    json_to_py(py, &rep)
}

#[pymodule]
fn defield(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DefieldError", m.py().get_type::<DefieldError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyJacobian>()?;
    m.add_class::<PyTransform>()?;
    m.add_class::<PySamples>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(region_samples, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(normal_ci, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce_paper, m)?)?;
    m.add_function(wrap_pyfunction!(synth_course, m)?)?;
    m.add_function(wrap_pyfunction!(write_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(classify_cohort, m)?)?;
    Ok(())
}
