//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dyensemble::baselines as base;
use dyensemble::candidate_gen as cg;
use dyensemble::data_gen as dg;
use dyensemble::ensemble_engine as ee;
use dyensemble::evaluation as ev;
use dyensemble::numeric::{rng_from_seed, SimRng};
use dyensemble::particle_core as pc;
use dyensemble::scenario;
use dyensemble::state_space as ss;
use dyensemble::Error;

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dyensemble::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e| match e {
            Error::Io { .. } => PyOSError::new_err(e.to_string()),
            Error::Config(_)
            | Error::Contract(_)
            | Error::DimensionMismatch { .. }
            | Error::UndefinedMetric(_) => PyValueError::new_err(e.to_string()),
            other => PyRuntimeError::new_err(other.to_string()),
        })
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dataset(states: &[Vec<f64>], measurements: &[Vec<f64>]) -> PyResult<ss::Dataset> {
    ss::Dataset::with_defaults(
        matrix(states, "states")?,
        matrix(measurements, "measurements")?,
        1.0,
    )
    .py()
}

/// Linear-Gaussian measurement model over a channel subset.
#[pyclass(name = "ObservationModel", module = "pydyensemble", frozen, from_py_object)]
#[derive(Clone)]
struct PyObservationModel {
    inner: ss::LinearObservationModel,
}

#[pymethods]
impl PyObservationModel {
    #[new]
    #[pyo3(signature = (h, b, r_diag, mask=None, channel_count=None))]
    fn new(
        h: Vec<Vec<f64>>,
        b: Vec<f64>,
        r_diag: Vec<f64>,
        mask: Option<Vec<usize>>,
        channel_count: Option<usize>,
    ) -> PyResult<Self> {
        let h = matrix(&h, "h")?;
        let mask = mask.unwrap_or_else(|| (0..h.nrows()).collect());
        let channel_count = channel_count.unwrap_or(mask.iter().max().map_or(0, |m| m + 1));
        let inner = ss::LinearObservationModel::new(
            channel_count,
            mask,
            h,
            DVector::from_vec(b),
            DVector::from_vec(r_diag),
        )
        .py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn mask(&self) -> Vec<usize> {
        self.inner.mask().to_vec()
    }

    #[getter]
    fn channel_count(&self) -> usize {
        self.inner.channel_count()
    }

    #[getter]
    fn h(&self) -> Vec<Vec<f64>> {
        rows(self.inner.h())
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.b().iter().copied().collect()
    }

    #[getter]
    fn r_diag(&self) -> Vec<f64> {
        self.inner.r_diag().iter().copied().collect()
    }

    fn predict_mean(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = ss::StateVector::from_slice(&x).py()?;
        Ok(self.inner.predict_mean(&x).py()?.iter().copied().collect())
    }

    fn log_likelihood(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        let x = ss::StateVector::from_slice(&x).py()?;
        let y = ss::MeasurementVector::from_slice(&y).py()?;
        self.inner.log_likelihood(&x, &y).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "ObservationModel(channels={}, mask={:?}, state_dim={})",
            self.inner.channel_count(),
            self.inner.mask(),
            self.inner.state_dim()
        )
    }
}

fn unwrap_models(models: &[PyObservationModel]) -> Vec<ss::LinearObservationModel> {
    models.iter().map(|m| m.inner.clone()).collect()
}

fn linear_transition(a: &[Vec<f64>], q: &[Vec<f64>]) -> PyResult<ss::LinearStateTransition> {
    ss::LinearStateTransition::new(matrix(a, "a")?, matrix(q, "q")?).py()
}

/// Dynamic-ensemble particle filter with a linear-Gaussian transition.
#[pyclass(name = "EnsembleFilter", module = "pydyensemble")]
struct PyEnsembleFilter {
    inner: ee::EnsembleFilter,
    rng: SimRng,
}

#[pymethods]
impl PyEnsembleFilter {
    #[new]
    #[pyo3(signature = (models, a, q, init_mean, init_cov, alpha=0.1, n_particles=1000, ess_threshold=0.5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        models: Vec<PyObservationModel>,
        a: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        init_mean: Vec<f64>,
        init_cov: Vec<Vec<f64>>,
        alpha: f64,
        n_particles: usize,
        ess_threshold: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let transition = Arc::new(linear_transition(&a, &q)?);
        let cfg = ee::EnsembleConfig::new(
            alpha,
            n_particles,
            pc::ResamplePolicy::new(ess_threshold).py()?,
            unwrap_models(&models),
            transition,
        )
        .py()?;
        let mut rng = rng_from_seed(seed);
        let init = pc::ParticleSet::from_gaussian(
            &DVector::from_vec(init_mean),
            &matrix(&init_cov, "init_cov")?,
            n_particles,
            &mut rng,
        )
        .py()?;
        Ok(Self {
            inner: ee::EnsembleFilter::new(cfg, init).py()?,
            rng,
        })
    }

    /// Advance one step; returns a dict with k, estimate, posterior, ess,
    /// resampled and warning.
    fn step<'py>(&mut self, py: Python<'py>, y: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let y = ss::MeasurementVector::from_slice(&y).py()?;
        let out = self.inner.step(&y, &mut self.rng).py()?;
        let d = PyDict::new(py);
        d.set_item("k", out.k)?;
        d.set_item("estimate", out.estimate.as_slice().to_vec())?;
        d.set_item("posterior", out.posterior.probs())?;
        d.set_item("ess", out.ess)?;
        d.set_item("resampled", out.resampled)?;
        d.set_item("warning", out.warning)?;
        Ok(d)
    }

    /// Run over a measurement sequence and return the estimates.
    fn run(&mut self, measurements: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        measurements
            .iter()
            .map(|y| {
                let y = ss::MeasurementVector::from_slice(y).py()?;
                Ok(self
                    .inner
                    .step(&y, &mut self.rng)
                    .py()?
                    .estimate
                    .as_slice()
                    .to_vec())
            })
            .collect()
    }

    #[getter]
    fn posterior(&self) -> Vec<f64> {
        self.inner.state().posterior.probs()
    }
}

/// Kalman filter baseline.
#[pyclass(name = "KalmanFilter", module = "pydyensemble")]
struct PyKalmanFilter {
    inner: base::KalmanFilter,
}

#[pymethods]
impl PyKalmanFilter {
    #[new]
    fn new(
        model: PyObservationModel,
        a: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        init_mean: Vec<f64>,
        init_cov: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let init =
            base::KalmanState::new(DVector::from_vec(init_mean), matrix(&init_cov, "init_cov")?)
                .py()?;
        let inner =
            base::KalmanFilter::new(init, linear_transition(&a, &q)?, model.inner).py()?;
        Ok(Self { inner })
    }

    fn step(&mut self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = ss::MeasurementVector::from_slice(&y).py()?;
        Ok(self.inner.step(&y).py()?.as_slice().to_vec())
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.state().cov)
    }
}

#[pyfunction]
fn forgetting_predict(probs: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let p = ee::ModelPosterior::from_probs(&probs).py()?;
    Ok(ee::forgetting_predict(&p, alpha).py()?.probs())
}

#[pyfunction]
fn update_model_posterior(probs: Vec<f64>, log_likelihoods: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = ee::ModelPosterior::from_probs(&probs).py()?;
    Ok(ee::update_model_posterior(&p, &log_likelihoods).py()?.probs())
}

/// Systematic resampling indices for offset `u` in `[0, 1/N)`.
#[pyfunction]
fn systematic_indices(weights: Vec<f64>, u: f64) -> PyResult<Vec<usize>> {
    pc::normalize(&weights).py()?;
    let n = weights.len() as f64;
    if !(0.0..1.0 / n).contains(&u) {
        return Err(PyValueError::new_err("offset must lie in [0, 1/N)"));
    }
    Ok(pc::systematic_indices(&weights, u))
}

#[pyfunction]
fn effective_sample_size(weights: Vec<f64>) -> PyResult<f64> {
    pc::effective_sample_size(&weights).py()
}

#[pyfunction]
#[pyo3(signature = (states, measurements, channels, ridge=cg::DEFAULT_RIDGE))]
fn fit_observation(
    states: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
    channels: Vec<usize>,
    ridge: f64,
) -> PyResult<PyObservationModel> {
    let data = dataset(&states, &measurements)?;
    Ok(PyObservationModel {
        inner: cg::fit_observation(&data, &channels, ridge).py()?,
    })
}

/// Returns `(A, Q)` fitted to a state sequence.
#[pyfunction]
#[pyo3(signature = (states, ridge=cg::DEFAULT_RIDGE))]
fn fit_state_transition(
    states: Vec<Vec<f64>>,
    ridge: f64,
) -> PyResult<(Rows, Rows)> {
    let s = matrix(&states, "states")?;
    let data = ss::Dataset::with_defaults(s.clone(), DMatrix::zeros(s.nrows(), 0), 1.0).py()?;
    let t = cg::fit_state_transition(&data, ridge).py()?;
    Ok((rows(t.a()), rows(t.q())))
}

#[pyfunction]
#[pyo3(signature = (states, measurements, model_count, model_size, perturbation, seed, ridge=cg::DEFAULT_RIDGE))]
fn generate_candidates(
    states: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
    model_count: usize,
    model_size: usize,
    perturbation: f64,
    seed: u64,
    ridge: f64,
) -> PyResult<Vec<PyObservationModel>> {
    let data = dataset(&states, &measurements)?;
    let cfg = cg::GenerationConfig {
        model_count,
        model_size,
        perturbation_factor: perturbation,
        seed,
        ridge,
    };
    Ok(cg::generate_candidates(&data, &cfg)
        .py()?
        .into_iter()
        .map(|inner| PyObservationModel { inner })
        .collect())
}

/// Piecewise simulation; returns `(states, measurements)` for steps 1..=T.
#[pyfunction]
#[pyo3(signature = (seed, noiseless=false))]
fn simulate_series(seed: u64, noiseless: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let spec = dg::SimulationSpec {
        noiseless,
        ..Default::default()
    };
    let ds = dg::simulate_series(&spec, &mut rng_from_seed(seed)).py()?;
    Ok((ds.state_component(0), ds.channel(0)))
}

/// The three exact simulation candidates.
#[pyfunction]
fn simulation_candidates() -> Vec<PyObservationModel> {
    dg::candidate_set_for_simulation()
        .into_iter()
        .map(|inner| PyObservationModel { inner })
        .collect()
}

/// Surrogate cortical data; returns `(states, counts, informative)`.
#[pyfunction]
#[pyo3(signature = (seed=0, channel_count=20, duration_bins=4000, informative_fraction=0.75))]
fn synth_cortex(
    seed: u64,
    channel_count: usize,
    duration_bins: usize,
    informative_fraction: f64,
) -> PyResult<(Rows, Rows, Vec<usize>)> {
    let spec = dg::SynthCortexSpec {
        seed,
        channel_count,
        duration_bins,
        informative_fraction,
        ..Default::default()
    };
    let out = dg::synth_cortex_with_truth(&spec).py()?;
    Ok((
        rows(out.dataset.states()),
        rows(out.dataset.measurements()),
        out.informative,
    ))
}

#[pyfunction]
fn inject_noise(
    measurements: Vec<Vec<f64>>,
    channels: Vec<usize>,
    low: i64,
    high: i64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let states = vec![vec![0.0]; measurements.len()];
    let data = dataset(&states, &measurements)?;
    let out = dg::inject_noise(&data, &channels, low, high, &mut rng_from_seed(seed)).py()?;
    Ok(rows(out.measurements()))
}

#[pyfunction]
fn correlation_coefficient(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    ev::correlation_coefficient(&a, &b).py()
}

#[pyfunction]
#[pyo3(signature = (counts, states, state_bins=ev::DEFAULT_STATE_BINS))]
fn mutual_information(counts: Vec<f64>, states: Vec<f64>, state_bins: usize) -> PyResult<f64> {
    ev::mutual_information(&counts, &states, state_bins).py()
}

#[pyfunction]
fn rank_channels(
    states: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
    component: usize,
    top_k: usize,
) -> PyResult<Vec<usize>> {
    ev::rank_channels(&dataset(&states, &measurements)?, component, top_k).py()
}

/// `segments` holds `(start, end, expected_model)` triples over steps.
#[pyfunction]
fn segment_dominance(
    steps: Vec<usize>,
    posteriors: Vec<Vec<f64>>,
    segments: Vec<(usize, usize, usize)>,
) -> PyResult<Vec<f64>> {
    let trace = ev::WeightTrace::from_rows(steps, &posteriors).py()?;
    let segs: Vec<ev::Segment> = segments
        .into_iter()
        .map(|(start, end, expected_model)| ev::Segment {
            start,
            end,
            expected_model,
        })
        .collect();
    ev::segment_dominance(&trace, &segs).py()
}

/// Run a scenario from a JSON config string, writing into `out_dir`.
#[pyfunction]
fn run_scenario(py: Python<'_>, config_json: &str, out_dir: &str) -> PyResult<()> {
    let cfg = scenario::ExperimentConfig::from_json(config_json, Path::new("<python>")).py()?;
    py.detach(|| scenario::run_scenario(&cfg, Path::new(out_dir))).py()
}

#[pymodule]
fn pydyensemble(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObservationModel>()?;
    m.add_class::<PyEnsembleFilter>()?;
    m.add_class::<PyKalmanFilter>()?;
    m.add_function(wrap_pyfunction!(forgetting_predict, m)?)?;
    m.add_function(wrap_pyfunction!(update_model_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(systematic_indices, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(fit_observation, m)?)?;
    m.add_function(wrap_pyfunction!(fit_state_transition, m)?)?;
    m.add_function(wrap_pyfunction!(generate_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_series, m)?)?;
    m.add_function(wrap_pyfunction!(simulation_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(synth_cortex, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(rank_channels, m)?)?;
    m.add_function(wrap_pyfunction!(segment_dominance, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
