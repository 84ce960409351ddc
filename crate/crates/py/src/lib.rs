//! Python view of the adapter toolkit: the double-binary artifact and its two
//! file containers, ADMM compression, the toy straight-through trainer, the
//! bit-packed forward kernel, and the Monte-Carlo bound checks.
//!
//! Matrices cross the boundary as nested lists of floats (row major); sign
//! matrices are read off the entry signs, with zero counting as +1. Heavy
//! loops all run on the Rust side, so list conversion is the only per-call
//! overhead that scales with the data.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lordba::adapter::{
    diagnose, gauge_fix, LoraFactors, LordbaAdapter, ScaleEnvelope, SignMatrix,
};
use lordba::format;
use lordba::kernel::{adapter_forward, bandwidth_ratio, PackedAdapter as CorePacked};
use lordba::ptq::{run_admm, AdmmConfig, PtqError};
use lordba::qat::{adapter_toy_loss, train, QatConfig, QatError, QatInit, QatMode, ToyTask};
use lordba::tensor::DenseMatrix;
use lordba::theory::{self, McReport, NoiseDist, SignNoiseModel};

/// Same working magnitude the CLI uses: the solver's penalty schedule is
/// tuned for LoRA-sized deltas, so user inputs are rescaled to this rms
/// before compression and the beta envelope is rescaled back afterwards.
const SOLVER_RMS: f64 = 1e-3;

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<DenseMatrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(PyValueError::new_err("matrix must be non-empty"));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != m) {
        return Err(PyValueError::new_err(format!(
            "ragged matrix: first row has {m} columns, another has {}",
            bad.len()
        )));
    }
    Ok(DenseMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect())
        .collect()
}

fn signs_from_rows(rows: &[Vec<f64>]) -> PyResult<SignMatrix> {
    Ok(SignMatrix::from_dense(&matrix_from_rows(rows)?))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: format::FormatError) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn ptq_err(e: PtqError) -> PyErr {
    match &e {
        PtqError::ZeroTarget | PtqError::InvalidConfig(_) => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn qat_err(e: QatError) -> PyErr {
    match &e {
        QatError::InvalidConfig(_) | QatError::ShapeMismatch(_) | QatError::InitMismatch(_) => {
            value_err(e)
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Double-binary adapter: sign carriers B1 (N×R) and B2 (R×M) plus one or
/// more (alpha, beta, gamma) scale envelopes.
#[pyclass(frozen, name = "Adapter", module = "lordba_py")]
struct PyAdapter {
    inner: LordbaAdapter,
}

#[pymethods]
impl PyAdapter {
    /// `r0_ref` is the dense-LoRA reference rank used in bandwidth
    /// accounting; it defaults to the carrier rank R.
    #[new]
    #[pyo3(signature = (b1, b2, envelopes, r0_ref = None))]
    fn new(
        b1: Vec<Vec<f64>>,
        b2: Vec<Vec<f64>>,
        envelopes: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
        r0_ref: Option<usize>,
    ) -> PyResult<Self> {
        let b1 = signs_from_rows(&b1)?;
        let b2 = signs_from_rows(&b2)?;
        let r0 = r0_ref.unwrap_or_else(|| b1.cols());
        let envelopes = envelopes
            .into_iter()
            .map(|(alpha, beta, gamma)| ScaleEnvelope { alpha, beta, gamma })
            .collect();
        let inner = LordbaAdapter::new(b1, b2, envelopes, r0).map_err(value_err)?;
        Ok(PyAdapter { inner })
    }

    /// Read an LBA1 container.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAdapter { inner: format::load_adapter(&path).map_err(io_err)? })
    }

    /// Write an LBA1 container (scales are stored at half precision).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        format::save_adapter(&path, &self.inner).map_err(io_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.carrier_rank()
    }

    #[getter]
    fn num_envelopes(&self) -> usize {
        self.inner.num_envelopes()
    }

    #[getter]
    fn r0_ref(&self) -> usize {
        self.inner.r0_ref
    }

    /// R(N+M) + 16ℓ(N+R+M).
    #[getter]
    fn storage_bits(&self) -> u64 {
        self.inner.storage_bits()
    }

    /// (carrier-only, total) bits per adapted weight.
    #[getter]
    fn bpw(&self) -> (f64, f64) {
        self.inner.bpw()
    }

    #[getter]
    fn envelopes(&self) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.inner
            .envelopes
            .iter()
            .map(|e| (e.alpha.clone(), e.beta.clone(), e.gamma.clone()))
            .collect()
    }

    fn b1(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.b1.to_dense())
    }

    fn b2(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.b2.to_dense())
    }

    /// Dense ΔW.
    fn reconstruct(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.reconstruct())
    }

    /// Bit-packed form for the sign-accumulation forward pass.
    fn pack(&self) -> PyPacked {
        PyPacked { inner: CorePacked::from_adapter(&self.inner) }
    }

    /// X·ΔW through the packed kernel; X is T×N.
    fn apply(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.pack().apply(x)
    }

    fn __repr__(&self) -> String {
        format!(
            "Adapter(n={}, m={}, rank={}, envelopes={}, r0_ref={})",
            self.inner.n(),
            self.inner.m(),
            self.inner.carrier_rank(),
            self.inner.num_envelopes(),
            self.inner.r0_ref
        )
    }
}

/// Carriers packed 64 signs to a word, laid out along each matmul's
/// reduction axis. Built via `Adapter.pack()`.
#[pyclass(frozen, name = "PackedAdapter", module = "lordba_py")]
struct PyPacked {
    inner: CorePacked,
}

#[pymethods]
impl PyPacked {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.carrier_rank()
    }

    #[getter]
    fn num_envelopes(&self) -> usize {
        self.inner.num_envelopes()
    }

    /// X·ΔW without unpacking; X is T×N.
    fn apply(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from_rows(&x)?;
        let y = adapter_forward(&x, &self.inner).map_err(value_err)?;
        Ok(matrix_to_rows(&y))
    }

    /// Back to the plain adapter form.
    fn unpack(&self) -> PyAdapter {
        PyAdapter { inner: self.inner.unpack() }
    }

    fn __repr__(&self) -> String {
        format!(
            "PackedAdapter(n={}, m={}, rank={}, envelopes={})",
            self.inner.n(),
            self.inner.m(),
            self.inner.carrier_rank(),
            self.inner.num_envelopes()
        )
    }
}

/// Dense LoRA factor pair (A: N×R0, B: M×R0) with ΔW = A·Bᵀ.
#[pyclass(frozen, name = "Factors", module = "lordba_py")]
struct PyFactors {
    inner: LoraFactors,
}

#[pymethods]
impl PyFactors {
    #[new]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Self> {
        let a = matrix_from_rows(&a)?;
        let b = matrix_from_rows(&b)?;
        Ok(PyFactors { inner: LoraFactors::new(a, b).map_err(value_err)? })
    }

    /// Read an LRF1 container.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFactors { inner: format::load_factors(&path).map_err(io_err)? })
    }

    /// Write an LRF1 container (factors are stored at single precision).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        format::save_factors(&path, &self.inner).map_err(io_err)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn a(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.a)
    }

    fn b(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.b)
    }

    /// Dense ΔW = A·Bᵀ.
    fn delta(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.delta())
    }

    /// Column-balanced copy (equal per-pair column norms, same ΔW).
    fn gauge_fix(&self) -> PyFactors {
        PyFactors { inner: gauge_fix(&self.inner) }
    }

    /// Magnitude statistics of the gauge-fixed factors:
    /// {mu_a, mu_b, zeta, ratio}.
    fn diagnose<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let rep = diagnose(&self.inner).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("mu_a", rep.mu_a)?;
        d.set_item("mu_b", rep.mu_b)?;
        d.set_item("zeta", rep.zeta)?;
        d.set_item("ratio", rep.ratio)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Factors(n={}, m={}, rank={})",
            self.inner.a.rows(),
            self.inner.b.rows(),
            self.inner.rank()
        )
    }
}

/// Training-free compression of a dense delta into a rank-R double-binary
/// adapter. Returns (adapter, info) where info records the solver run:
/// objective_history, dual_identity_worst, freeze_sweep, relative_error,
/// and the internal normalization applied.
#[pyfunction]
#[pyo3(signature = (delta, rank, *, envelopes = 1, sweeps = 100, tau = 2.0, mu = 10.0, freeze_detect = true, r0_ref = None))]
#[allow(clippy::too_many_arguments)]
fn compress<'py>(
    py: Python<'py>,
    delta: Vec<Vec<f64>>,
    rank: usize,
    envelopes: usize,
    sweeps: usize,
    tau: f64,
    mu: f64,
    freeze_detect: bool,
    r0_ref: Option<usize>,
) -> PyResult<(PyAdapter, Bound<'py, PyDict>)> {
    let target = matrix_from_rows(&delta)?;
    let mut cfg = AdmmConfig::new(rank);
    cfg.envelope_rank = envelopes;
    cfg.max_sweeps = sweeps;
    cfg.tau = tau;
    cfg.mu = mu;
    cfg.freeze_detect = freeze_detect;
    cfg.r0_ref = r0_ref;

    let (n, m) = target.shape();
    let rms = target.frob_norm() / ((n * m) as f64).sqrt();
    let c = if rms > 0.0 { SOLVER_RMS / rms } else { 1.0 };
    let (mut adapter, state) = py
        .detach(|| run_admm(&target.scaled(c), &cfg))
        .map_err(ptq_err)?;
    for env in adapter.envelopes.iter_mut() {
        env.beta.iter_mut().for_each(|b| *b /= c);
    }

    let relative_error =
        target.sub(&adapter.reconstruct()).frob_norm() / target.frob_norm();
    let info = PyDict::new(py);
    info.set_item("normalization", c)?;
    info.set_item(
        "objective_history",
        state.objective_history.iter().map(|o| o / (c * c)).collect::<Vec<_>>(),
    )?;
    info.set_item(
        "dual_identity_worst",
        state.dual_identity_history.iter().cloned().fold(0.0, f64::max),
    )?;
    info.set_item("freeze_sweep", state.freeze_sweep)?;
    info.set_item("sweeps_run", state.sweep)?;
    info.set_item("relative_error", relative_error)?;
    Ok((PyAdapter { inner: adapter }, info))
}

/// Realizable synthetic regression task: returns (x, y, w0, hidden) with
/// y = x·(w0 + ΔW(hidden)) exactly.
#[pyfunction]
#[pyo3(signature = (n, m, rank, *, envelopes = 1, samples = 64, seed = 0))]
fn planted_toy_task(
    n: usize,
    m: usize,
    rank: usize,
    envelopes: usize,
    samples: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, PyAdapter)> {
    if n == 0 || m == 0 || rank == 0 || envelopes == 0 || samples == 0 {
        return Err(PyValueError::new_err("all task dimensions must be >= 1"));
    }
    let (task, hidden) = ToyTask::planted(n, m, rank, envelopes, samples, seed);
    Ok((
        matrix_to_rows(&task.x),
        matrix_to_rows(&task.y),
        matrix_to_rows(&task.w0),
        PyAdapter { inner: hidden },
    ))
}

/// Straight-through-estimator refinement on a toy regression task.
/// Modes: "full" (carriers + scales, needs init), "freeze" (scales only,
/// needs init), "scratch" (random carriers, needs rank). Returns
/// (adapter, loss_history) with steps+1 loss entries.
#[pyfunction]
#[pyo3(signature = (x, y, w0, *, mode = "full", steps = 500, init = None, rank = None, envelopes = 1, kappa = 100.0, lr = None, warmup_frac = 0.05, weight_decay = 0.0, kappa_ramp = false, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    w0: Vec<Vec<f64>>,
    mode: &str,
    steps: usize,
    init: Option<PyRef<'_, PyAdapter>>,
    rank: Option<usize>,
    envelopes: usize,
    kappa: f64,
    lr: Option<f64>,
    warmup_frac: f64,
    weight_decay: f64,
    kappa_ramp: bool,
    seed: u64,
) -> PyResult<(PyAdapter, Vec<f64>)> {
    let mode = match mode {
        "full" => QatMode::Full,
        "freeze" => QatMode::Freeze,
        "scratch" => QatMode::Scratch,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown mode {other:?}; expected full, freeze, or scratch"
            )))
        }
    };
    let task = ToyTask::new(matrix_from_rows(&x)?, matrix_from_rows(&y)?, matrix_from_rows(&w0)?)
        .map_err(qat_err)?;
    let mut cfg = QatConfig::new(mode, steps);
    cfg.kappa = kappa;
    cfg.lr = lr;
    cfg.warmup_frac = warmup_frac;
    cfg.weight_decay = weight_decay;
    cfg.kappa_ramp = kappa_ramp;
    cfg.seed = seed;

    let qat_init = match (&init, mode) {
        (Some(adapter), _) => QatInit::Adapter(&adapter.inner),
        (None, QatMode::Scratch) => {
            let r = rank.ok_or_else(|| {
                PyValueError::new_err("scratch mode needs rank= when no init is given")
            })?;
            QatInit::Random { carrier_rank: r, envelope_rank: envelopes, r0_ref: r }
        }
        (None, _) => {
            return Err(PyValueError::new_err("full/freeze modes need init=<Adapter>"))
        }
    };
    let (adapter, state) = py
        .detach(|| train(&task, qat_init, &cfg))
        .map_err(qat_err)?;
    Ok((PyAdapter { inner: adapter }, state.loss_history))
}

/// Hard-sign toy loss ½‖X(W0 + ΔW) − Y‖²/T of a standalone adapter.
#[pyfunction]
fn adapter_loss(
    adapter: PyRef<'_, PyAdapter>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    w0: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let task = ToyTask::new(matrix_from_rows(&x)?, matrix_from_rows(&y)?, matrix_from_rows(&w0)?)
        .map_err(qat_err)?;
    if adapter.inner.n() != task.x.cols() || adapter.inner.m() != task.y.cols() {
        return Err(PyValueError::new_err(format!(
            "adapter is {}x{}, task wants {}x{}",
            adapter.inner.n(),
            adapter.inner.m(),
            task.x.cols(),
            task.y.cols()
        )));
    }
    Ok(adapter_toy_loss(&adapter.inner, &task))
}

/// fp16-LoRA bytes divided by adapter payload bytes for the given shape.
#[pyfunction]
#[pyo3(name = "bandwidth_ratio", signature = (n, m, r0, envelopes = 1))]
fn py_bandwidth_ratio(n: usize, m: usize, r0: usize, envelopes: usize) -> f64 {
    bandwidth_ratio(n, m, r0, envelopes)
}

fn noise_from_args(noise: &str, noise_scale: f64) -> PyResult<NoiseDist> {
    match noise {
        "gaussian" => Ok(NoiseDist::Gaussian { std: noise_scale }),
        "uniform" => Ok(NoiseDist::Uniform { half_width: noise_scale }),
        other => Err(PyValueError::new_err(format!(
            "unknown noise {other:?}; expected gaussian or uniform"
        ))),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &McReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("quantity", &r.quantity)?;
    d.set_item("trials", r.trials)?;
    d.set_item("empirical", r.empirical.clone())?;
    d.set_item("bound", r.bound.clone())?;
    d.set_item("violation_rate", r.violation_rate)?;
    if let Some(s) = r.slope {
        d.set_item("slope", s)?;
    }
    if let Some(i) = r.intercept {
        d.set_item("intercept", i)?;
    }
    if let Some(c) = r.fitted_constant {
        d.set_item("fitted_constant", c)?;
    }
    if let Some(g) = &r.grid {
        d.set_item("grid", g.clone())?;
    }
    if let Some(p) = r.passed {
        d.set_item("passed", p)?;
    }
    d.set_item("notes", r.notes.clone())?;
    Ok(d)
}

fn theory_err(e: theory::TheoryError) -> PyErr {
    value_err(e)
}

/// Monte-Carlo check of the relative reconstruction-error bound across a
/// noise grid; reports the fitted log–log slope and constant.
#[pyfunction]
#[pyo3(signature = (n, m, rank, *, mu_a = 1.0, mu_b = 1.0, noise = "gaussian", noise_scale = 0.05, trials = 1000, delta = 0.05, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn check_reconstruction_bound<'py>(
    py: Python<'py>,
    n: usize,
    m: usize,
    rank: usize,
    mu_a: f64,
    mu_b: f64,
    noise: &str,
    noise_scale: f64,
    trials: usize,
    delta: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model =
        SignNoiseModel::new(n, m, rank, mu_a, mu_b, noise_from_args(noise, noise_scale)?, seed);
    let rep = py
        .detach(|| theory::check_reconstruction_bound(&model, trials, delta))
        .map_err(theory_err)?;
    report_dict(py, &rep)
}

/// Monte-Carlo check that noisy factors keep the planted carrier signs.
#[pyfunction]
#[pyo3(signature = (n, m, rank, *, mu_a = 1.0, mu_b = 1.0, noise = "gaussian", noise_scale = 0.05, trials = 1000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn check_sign_consistency<'py>(
    py: Python<'py>,
    n: usize,
    m: usize,
    rank: usize,
    mu_a: f64,
    mu_b: f64,
    noise: &str,
    noise_scale: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model =
        SignNoiseModel::new(n, m, rank, mu_a, mu_b, noise_from_args(noise, noise_scale)?, seed);
    let rep = py
        .detach(|| theory::check_sign_consistency(&model, trials))
        .map_err(theory_err)?;
    report_dict(py, &rep)
}

/// Monte-Carlo check of the carrier-energy lower bound Z ≥ NMr/2.
#[pyfunction]
#[pyo3(signature = (n, m, rank, *, trials = 1000, seed = 0))]
fn check_signal_lowerbound<'py>(
    py: Python<'py>,
    n: usize,
    m: usize,
    rank: usize,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = py
        .detach(|| theory::check_signal_lowerbound(n, m, rank, trials, seed))
        .map_err(theory_err)?;
    report_dict(py, &rep)
}

/// Monte-Carlo check of the per-entry error tail against its
/// Bernstein-style envelope at the given thresholds.
#[pyfunction]
#[pyo3(signature = (n, m, rank, t_grid, *, mu_a = 1.0, mu_b = 1.0, noise = "gaussian", noise_scale = 0.05, trials = 2000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn check_entry_tail<'py>(
    py: Python<'py>,
    n: usize,
    m: usize,
    rank: usize,
    t_grid: Vec<f64>,
    mu_a: f64,
    mu_b: f64,
    noise: &str,
    noise_scale: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model =
        SignNoiseModel::new(n, m, rank, mu_a, mu_b, noise_from_args(noise, noise_scale)?, seed);
    let rep = py
        .detach(|| theory::check_entry_tail(&model, trials, &t_grid))
        .map_err(theory_err)?;
    report_dict(py, &rep)
}

#[pymodule]
pub fn lordba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAdapter>()?;
    m.add_class::<PyPacked>()?;
    m.add_class::<PyFactors>()?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(planted_toy_task, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_bandwidth_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(check_reconstruction_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_sign_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(check_signal_lowerbound, m)?)?;
    m.add_function(wrap_pyfunction!(check_entry_tail, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
