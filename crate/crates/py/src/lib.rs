use po2quant::fpsim::{self, QuantizedLayer};
use po2quant::grad::{self, GradScaleState, RoundingMode};
use po2quant::harness::toy::{toy_rtlm_experiment, ToyQuantizerExperimentConfig};
use po2quant::msqe::{self as fitting, GvaState, MsqeFitConfig, MsqeQuantizer};
use po2quant::quant::{self, Po2Scale, QuantConfig};
use po2quant::{io, IntTensor, QuantError, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(po2quant_py, QuantizationError, PyValueError);

fn err(e: QuantError) -> PyErr {
    match e {
        QuantError::Io(io) => PyIOError::new_err(io.to_string()),
        other => QuantizationError::new_err(other.to_string()),
    }
}

fn scale(exponent: i32) -> PyResult<Po2Scale> {
    Po2Scale::new(exponent).map_err(err)
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    /// `shape` defaults to `[len(data)]`.
    #[new]
    #[pyo3(signature = (data, shape=None))]
    fn new(data: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<Self> {
        let shape = shape.unwrap_or_else(|| vec![data.len()]);
        Ok(Self(Tensor::new(data, shape).map_err(err)?))
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Integer codes, row-major.
#[pyclass(name = "IntTensor", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyIntTensor(IntTensor);

#[pymethods]
impl PyIntTensor {
    #[new]
    #[pyo3(signature = (data, shape=None))]
    fn new(data: Vec<i64>, shape: Option<Vec<usize>>) -> PyResult<Self> {
        let shape = shape.unwrap_or_else(|| vec![data.len()]);
        Ok(Self(IntTensor::new(data, shape).map_err(err)?))
    }

    #[getter]
    fn data(&self) -> Vec<i64> {
        self.0.data().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("IntTensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "QuantConfig", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyQuantConfig(QuantConfig);

#[pymethods]
impl PyQuantConfig {
    #[new]
    #[pyo3(signature = (bits=4, signed=true))]
    fn new(bits: u32, signed: bool) -> PyResult<Self> {
        Ok(Self(QuantConfig::new(bits, signed).map_err(err)?))
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.0.bit_width()
    }

    #[getter]
    fn signed(&self) -> bool {
        self.0.is_signed()
    }

    #[getter]
    fn q_min(&self) -> i64 {
        self.0.q_min()
    }

    #[getter]
    fn q_max(&self) -> i64 {
        self.0.q_max()
    }

    fn __repr__(&self) -> String {
        format!("QuantConfig(bits={}, signed={})", self.bits(), self.signed())
    }
}

#[pyclass(name = "MsqeFitConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMsqeFitConfig(MsqeFitConfig);

#[pymethods]
impl PyMsqeFitConfig {
    /// `sigma_outlier=None` disables the outlier mask.
    #[new]
    #[pyo3(signature = (n_iters=2, line_search_range=2, sigma_outlier=None, use_gva=false))]
    fn new(n_iters: usize, line_search_range: usize, sigma_outlier: Option<f64>, use_gva: bool) -> PyResult<Self> {
        let cfg = MsqeFitConfig {
            n_iters,
            line_search_range,
            sigma_outlier,
            use_gva,
        };
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn n_iters(&self) -> usize {
        self.0.n_iters
    }

    #[getter]
    fn line_search_range(&self) -> usize {
        self.0.line_search_range
    }

    #[getter]
    fn sigma_outlier(&self) -> Option<f64> {
        self.0.sigma_outlier
    }

    #[getter]
    fn use_gva(&self) -> bool {
        self.0.use_gva
    }
}

#[pyfunction]
fn po2_project(delta: f64) -> PyResult<i32> {
    Ok(quant::po2_project(delta).map_err(err)?.exponent())
}

#[pyfunction]
fn quantize(w: &PyTensor, exponent: i32, cfg: &PyQuantConfig) -> PyResult<PyTensor> {
    Ok(PyTensor(quant::quantize(&w.0, scale(exponent)?, &cfg.0).map_err(err)?))
}

#[pyfunction]
fn quant_codes(w: &PyTensor, exponent: i32, cfg: &PyQuantConfig) -> PyResult<PyIntTensor> {
    Ok(PyIntTensor(quant::quant_codes(&w.0, scale(exponent)?, &cfg.0).map_err(err)?))
}

/// Sum of squared quantization errors at `2^exponent`.
#[pyfunction]
#[pyo3(signature = (w, exponent, cfg, weights=None))]
fn msqe(w: &PyTensor, exponent: i32, cfg: &PyQuantConfig, weights: Option<&PyTensor>) -> PyResult<f64> {
    quant::msqe_at(&w.0, scale(exponent)?, &cfg.0, weights.map(|t| &t.0)).map_err(err)
}

#[pyfunction]
fn clip_fraction(w: &PyTensor, exponent: i32, cfg: &PyQuantConfig) -> PyResult<f64> {
    Ok(quant::clip_fraction(&w.0, scale(exponent)?, &cfg.0))
}

/// Exponent after `n_iters` rounds of the least-squares fit from `delta_init`.
#[pyfunction]
fn fit_scale_msqe(w: &PyTensor, delta_init: f64, n_iters: usize, cfg: &PyQuantConfig) -> PyResult<i32> {
    Ok(fitting::fit_scale_msqe(&w.0, delta_init, n_iters, &cfg.0).map_err(err)?.exponent())
}

#[pyfunction]
#[pyo3(signature = (w, exponent, n_range, cfg, weights=None))]
fn line_search(
    w: &PyTensor,
    exponent: i32,
    n_range: usize,
    cfg: &PyQuantConfig,
    weights: Option<&PyTensor>,
) -> PyResult<i32> {
    let s = fitting::line_search(&w.0, scale(exponent)?, n_range, &cfg.0, weights.map(|t| &t.0)).map_err(err)?;
    Ok(s.exponent())
}

#[pyfunction]
fn outlier_mask(w: &PyTensor, sigma_outlier: f64) -> PyTensor {
    PyTensor(fitting::outlier_mask(&w.0, sigma_outlier))
}

/// Full fit; returns a dict with the exponent and the MSQE at each stage.
/// `moments` are per-element squared-gradient averages used as weights.
#[pyfunction]
#[pyo3(signature = (w, cfg, fit=None, delta_init=None, moments=None))]
fn fit_po2_scale<'py>(
    py: Python<'py>,
    w: &PyTensor,
    cfg: &PyQuantConfig,
    fit: Option<&PyMsqeFitConfig>,
    delta_init: Option<f64>,
    moments: Option<&PyTensor>,
) -> PyResult<Bound<'py, PyDict>> {
    let fit = fit.map(|f| f.0).unwrap_or_default();
    let delta_init = delta_init.unwrap_or_else(|| MsqeQuantizer::range_init(&w.0, &cfg.0));
    let gva = match moments {
        Some(m) => Some(GvaState::from_moments(m.0.clone(), fitting::DEFAULT_GVA_DECAY, 1).map_err(err)?),
        None => None,
    };
    let r = fitting::fit_po2_scale(&w.0, delta_init, &fit, gva.as_ref(), &cfg.0).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("exponent", r.scale.exponent())?;
    d.set_item("scale", r.scale.value())?;
    d.set_item("delta_init", r.delta_init)?;
    d.set_item("msqe_init", r.msqe_init)?;
    d.set_item("msqe_fit", r.msqe_fit)?;
    d.set_item("msqe_final", r.msqe_final)?;
    d.set_item("clip_fraction", r.clip_fraction)?;
    d.set_item("weighted", r.weighted)?;
    Ok(d)
}

/// Learned log2 step with power-of-two rounding ("ceil", "round" or "rtlm").
#[pyclass(name = "GradScaleState")]
struct PyGradScaleState {
    state: GradScaleState,
    cfg: QuantConfig,
}

fn mode(name: &str) -> PyResult<RoundingMode> {
    name.parse().map_err(err)
}

#[pymethods]
impl PyGradScaleState {
    #[new]
    #[pyo3(signature = (delta_log2, cfg, mode="rtlm", ema_decay=grad::DEFAULT_EMA_DECAY))]
    fn new(delta_log2: f64, cfg: &PyQuantConfig, mode: &str, ema_decay: f64) -> PyResult<Self> {
        let state = GradScaleState::new(delta_log2, self::mode(mode)?)
            .and_then(|s| s.with_ema_decay(ema_decay))
            .map_err(err)?;
        Ok(Self { state, cfg: cfg.0 })
    }

    #[getter]
    fn delta_log2(&self) -> f64 {
        self.state.delta_log2
    }

    #[setter]
    fn set_delta_log2(&mut self, v: f64) -> PyResult<()> {
        if !v.is_finite() {
            return Err(err(QuantError::Domain(v)));
        }
        self.state.delta_log2 = v;
        Ok(())
    }

    #[getter]
    fn ema_log2(&self) -> f64 {
        self.state.ema_log2
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.state.frozen
    }

    #[getter]
    fn mode(&self) -> String {
        self.state.rounding_mode.to_string()
    }

    /// Exponent the forward pass would use for `w`.
    fn exponent(&self, w: &PyTensor) -> PyResult<i32> {
        Ok(grad::effective_scale(&self.state, &w.0, None, &self.cfg).map_err(err)?.exponent())
    }

    /// Quantizes `w` and records the exponent in the running average.
    fn forward(&mut self, w: &PyTensor) -> PyResult<(PyTensor, i32)> {
        let observed = grad::effective_scale(&self.state, &w.0, None, &self.cfg).map_err(err)?;
        let (next, used) = grad::freeze_step(&self.state, observed).map_err(err)?;
        self.state = next;
        let q = quant::quantize(&w.0, used, &self.cfg).map_err(err)?;
        Ok((PyTensor(q), used.exponent()))
    }

    /// Input gradient and scalar `d loss / d delta_log2`.
    fn backward(&self, w: &PyTensor, upstream: &PyTensor) -> PyResult<(PyTensor, f64)> {
        let s = self.state.last_po2;
        let (gx, gd) = grad::backward_with_scale(&w.0, s, &self.state, &upstream.0, &self.cfg).map_err(err)?;
        Ok((PyTensor(gx), gd))
    }

    fn freeze(&mut self) -> PyResult<()> {
        self.state.freeze().map_err(err)
    }
}

#[pyfunction]
fn ste_scale_gradient(x: f64, cfg: &PyQuantConfig) -> f64 {
    grad::ste_scale_gradient(x, &cfg.0)
}

#[pyfunction]
fn shift_round(acc: i64, shift: i32) -> PyResult<i64> {
    fpsim::shift_round(acc, shift).map_err(err)
}

/// One fully-connected layer executed with integers and shifts only.
#[pyclass(name = "QuantizedLayer", frozen)]
struct PyQuantizedLayer(QuantizedLayer);

#[pymethods]
impl PyQuantizedLayer {
    /// `bias_exponent` defaults to `weight_exponent + input_exponent`.
    #[new]
    #[pyo3(signature = (
        weight_codes, weight_exponent, weight_cfg, bias_codes,
        input_exponent, input_cfg, output_exponent, output_cfg, bias_exponent=None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        weight_codes: &PyIntTensor,
        weight_exponent: i32,
        weight_cfg: &PyQuantConfig,
        bias_codes: &PyIntTensor,
        input_exponent: i32,
        input_cfg: &PyQuantConfig,
        output_exponent: i32,
        output_cfg: &PyQuantConfig,
        bias_exponent: Option<i32>,
    ) -> PyResult<Self> {
        let layer = QuantizedLayer::new(
            weight_codes.0.clone(),
            scale(weight_exponent)?,
            weight_cfg.0,
            bias_codes.0.clone(),
            scale(bias_exponent.unwrap_or(weight_exponent + input_exponent))?,
            scale(input_exponent)?,
            input_cfg.0,
            scale(output_exponent)?,
            output_cfg.0,
        )
        .map_err(err)?;
        Ok(Self(layer))
    }

    #[getter]
    fn shift(&self) -> i32 {
        self.0.shift()
    }

    fn int_forward(&self, x: &PyIntTensor) -> PyResult<PyIntTensor> {
        Ok(PyIntTensor(fpsim::int_forward(&self.0, &x.0).map_err(err)?))
    }

    fn float_reference_forward(&self, x: &PyIntTensor) -> PyResult<PyIntTensor> {
        Ok(PyIntTensor(fpsim::float_reference_forward(&self.0, &x.0).map_err(err)?))
    }

    /// Index of the first output where the two paths disagree, if any.
    fn first_mismatch(&self, x: &PyIntTensor) -> PyResult<Option<usize>> {
        fpsim::first_mismatch(&self.0, &x.0).map_err(err)
    }
}

/// Returns a `Tensor` or an `IntTensor` depending on the stored dtype.
#[pyfunction]
fn load_tensor(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    Ok(match io::load(path).map_err(err)? {
        io::TensorFile::F64(t) => Py::new(py, PyTensor(t))?.into_any(),
        io::TensorFile::I64(t) => Py::new(py, PyIntTensor(t))?.into_any(),
    })
}

#[pyfunction]
fn save_tensor(path: &str, t: &Bound<'_, PyAny>) -> PyResult<()> {
    if let Ok(f) = t.cast::<PyTensor>() {
        io::save_f64(path, &f.get().0).map_err(err)
    } else {
        let i = t.cast::<PyIntTensor>()?;
        io::save_i64(path, &i.get().0).map_err(err)
    }
}

/// Exponent trajectory of the noisy toy quantizer; keys are series names.
#[pyfunction]
#[pyo3(signature = (mode="rtlm", noise_sigma=0.05, seed=0, steps=1000))]
fn toy_rtlm<'py>(
    py: Python<'py>,
    mode: &str,
    noise_sigma: f64,
    seed: u64,
    steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ToyQuantizerExperimentConfig {
        mode: self::mode(mode)?,
        noise_sigma,
        seed,
        steps,
        ..ToyQuantizerExperimentConfig::rtlm_default()
    };
    let run = toy_rtlm_experiment(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    for s in run.series() {
        d.set_item(s.name.as_str(), s.values().to_vec())?;
    }
    d.set_item("transitions", run.transitions)?;
    Ok(d)
}

#[pymodule]
fn po2quant_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("QuantizationError", m.py().get_type::<QuantizationError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyIntTensor>()?;
    m.add_class::<PyQuantConfig>()?;
    m.add_class::<PyMsqeFitConfig>()?;
    m.add_class::<PyGradScaleState>()?;
    m.add_class::<PyQuantizedLayer>()?;
    m.add_function(wrap_pyfunction!(po2_project, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(quant_codes, m)?)?;
    m.add_function(wrap_pyfunction!(msqe, m)?)?;
    m.add_function(wrap_pyfunction!(clip_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(fit_scale_msqe, m)?)?;
    m.add_function(wrap_pyfunction!(line_search, m)?)?;
    m.add_function(wrap_pyfunction!(outlier_mask, m)?)?;
    m.add_function(wrap_pyfunction!(fit_po2_scale, m)?)?;
    m.add_function(wrap_pyfunction!(ste_scale_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(shift_round, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(toy_rtlm, m)?)?;
    Ok(())
}
