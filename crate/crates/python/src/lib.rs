//! Python bindings: tensors, model construction, training, prediction,
//! checkpoints, synthetic data, metrics and rendering.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nowcast::data::{synth_advection as synth, SequenceLayout, SequenceSample, SynthConfig, Velocity};
use nowcast::eval::{evaluate as eval_forecaster, rmse as rmse_impl, Persistence};
use nowcast::layers::Mode;
use nowcast::model::{
    build_model, load_checkpoint, predict as predict_impl, save_checkpoint, train_step as step, InferenceMode,
    TrainingMeta,
};
use nowcast::optim::{bce_loss as bce, AdadeltaConfig, OptimState};
use nowcast::{ArchitectureConfig, ConvSpec, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::ShapeMismatch { .. }
        | Error::DimMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::AxisOutOfRange { .. }
        | Error::OutOfRange(_)
        | Error::InvalidConfig(_)
        | Error::Format(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "nowcast_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: nowcast::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: nowcast::Tensor::new(&shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f32) -> Self {
        PyTensor {
            inner: nowcast::Tensor::full(&shape, value),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.reshape(&shape).map_err(to_py)?,
        })
    }

    fn mean(&self) -> f32 {
        self.inner.mean()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "ArchitectureConfig", module = "nowcast_py", from_py_object)]
#[derive(Clone)]
struct PyArch {
    inner: ArchitectureConfig,
}

#[pymethods]
impl PyArch {
    /// The nine-layer full-scale configuration.
    #[staticmethod]
    fn default() -> Self {
        PyArch {
            inner: ArchitectureConfig::default(),
        }
    }

    /// Small configuration for quick experiments; `frames` sets both the
    /// input and output length.
    #[staticmethod]
    #[pyo3(signature = (frames=6, size=16, filters=8, blocks=2, autoregressive=false))]
    fn desk_scale(frames: usize, size: usize, filters: usize, blocks: usize, autoregressive: bool) -> PyResult<Self> {
        let mut a = ArchitectureConfig::desk_scale();
        a.input_frames = frames;
        a.output_frames = frames;
        a.frame_h = size;
        a.frame_w = size;
        // Keep the preset kernels; extra blocks use 3×3.
        a.blocks = (0..blocks)
            .map(|i| nowcast::BlockConfig {
                filters,
                kernel_size: a.blocks.get(i).map_or(3, |b| b.kernel_size),
            })
            .collect();
        if autoregressive {
            a.inference_mode = InferenceMode::Autoregressive;
        }
        a.validate().map_err(to_py)?;
        Ok(PyArch { inner: a })
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }

    #[getter]
    fn input_frames(&self) -> usize {
        self.inner.input_frames
    }

    #[getter]
    fn output_frames(&self) -> usize {
        self.inner.output_frames
    }

    #[getter]
    fn frame_size(&self) -> (usize, usize) {
        (self.inner.frame_h, self.inner.frame_w)
    }

    fn __repr__(&self) -> String {
        format!(
            "ArchitectureConfig(frames={}/{}, size={}x{}, blocks={})",
            self.inner.input_frames,
            self.inner.output_frames,
            self.inner.frame_h,
            self.inner.frame_w,
            self.inner.blocks.len()
        )
    }
}

#[pyclass(name = "Sample", module = "nowcast_py", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: SequenceSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn warning(&self) -> Option<String> {
        self.inner.warning.clone()
    }

    /// `[T_in, 1, h, w]`
    #[getter]
    fn inputs(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.input_tensor(),
        }
    }

    /// `[T_out, 1, h, w]`
    #[getter]
    fn targets(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.target_tensor(),
        }
    }
}

/// A model with its Adadelta state and training history.
#[pyclass(name = "Model", module = "nowcast_py")]
struct PyModel {
    params: nowcast::ModelParams<f32>,
    opt: OptimState<f32>,
    meta: TrainingMeta,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, seed=0, lr_scale=1.0))]
    fn new(arch: &PyArch, seed: u64, lr_scale: f64) -> PyResult<Self> {
        let params = build_model::<f32>(&arch.inner, seed).map_err(to_py)?;
        let config = AdadeltaConfig {
            lr_scale,
            ..Default::default()
        };
        config.validate().map_err(to_py)?;
        let opt = OptimState::new(config, params.trainable());
        Ok(PyModel {
            params,
            opt,
            meta: TrainingMeta::default(),
        })
    }

    #[getter]
    fn arch(&self) -> PyArch {
        PyArch {
            inner: self.params.arch.clone(),
        }
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.params.layer_kinds().len()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.meta.loss_history.clone()
    }

    /// Infer-mode forward over `[N, T, 1, h, w]` (running statistics).
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        let (y, _) = self.params.forward(&x.inner, Mode::Infer).map_err(to_py)?;
        Ok(PyTensor { inner: y })
    }

    fn predict(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let y = py.detach(|| predict_impl(&self.params, &x.inner)).map_err(to_py)?;
        Ok(PyTensor { inner: y })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    fn train_step(&mut self, py: Python<'_>, batch: Vec<PySample>) -> PyResult<f64> {
        let batch: Vec<SequenceSample> = batch.into_iter().map(|s| s.inner).collect();
        let (params, opt) = (&mut self.params, &mut self.opt);
        let loss = py.detach(|| step(params, opt, &batch)).map_err(to_py)?;
        self.meta.loss_history.push(loss);
        Ok(loss)
    }

    /// Pooled and per-lead-time RMSE as a dict.
    fn evaluate(&self, py: Python<'_>, samples: Vec<PySample>) -> PyResult<Py<PyAny>> {
        let samples: Vec<SequenceSample> = samples.into_iter().map(|s| s.inner).collect();
        let r = eval_forecaster(&self.params, &samples).map_err(to_py)?;
        report_dict(py, &r)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.params, Some(&self.opt), &self.meta).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        let opt = ck
            .optimizer
            .unwrap_or_else(|| OptimState::new(AdadeltaConfig::default(), ck.params.trainable()));
        Ok(PyModel {
            params: ck.params,
            opt,
            meta: ck.meta,
        })
    }
}

fn report_dict(py: Python<'_>, r: &nowcast::eval::EvalReport) -> PyResult<Py<PyAny>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("rmse_overall", r.rmse_overall)?;
    d.set_item("rmse_mean_per_sample", r.rmse_mean_per_sample)?;
    d.set_item("rmse_per_leadtime", r.rmse_per_leadtime.clone())?;
    d.set_item("n_samples", r.n_samples)?;
    d.set_item("config_fingerprint", r.config_fingerprint.clone())?;
    Ok(d.into_any().unbind())
}

/// Gaussian blobs drifting at a constant velocity.
#[pyfunction]
#[pyo3(signature = (n, seed=0, size=16, frames=6, vx=1.0, vy=0.0, noise=0.0, blobs=1))]
#[allow(clippy::too_many_arguments)]
fn synth_advection(
    n: usize,
    seed: u64,
    size: usize,
    frames: usize,
    vx: f64,
    vy: f64,
    noise: f64,
    blobs: usize,
) -> PyResult<Vec<PySample>> {
    let cfg = SynthConfig {
        frame_h: size,
        frame_w: size,
        blobs,
        velocity: Velocity::Fixed { vx, vy },
        noise,
        seed,
        layout: SequenceLayout {
            input_frames: frames,
            output_frames: frames,
            ..Default::default()
        },
        ..Default::default()
    };
    Ok(synth(&cfg, n)
        .map_err(to_py)?
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

/// Persistence-baseline report for `samples`.
#[pyfunction]
fn evaluate_persistence(py: Python<'_>, samples: Vec<PySample>) -> PyResult<Py<PyAny>> {
    let samples: Vec<SequenceSample> = samples.into_iter().map(|s| s.inner).collect();
    let r = eval_forecaster(&Persistence, &samples).map_err(to_py)?;
    report_dict(py, &r)
}

/// Mean binary cross-entropy and its gradient.
#[pyfunction]
fn bce_loss(pred: &PyTensor, target: &PyTensor) -> PyResult<(f64, PyTensor)> {
    let r = bce(&pred.inner, &target.inner).map_err(to_py)?;
    Ok((r.value, PyTensor { inner: r.gradient }))
}

#[pyfunction]
fn rmse(pred: &PyTensor, truth: &PyTensor) -> PyResult<f64> {
    rmse_impl(&pred.inner, &truth.inner).map_err(to_py)
}

/// Same-padded stride-1 convolution of `[N, C, H, W]` input.
#[pyfunction]
fn conv2d(input: &PyTensor, kernels: &PyTensor, bias: &PyTensor) -> PyResult<PyTensor> {
    let k = kernels.inner.shape();
    if k.len() != 4 {
        return Err(PyValueError::new_err("kernels must be [C_out, C_in, kh, kw]"));
    }
    let spec = ConvSpec::new(k[1], k[0], k[2], k[3]).map_err(to_py)?;
    let y = nowcast::conv2d_forward(&input.inner, &spec, &kernels.inner, &bias.inner).map_err(to_py)?;
    Ok(PyTensor { inner: y })
}

/// Writes a `[h, w]` or `[1, h, w]` tensor as a viridis PNG.
#[pyfunction]
fn render_frame(frame: &PyTensor, path: PathBuf) -> PyResult<()> {
    let s = frame.inner.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => {
            return Err(PyValueError::new_err(format!(
                "expected [h, w] or [1, h, w], got {s:?}"
            )))
        }
    };
    let f = nowcast::data::RadarFrame::from_pixels(
        chrono_epoch(),
        h,
        w,
        frame.inner.data().to_vec(),
        nowcast::data::FrameSource::Synthetic,
    )
    .map_err(to_py)?;
    nowcast::render::render_frame(&f, &path).map_err(to_py)
}

fn chrono_epoch() -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(0, 0).expect("epoch")
}

#[pymodule]
fn nowcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyArch>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_advection, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_persistence, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(render_frame, m)?)?;
    Ok(())
}
