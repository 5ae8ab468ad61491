//! Python bindings: configuration, models, tracking, synthetic data,
//! training, evaluation and the scan and metric primitives.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mcitrack::bbox::BBox;
use mcitrack::config::RunConfig;
use mcitrack::eval::{self, run_one_pass_eval};
use mcitrack::head::{self, FrameLoss, Lambdas};
use mcitrack::image::Image;
use mcitrack::model::Model;
use mcitrack::ssm::{self, HiddenState, SsmParams};
use mcitrack::synth::{generate_set, SyntheticSequence};
use mcitrack::tracker::{Tracker, TrackerState};
use mcitrack::{train, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Contract(_) | Error::Ssm(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

type Xywh = (f64, f64, f64, f64);

fn to_box(b: Xywh) -> BBox {
    BBox::from_xywh(b.0, b.1, b.2, b.3)
}

fn from_box(b: &BBox) -> Xywh {
    let [x, y, w, h] = b.to_xywh();
    (x, y, w, h)
}

fn tensor(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("{what} rows have unequal lengths")));
    }
    Ok(Tensor::from_vec(rows.len(), width, rows.concat()))
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn parse_config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::from_toml(t).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

/// Run configuration, built from TOML text.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        Ok(Self { inner: parse_config(toml)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }
}

/// RGB image with channel values in `[0, 1]`.
#[pyclass(name = "Frame")]
struct PyFrame {
    inner: Image,
}

#[pymethods]
impl PyFrame {
    /// `pixels` is interleaved RGB, row-major, `width * height * 3` values.
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: Image::from_raw(width, height, pixels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Image::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixels(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }
}

/// Procedural moving-shape video.
#[pyclass(name = "SyntheticSequence")]
struct PySequence {
    inner: SyntheticSequence,
}

#[pymethods]
impl PySequence {
    /// Uses the `[data]` section of `config` for the generator settings.
    #[new]
    #[pyo3(signature = (seed, config=None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self {
            inner: SyntheticSequence::generate(&cfg.data.synth(), seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, t: usize) -> PyResult<PyFrame> {
        self.check(t)?;
        Ok(PyFrame { inner: self.inner.render(t) })
    }

    fn gt(&self, t: usize) -> PyResult<Xywh> {
        self.check(t)?;
        Ok(from_box(&self.inner.gt(t)))
    }

    fn dump(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.dump(&dir).map_err(py_err)
    }
}

impl PySequence {
    fn check(&self, t: usize) -> PyResult<()> {
        if t >= self.inner.len() {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        Ok(())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Arc<Model>,
}

#[pymethods]
impl PyModel {
    /// Fresh model from the model sections of `config`.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self {
            inner: Arc::new(Model::new(cfg.model(), seed).map_err(py_err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(Model::load(&path).map_err(py_err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Number of CIF blocks, which is also the number of hidden states.
    fn num_cif_blocks(&self) -> usize {
        self.inner.cif.len()
    }

    /// Trains on the synthetic training set of `config`; returns the mean
    /// loss of every epoch.
    #[pyo3(signature = (config=None))]
    fn fit(&mut self, config: Option<&str>) -> PyResult<Vec<f64>> {
        let cfg = parse_config(config)?;
        if cfg.model() != self.inner.config {
            return Err(PyValueError::new_err("config model sections differ from this model"));
        }
        let sequences = generate_set(&cfg.data.synth(), cfg.data.seed, cfg.data.train_sequences).map_err(py_err)?;
        let model = Arc::make_mut(&mut self.inner);
        let report = train::fit(model, &sequences, &cfg.sample(), &cfg.train, None).map_err(py_err)?;
        Ok(report.epoch_losses)
    }

    /// One-pass evaluation on the synthetic evaluation set of `config`.
    #[pyo3(signature = (config=None))]
    fn evaluate(&self, config: Option<&str>) -> PyResult<Vec<(String, f64)>> {
        let cfg = parse_config(config)?;
        let sequences = generate_set(&cfg.data.eval_synth(), cfg.data.eval_seed, cfg.data.eval_sequences).map_err(py_err)?;
        let r = run_one_pass_eval(|| Tracker::new(&self.inner, cfg.tracker.clone()), &sequences).map_err(py_err)?;
        Ok(vec![
            ("auc".into(), r.auc),
            ("precision".into(), r.precision),
            ("norm_precision".into(), r.norm_precision),
            ("ao".into(), r.ao),
            ("sr_050".into(), r.sr_050),
            ("sr_075".into(), r.sr_075),
        ])
    }
}

/// Streaming tracker with gated hidden-state commits.
#[pyclass(name = "Tracker")]
struct PyTracker {
    model: Arc<Model>,
    config: mcitrack::TrackerConfig,
    state: Option<TrackerState>,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (model, config=None, threshold=None, update_interval=None))]
    fn new(model: PyRef<'_, PyModel>, config: Option<&str>, threshold: Option<f64>, update_interval: Option<usize>) -> PyResult<Self> {
        let mut tc = parse_config(config)?.tracker;
        if let Some(t) = threshold {
            tc.threshold = t;
        }
        if let Some(t) = update_interval {
            tc.update_interval = t;
        }
        tc.validate().map_err(py_err)?;
        Ok(Self {
            model: model.inner.clone(),
            config: tc,
            state: None,
        })
    }

    fn init(&mut self, frame: PyRef<'_, PyFrame>, bbox: Xywh) -> PyResult<()> {
        let mut t = Tracker::new(&self.model, self.config.clone());
        t.init(&frame.inner, to_box(bbox)).map_err(py_err)?;
        self.state = t.into_state();
        Ok(())
    }

    /// Returns `((x, y, w, h), score, committed)`.
    fn track(&mut self, frame: PyRef<'_, PyFrame>) -> PyResult<(Xywh, f64, bool)> {
        let state = self
            .state
            .take()
            .ok_or_else(|| PyValueError::new_err("tracker used before init"))?;
        let mut t = Tracker::from_state(&self.model, state);
        let out = t.track_frame(&frame.inner);
        self.state = t.into_state();
        let out = out.map_err(py_err)?;
        Ok((from_box(&out.bbox), out.score, out.committed))
    }

    /// Current hidden state of every CIF block.
    fn hidden_states(&self) -> Vec<Vec<Vec<f64>>> {
        self.state
            .as_ref()
            .map(|s| s.cif_states.iter().map(|c| nested(&c.hidden.h)).collect())
            .unwrap_or_default()
    }

    #[getter]
    fn bank_size(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.memory_bank.len())
    }
}

/// Selective scan over `x` `(tokens, channels)`; returns `(y, h_final)`.
#[pyfunction]
#[pyo3(signature = (x, a, delta, b, c, d=None, h0=None))]
fn selective_scan(
    x: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Option<Vec<f64>>,
    h0: Option<Vec<Vec<f64>>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let a = tensor(a, "a")?;
    let params = SsmParams::new(a.clone(), d, tensor(delta, "delta")?, tensor(b, "b")?, tensor(c, "c")?)
        .map_err(|e| py_err(e.into()))?;
    let h = match h0 {
        Some(h) => HiddenState {
            h: tensor(h, "h0")?,
            frame_index: 0,
        },
        None => HiddenState::zeros(a.rows(), a.cols()),
    };
    let (y, h) = ssm::selective_scan(&tensor(x, "x")?, &params, &h).map_err(|e| py_err(e.into()))?;
    Ok((nested(&y), nested(&h.h)))
}

/// Boxes are `(x, y, w, h)`.
#[pyfunction]
fn iou(a: Xywh, b: Xywh) -> f64 {
    mcitrack::bbox::iou(&to_box(a), &to_box(b))
}

#[pyfunction]
fn giou(a: Xywh, b: Xywh) -> f64 {
    head::giou(&to_box(a), &to_box(b))
}

/// Weighted sum over frames of `(cls, l1, giou)` terms.
#[pyfunction]
#[pyo3(signature = (frames, lambdas=(1.0, 5.0, 2.0)))]
fn total_loss(frames: Vec<(f64, f64, f64)>, lambdas: (f64, f64, f64)) -> PyResult<f64> {
    let frames: Vec<FrameLoss> = frames
        .into_iter()
        .map(|(cls, l1, giou)| FrameLoss { cls, l1, giou })
        .collect();
    let l = Lambdas {
        cls: lambdas.0,
        l1: lambdas.1,
        giou: lambdas.2,
    };
    head::total_loss(&frames, &l).map_err(py_err)
}

#[pyfunction]
fn success_auc(ious: Vec<f64>) -> PyResult<f64> {
    if ious.is_empty() {
        return Err(PyValueError::new_err("empty IoU list"));
    }
    Ok(eval::success_auc(&ious))
}

#[pyfunction]
fn ao_sr(ious: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if ious.is_empty() {
        return Err(PyValueError::new_err("empty IoU list"));
    }
    Ok(eval::ao_sr(&ious))
}

/// `(precision, normalized precision)` of predicted centers against boxes.
#[pyfunction]
#[pyo3(signature = (centers, gt, pixel_threshold=20.0))]
fn precision_metrics(centers: Vec<(f64, f64)>, gt: Vec<Xywh>, pixel_threshold: f64) -> PyResult<(f64, f64)> {
    if centers.len() != gt.len() {
        return Err(PyValueError::new_err("centers and gt differ in length"));
    }
    let gt: Vec<BBox> = gt.into_iter().map(to_box).collect();
    Ok(eval::precision_metrics(&centers, &gt, pixel_threshold))
}

#[pymodule]
fn mcitrack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(success_auc, m)?)?;
    m.add_function(wrap_pyfunction!(ao_sr, m)?)?;
    m.add_function(wrap_pyfunction!(precision_metrics, m)?)?;
    Ok(())
}
