//! Python bindings. Images cross the boundary as `(width, height, data)`
//! with `data` a flat row-major list of floats.

use std::path::PathBuf;

use evrecon::events::{encode_events, read_event_file, write_event_file, Event, EventStream};
use evrecon::image::Image;
use evrecon::metrics;
use evrecon::nn::{read_checkpoint, write_checkpoint, ModelWeights, NetworkConfig, SkipMode};
use evrecon::pipeline::{self, Reconstructor, WindowPolicy};
use evrecon::simulator::{simulate_sequence, SimConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type PyImage = (usize, usize, Vec<f64>);

fn err(e: evrecon::Error) -> PyErr {
    match e {
        evrecon::Error::Io(e) => PyIOError::new_err(e.to_string()),
        evrecon::Error::Numeric(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_image(img: &PyImage) -> PyResult<Image> {
    Image::from_vec(img.0, img.1, img.2.clone()).map_err(err)
}

fn from_image(img: &Image) -> PyImage {
    (img.width, img.height, img.data.clone())
}

/// Time-sorted event stream on a fixed sensor.
#[pyclass(name = "EventStream", module = "evrecon_py", from_py_object)]
#[derive(Clone)]
pub struct PyEventStream {
    inner: EventStream,
}

#[pymethods]
impl PyEventStream {
    /// `events` is a list of `(t, x, y, polarity)` tuples.
    #[new]
    fn new(width: usize, height: usize, events: Vec<(f64, u16, u16, i8)>) -> PyResult<Self> {
        let events = events.into_iter().map(|(t, x, y, p)| Event::new(t, x, y, p)).collect();
        Ok(Self { inner: EventStream::new(width, height, events).map_err(err)? })
    }

    /// Reads text or EVB1 binary, detected from the file contents.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_event_file(&path).map_err(err)? })
    }

    /// Writes EVB1 when the path ends in `.evb`, text otherwise.
    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_event_file(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn events(&self) -> Vec<(f64, u16, u16, i8)> {
        self.inner.events().iter().map(|e| (e.t, e.x, e.y, e.polarity)).collect()
    }

    fn polarity_sum(&self) -> i64 {
        self.inner.polarity_sum()
    }

    /// Voxel grid of all events as a flat `[bins, height, width]` list.
    fn voxel_grid(&self, bins: usize) -> PyResult<Vec<f64>> {
        let t = encode_events(self.inner.events(), bins, self.inner.height(), self.inner.width()).map_err(err)?;
        Ok(t.values)
    }

    fn __repr__(&self) -> String {
        format!("EventStream({}x{}, {} events)", self.inner.width(), self.inner.height(), self.inner.len())
    }
}

/// Simulated sequence: events plus ground-truth frames and flows.
#[pyclass(name = "Sequence", module = "evrecon_py")]
pub struct PySequence {
    #[pyo3(get)]
    events: PyEventStream,
    #[pyo3(get)]
    gt_times: Vec<f64>,
    #[pyo3(get)]
    gt_frames: Vec<PyImage>,
    #[pyo3(get)]
    c_pos: f64,
    #[pyo3(get)]
    c_neg: f64,
}

#[pyfunction]
#[pyo3(signature = (width=64, height=64, duration=0.5, f_gt=50.0, f_sim=1000.0, seed=0, motion_scale=1.0))]
fn simulate(
    width: usize,
    height: usize,
    duration: f64,
    f_gt: f64,
    f_sim: f64,
    seed: u64,
    motion_scale: f64,
) -> PyResult<PySequence> {
    let cfg = SimConfig { width, height, duration, f_gt, f_sim, seed, motion_scale, texture: None };
    let seq = simulate_sequence(&cfg).map_err(err)?;
    Ok(PySequence {
        gt_frames: seq.gt_frames.iter().map(from_image).collect(),
        gt_times: seq.gt_times.clone(),
        c_pos: seq.thresholds.c_pos,
        c_neg: seq.thresholds.c_neg,
        events: PyEventStream { inner: seq.events },
    })
}

/// Reconstruction network with its weights.
#[pyclass(name = "Model", module = "evrecon_py")]
pub struct PyModel {
    weights: ModelWeights,
    config: NetworkConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized network.
    #[new]
    #[pyo3(signature = (num_encoders=3, num_residual=2, base_channels=32, concat_skips=false, input_bins=5, unroll=8, seed=0))]
    fn new(
        num_encoders: usize,
        num_residual: usize,
        base_channels: usize,
        concat_skips: bool,
        input_bins: usize,
        unroll: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = NetworkConfig {
            num_encoders,
            num_residual,
            base_channels,
            skip: if concat_skips { SkipMode::Concat } else { SkipMode::Sum },
            input_bins,
            unroll,
        };
        let weights = ModelWeights::init(&config, seed).map_err(err)?;
        Ok(Self { weights, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = read_checkpoint(&path, None).map_err(err)?;
        Ok(Self { weights: ck.weights, config: ck.config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.weights, &self.config, None).map_err(err)
    }

    #[getter]
    fn input_bins(&self) -> usize {
        self.config.input_bins
    }

    fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Returns `(timestamp, image)` pairs. Exactly one of `window_count` and
    /// `window_duration` (seconds) must be given.
    #[pyo3(signature = (events, window_count=None, window_duration=None, postprocess=true))]
    fn reconstruct(
        &self,
        py: Python<'_>,
        events: &PyEventStream,
        window_count: Option<usize>,
        window_duration: Option<f64>,
        postprocess: bool,
    ) -> PyResult<Vec<(f64, PyImage)>> {
        let policy = match (window_count, window_duration) {
            (Some(n), None) => WindowPolicy::Count(n),
            (None, Some(tau)) => WindowPolicy::Duration(tau),
            _ => return Err(PyValueError::new_err("give exactly one of window_count or window_duration")),
        };
        let frames = py.detach(|| {
            Reconstructor::new(&self.weights, &self.config, policy)?
                .with_postprocess(postprocess)
                .run(&events.inner)
        });
        Ok(frames.map_err(err)?.iter().map(|f| (f.timestamp, from_image(&f.image))).collect())
    }

    /// Merged output of count windows shifted by multiples of `shift` events.
    #[pyo3(signature = (events, window_count, shift, postprocess=true))]
    fn reconstruct_hfr(
        &self,
        py: Python<'_>,
        events: &PyEventStream,
        window_count: usize,
        shift: usize,
        postprocess: bool,
    ) -> PyResult<Vec<(f64, PyImage)>> {
        let frames = py.detach(|| {
            pipeline::hfr_synthesize(&events.inner, &self.weights, &self.config, window_count, shift, postprocess)
        });
        Ok(frames.map_err(err)?.iter().map(|f| (f.timestamp, from_image(&f.image))).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(encoders={}, residual={}, base={}, bins={}, params={})",
            self.config.num_encoders,
            self.config.num_residual,
            self.config.base_channels,
            self.config.input_bins,
            self.weights.param_count()
        )
    }
}

#[pyfunction]
fn ssim(a: PyImage, b: PyImage) -> PyResult<f64> {
    metrics::ssim(&to_image(&a)?, &to_image(&b)?).map_err(err)
}

#[pyfunction]
fn mse(a: PyImage, b: PyImage) -> PyResult<f64> {
    metrics::mse(&to_image(&a)?, &to_image(&b)?).map_err(err)
}

/// Robust min/max normalization to [0, 1].
#[pyfunction]
fn postprocess(img: PyImage) -> PyResult<PyImage> {
    Ok(from_image(&pipeline::postprocess(&to_image(&img)?)))
}

#[pymodule]
fn evrecon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEventStream>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
