//! Python bindings for the functa toolkit. Arrays cross the boundary as
//! lists of lists of floats (rows of a 2-D array); modulation vectors as
//! flat lists.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use functa_core::classify::{self, Classifier as CoreClassifier, ClassifierConfig};
use functa_core::codec::{checkpoints, Archive};
use functa_core::data;
use functa_core::ddpm::{self, EpsNet, EpsNetConfig, NoiseSchedule};
use functa_core::flow::{self, FlowConfig, FlowModel};
use functa_core::functaset::Functaset as CoreFunctaset;
use functa_core::infer::{self, MapConfig};
use functa_core::inr::{self, LatentModulatedSiren, SirenConfig};
use functa_core::meta::{inner_loop_fit, FitTask, InnerLoopConfig, MetaState};
use functa_core::opt::LrSchedule;
use functa_core::FunctaError;

fn to_py_err(e: FunctaError) -> PyErr {
    match e {
        FunctaError::Io(_) | FunctaError::Format(_) | FunctaError::Version { .. } | FunctaError::Digest { .. } => {
            PyIOError::new_err(e.to_string())
        }
        FunctaError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty array"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / ncols, ncols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn row_vector(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).unwrap()
}

/// Meta-learned base network plus learned per-dimension inner rates.
#[pyclass]
struct MetaLearner {
    state: MetaState,
}

#[pymethods]
impl MetaLearner {
    /// A fresh learner over `in_dim`-coordinate, `out_dim`-channel signals.
    #[new]
    #[pyo3(signature = (in_dim, out_dim, width, depth, latent_dim, omega0=30.0, n_inner=3, outer_lr=1e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_dim: usize,
        out_dim: usize,
        width: usize,
        depth: usize,
        latent_dim: usize,
        omega0: f64,
        n_inner: usize,
        outer_lr: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = SirenConfig::new(in_dim, out_dim, width, depth).with_omega0(omega0);
        let model = LatentModulatedSiren::init(config, latent_dim, seed).map_err(to_py_err)?;
        let inner = InnerLoopConfig {
            n_inner,
            ..InnerLoopConfig::default()
        };
        Ok(MetaLearner {
            state: MetaState::new(model, inner, outer_lr, seed.wrapping_add(1)),
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.state.model.latent_dim
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.state.model.config.param_count()
    }

    /// One second-order outer step over a batch of (coords, targets) pairs.
    /// Returns the mean post-inner-loop loss.
    fn meta_step(&mut self, batch: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>) -> PyResult<f64> {
        let arrays: Vec<(Array2<f64>, Array2<f64>)> = batch
            .into_iter()
            .map(|(c, t)| Ok((to_array(c)?, to_array(t)?)))
            .collect::<PyResult<_>>()?;
        let tasks: Vec<FitTask> = arrays
            .iter()
            .map(|(c, t)| FitTask::Grid {
                coords: c,
                targets: t,
            })
            .collect();
        self.state.meta_step(&tasks).map_err(to_py_err)
    }

    /// Fits a modulation to one signal with the base network frozen.
    /// Returns (modulation, per-step losses).
    fn fit_modulation(
        &self,
        coords: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let c = to_array(coords)?;
        let t = to_array(targets)?;
        let task = FitTask::Grid {
            coords: &c,
            targets: &t,
        };
        let (phi, losses) = inner_loop_fit(
            &self.state.model,
            Some(&self.state.inner_lrs),
            &self.state.inner_cfg,
            &task,
        )
        .map_err(to_py_err)?;
        Ok((phi.row(0).to_vec(), losses))
    }

    /// Evaluates the network at the given coordinates for a modulation.
    fn forward(&self, modulation: Vec<f64>, coords: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let phi = row_vector(modulation);
        let c = to_array(coords)?;
        let out = self.state.model.forward(&phi, &c).map_err(to_py_err)?;
        Ok(to_rows(&out))
    }

    /// Completes a partially observed signal by MAP inference (no prior).
    /// Returns dense predictions at every coordinate.
    #[pyo3(signature = (coords, targets, observed, steps=200, lr=1e-2))]
    fn impute(
        &self,
        coords: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        observed: Vec<bool>,
        steps: usize,
        lr: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let c = to_array(coords)?;
        let t = to_array(targets)?;
        let cfg = MapConfig {
            steps,
            lr,
            ..MapConfig::default()
        };
        let (preds, _) =
            infer::impute(&self.state.model, &c, &t, &observed, None, &cfg).map_err(to_py_err)?;
        Ok(to_rows(&preds))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoints::save_meta_state(&self.state)
            .save(path)
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(path).map_err(to_py_err)?;
        Ok(MetaLearner {
            state: checkpoints::load_meta_state(&a).map_err(to_py_err)?,
        })
    }
}

/// A persisted collection of modulation vectors with labels and
/// normalization statistics.
#[pyclass]
struct Functaset {
    inner: CoreFunctaset,
}

#[pymethods]
impl Functaset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Functaset {
            inner: CoreFunctaset::load(path).map_err(to_py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.clone()
    }

    fn modulations(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.modulations)
    }

    /// Modulations mapped through the stored normalization.
    fn normalized(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.normalized())
    }
}

/// Neural spline flow over modulation space.
#[pyclass]
struct Flow {
    model: FlowModel,
}

#[pymethods]
impl Flow {
    #[new]
    #[pyo3(signature = (dim, n_layers, n_classes=0, hidden=128, seed=0))]
    fn new(dim: usize, n_layers: usize, n_classes: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let mut config = FlowConfig::new(dim, n_layers);
        config.n_classes = n_classes;
        config.hidden = hidden;
        Ok(Flow {
            model: FlowModel::init(config, seed).map_err(to_py_err)?,
        })
    }

    /// Negative-log-likelihood training; returns the per-iteration NLL.
    #[pyo3(signature = (data, labels=None, iters=500, batch=32, lr=3e-4, warmup=100, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data: Vec<Vec<f64>>,
        labels: Option<Vec<u32>>,
        iters: usize,
        batch: usize,
        lr: f64,
        warmup: u64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let d = to_array(data)?;
        flow::train_flow(
            &mut self.model,
            &d,
            labels.as_deref(),
            iters,
            batch,
            seed,
            &LrSchedule::new(lr, warmup),
        )
        .map_err(to_py_err)
    }

    /// Exact log-density of each row.
    #[pyo3(signature = (data, labels=None))]
    fn log_prob(&self, data: Vec<Vec<f64>>, labels: Option<Vec<u32>>) -> PyResult<Vec<f64>> {
        let d = to_array(data)?;
        Ok(self
            .model
            .log_prob(&d, labels.as_deref())
            .map_err(to_py_err)?
            .to_vec())
    }

    #[pyo3(signature = (n, label=None, temperature=1.0, seed=0))]
    fn sample(
        &self,
        n: usize,
        label: Option<u32>,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let labels: Option<Vec<u32>> = label.map(|l| vec![l; n]);
        let s = self
            .model
            .sample(n, labels.as_deref(), temperature, seed)
            .map_err(to_py_err)?;
        Ok(to_rows(&s))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoints::save_flow(&self.model).save(path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(path).map_err(to_py_err)?;
        Ok(Flow {
            model: checkpoints::load_flow(&a).map_err(to_py_err)?,
        })
    }
}

/// Denoising diffusion model over modulation space.
#[pyclass]
struct Ddpm {
    net: EpsNet,
    schedule: NoiseSchedule,
}

#[pymethods]
impl Ddpm {
    #[new]
    #[pyo3(signature = (dim, width=64, n_blocks=3, schedule_steps=1000, seed=0))]
    fn new(dim: usize, width: usize, n_blocks: usize, schedule_steps: usize, seed: u64) -> PyResult<Self> {
        Ok(Ddpm {
            net: EpsNet::init(EpsNetConfig::new(dim, width, n_blocks), seed).map_err(to_py_err)?,
            schedule: NoiseSchedule::linear(schedule_steps).map_err(to_py_err)?,
        })
    }

    /// Noise-prediction training; returns the per-iteration loss.
    #[pyo3(signature = (data, iters=500, batch=32, lr=1e-3, warmup=100, seed=0))]
    fn train(
        &mut self,
        data: Vec<Vec<f64>>,
        iters: usize,
        batch: usize,
        lr: f64,
        warmup: u64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let d = to_array(data)?;
        ddpm::train_ddpm(
            &mut self.net,
            &self.schedule,
            &d,
            iters,
            batch,
            seed,
            &LrSchedule::new(lr, warmup),
        )
        .map_err(to_py_err)
    }

    /// Ancestral sampling from pure noise.
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let s = ddpm::sample(&self.net, &self.schedule, n, seed).map_err(to_py_err)?;
        Ok(to_rows(&s))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoints::save_eps_net(&self.net, self.schedule.steps())
            .save(path)
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(path).map_err(to_py_err)?;
        let (net, steps) = checkpoints::load_eps_net(&a).map_err(to_py_err)?;
        Ok(Ddpm {
            net,
            schedule: NoiseSchedule::linear(steps).map_err(to_py_err)?,
        })
    }
}

/// MLP classifier over modulation vectors.
#[pyclass]
struct Classifier {
    model: CoreClassifier,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (in_dim, n_classes, width=128, depth=2, seed=0))]
    fn new(in_dim: usize, n_classes: usize, width: usize, depth: usize, seed: u64) -> PyResult<Self> {
        Ok(Classifier {
            model: CoreClassifier::init(
                ClassifierConfig::new(in_dim, n_classes, width, depth),
                seed,
            )
            .map_err(to_py_err)?,
        })
    }

    /// Cross-entropy training; returns (per-iteration losses, EMA accuracy).
    #[pyo3(signature = (data, labels, iters=500, batch=32, lr=1e-4, seed=0))]
    fn train(
        &mut self,
        data: Vec<Vec<f64>>,
        labels: Vec<u32>,
        iters: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<(Vec<f64>, f64)> {
        let d = to_array(data)?;
        let stats = classify::train_classifier(&mut self.model, &d, &labels, iters, batch, lr, seed)
            .map_err(to_py_err)?;
        Ok((stats.losses, stats.ema_accuracy))
    }

    fn predict(&self, data: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
        let d = to_array(data)?;
        self.model.predict(&d).map_err(to_py_err)
    }

    fn evaluate(&self, data: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<f64> {
        let d = to_array(data)?;
        Ok(classify::evaluate(&self.model, &d, &labels)
            .map_err(to_py_err)?
            .accuracy)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoints::save_classifier(&self.model)
            .save(path)
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(path).map_err(to_py_err)?;
        Ok(Classifier {
            model: checkpoints::load_classifier(&a).map_err(to_py_err)?,
        })
    }
}

/// Row-major (h*w, 2) coordinate grid over [-1, 1]^2.
#[pyfunction]
fn grid_2d(h: usize, w: usize) -> Vec<Vec<f64>> {
    to_rows(&data::grid_2d(h, w).coords)
}

/// Synthetic blob image dataset entry: (targets, label).
#[pyfunction]
fn make_blob_item(resolution: usize, seed: u64, index: usize) -> (Vec<Vec<f64>>, u32) {
    let spec = data::SyntheticSpec {
        kind: data::SyntheticKind::BlobImages,
        count: index + 1,
        resolution,
        seed,
    };
    let item = data::make_item(&spec, index);
    (to_rows(&item.targets), item.label.unwrap_or(0) as u32)
}

/// Peak signal-to-noise ratio for a mean squared error (data range 1).
#[pyfunction]
fn psnr(mse: f64) -> f64 {
    inr::psnr(mse)
}

#[pymodule]
fn functa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MetaLearner>()?;
    m.add_class::<Functaset>()?;
    m.add_class::<Flow>()?;
    m.add_class::<Ddpm>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(grid_2d, m)?)?;
    m.add_function(wrap_pyfunction!(make_blob_item, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
