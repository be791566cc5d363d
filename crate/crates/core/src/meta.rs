//! Double-loop meta-learning of the shared base network: the inner loop fits
//! per-datapoint latent modulations from zero by a few SGD steps (optionally
//! with learned per-dimension rates), the outer loop differentiates through
//! the unrolled inner loop and updates base weights, latent map and inner
//! rates with Adam.

use ndarray::Array2;

use crate::error::{FunctaError, Result};
use crate::inr::{recon_loss_graph, LatentModulatedSiren};
use crate::opt::{AdamState, ParamSet};
use crate::render::{scene_recon_loss_graph, RenderConfig, Subsample, View};
use crate::rng;
use crate::tape::{grad, Tape, Var};

/// One datapoint to fit: a coordinate grid with targets, or a posed scene
/// whose loss subsamples views and pixels.
pub enum FitTask<'a> {
    Grid {
        coords: &'a Array2<f64>,
        targets: &'a Array2<f64>,
    },
    Scene {
        views: &'a [View],
        subsample: Subsample,
        config: RenderConfig,
    },
}

impl FitTask<'_> {
    pub(crate) fn loss_graph(
        &self,
        model: &LatentModulatedSiren,
        leaves: &[Var],
        phi: &Var,
        tape: &Tape,
    ) -> Result<Var> {
        match self {
            FitTask::Grid { coords, targets } => {
                let c = tape.constant((*coords).clone());
                let t = tape.constant((*targets).clone());
                let pred = model.forward_graph(leaves, phi, &c);
                Ok(recon_loss_graph(&pred, &t))
            }
            FitTask::Scene {
                views,
                subsample,
                config,
            } => scene_recon_loss_graph(model, leaves, phi, views, subsample, config, tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InnerLoopConfig {
    pub n_inner: usize,
    /// SGD rate used when meta-SGD is disabled.
    pub fixed_lr: f64,
    pub use_meta_sgd: bool,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        InnerLoopConfig {
            n_inner: 3,
            fixed_lr: 1e-2,
            use_meta_sgd: true,
        }
    }
}

/// Per-latent-dimension inner learning rates, initialized U[0.005, 0.1].
pub fn init_meta_sgd(latent_dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::seeded(seed);
    rng::uniform(&mut rng, (1, latent_dim), 0.005, 0.1)
}

/// Projection applied after every outer update: rates stay in (0, 1).
pub fn clip_inner_lrs(lrs: &mut Array2<f64>) {
    lrs.mapv_inplace(|v| v.clamp(1e-6, 1.0 - 1e-6));
}

/// Unrolls the inner loop on a fresh tape. Returns the final modulation node,
/// the per-step losses (evaluated before each step, plus the final loss) and
/// the leaves used, so callers can take outer gradients through the graph.
fn unroll_inner_loop(
    model: &LatentModulatedSiren,
    inner_lrs: Option<&Array2<f64>>,
    cfg: &InnerLoopConfig,
    task: &FitTask,
    tape: &Tape,
) -> Result<(Vec<Var>, Option<Var>, Var, Vec<f64>, Var)> {
    let leaves = model.leaves(tape);
    let lr_leaf = match (cfg.use_meta_sgd, inner_lrs) {
        (true, Some(lrs)) => Some(tape.leaf(lrs.clone())),
        (true, None) => {
            return Err(FunctaError::Config(
                "meta-SGD enabled but no inner rates given".into(),
            ))
        }
        (false, _) => None,
    };
    let mut phi = tape.constant(Array2::zeros((1, model.latent_dim)));
    let mut losses = Vec::with_capacity(cfg.n_inner + 1);
    for step in 0..cfg.n_inner {
        let loss = task.loss_graph(model, &leaves, &phi, tape)?;
        let lv = loss.value();
        if !lv.is_finite() {
            return Err(FunctaError::Numerical(format!(
                "non-finite inner loss at step {step}"
            )));
        }
        losses.push(lv);
        let g = grad(&loss, std::slice::from_ref(&phi))?.remove(0);
        phi = match &lr_leaf {
            Some(lr) => phi.sub(&lr.mul(&g)),
            None => phi.sub(&g.scale(cfg.fixed_lr)),
        };
    }
    let final_loss = task.loss_graph(model, &leaves, &phi, tape)?;
    let flv = final_loss.value();
    if !flv.is_finite() {
        return Err(FunctaError::Numerical("non-finite post-inner-loop loss".into()));
    }
    losses.push(flv);
    Ok((leaves, lr_leaf, phi, losses, final_loss))
}

/// Fits a modulation to one datapoint with the base network frozen.
/// phi starts at zero; returns (phi, per-step losses).
pub fn inner_loop_fit(
    model: &LatentModulatedSiren,
    inner_lrs: Option<&Array2<f64>>,
    cfg: &InnerLoopConfig,
    task: &FitTask,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let (_, _, phi, losses, _) = unroll_inner_loop(model, inner_lrs, cfg, task, &tape)?;
    Ok((phi.data(), losses))
}

/// Meta-learning state: model, learned inner rates, Adam over everything.
pub struct MetaState {
    pub model: LatentModulatedSiren,
    pub inner_lrs: Array2<f64>,
    pub inner_cfg: InnerLoopConfig,
    pub outer_lr: f64,
    pub adam: AdamState,
    pub iter: u64,
}

impl MetaState {
    pub fn new(model: LatentModulatedSiren, inner_cfg: InnerLoopConfig, outer_lr: f64, seed: u64) -> Self {
        let inner_lrs = init_meta_sgd(model.latent_dim, seed);
        let adam = AdamState::new(&Self::combined(&model, &inner_lrs));
        MetaState {
            model,
            inner_lrs,
            inner_cfg,
            outer_lr,
            adam,
            iter: 0,
        }
    }

    fn combined(model: &LatentModulatedSiren, inner_lrs: &Array2<f64>) -> ParamSet {
        let mut set = model.params.clone();
        set.push("inner_lrs", inner_lrs.clone());
        set
    }

    /// One outer step over a batch of datapoints: second-order gradients of
    /// the post-inner-loop loss w.r.t. base params, latent map and inner
    /// rates, averaged over the batch, then one Adam update.
    /// Returns the mean post-inner-loop loss.
    pub fn meta_step(&mut self, batch: &[FitTask]) -> Result<f64> {
        if batch.is_empty() {
            return Err(FunctaError::Contract("meta_step on empty batch".into()));
        }
        let n_params = self.model.params.len();
        let mut grad_acc: Vec<Array2<f64>> = self
            .model
            .params
            .values()
            .map(|p| Array2::zeros(p.dim()))
            .chain(std::iter::once(Array2::zeros(self.inner_lrs.dim())))
            .collect();
        let mut mean_loss = 0.0;
        for task in batch {
            let tape = Tape::new();
            let (leaves, lr_leaf, _, _, final_loss) = unroll_inner_loop(
                &self.model,
                Some(&self.inner_lrs),
                &self.inner_cfg,
                task,
                &tape,
            )?;
            let lv = final_loss.value();
            if lv > 1e6 {
                return Err(FunctaError::Numerical(format!(
                    "meta-training diverged: loss {lv}"
                )));
            }
            mean_loss += lv;
            let mut wrt = leaves;
            if let Some(lr) = lr_leaf {
                wrt.push(lr);
            }
            let grads = grad(&final_loss, &wrt)?;
            for (i, g) in grads.iter().enumerate() {
                // base params first; rate grads (if any) go in the last slot
                let slot = if i < n_params { i } else { n_params };
                grad_acc[slot] += &g.data();
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in &mut grad_acc {
            *g *= scale;
        }
        mean_loss *= scale;

        let mut combined = Self::combined(&self.model, &self.inner_lrs);
        self.adam.step(&mut combined, &grad_acc, self.outer_lr)?;
        for (name, v) in self.model.params.iter_mut() {
            v.assign(combined.get(name).unwrap());
        }
        self.inner_lrs.assign(combined.get("inner_lrs").unwrap());
        if self.inner_cfg.use_meta_sgd {
            clip_inner_lrs(&mut self.inner_lrs);
        }
        self.iter += 1;
        Ok(mean_loss)
    }
}

/// Per-datapoint modulations for a dataset, fitted with the base frozen.
pub struct FittedModulations {
    /// (N, latent_dim); excluded rows are zero.
    pub phis: Array2<f64>,
    /// Mean-per-element reconstruction MSE per datapoint (grid tasks).
    pub mses: Vec<f64>,
    /// Indices whose fit produced non-finite values, excluded from `phis`.
    pub excluded: Vec<usize>,
}

/// Runs the frozen-base inner loop on each datapoint.
pub fn fit_modulations(
    model: &LatentModulatedSiren,
    inner_lrs: Option<&Array2<f64>>,
    cfg: &InnerLoopConfig,
    tasks: &[FitTask],
) -> Result<FittedModulations> {
    let mut phis = Array2::zeros((tasks.len(), model.latent_dim));
    let mut mses = Vec::with_capacity(tasks.len());
    let mut excluded = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        match inner_loop_fit(model, inner_lrs, cfg, task) {
            Ok((phi, losses)) => {
                if phi.iter().any(|v| !v.is_finite()) {
                    excluded.push(i);
                    mses.push(f64::NAN);
                } else {
                    phis.row_mut(i).assign(&phi.row(0));
                    mses.push(*losses.last().unwrap());
                }
            }
            Err(FunctaError::Numerical(_)) => {
                excluded.push(i);
                mses.push(f64::NAN);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(FittedModulations {
        phis,
        mses,
        excluded,
    })
}
