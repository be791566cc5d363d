//! SIREN-family coordinate networks: plain SIREN, shift-modulated SIREN and
//! latent-modulated SIREN, plus reconstruction metrics.
//!
//! Hidden layers compute sin(w0 * (W x + b + s)); the final layer is linear
//! with 0.5 added so zero parameters reproduce the midpoint of [0,1] targets.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{FunctaError, Result};
use crate::opt::ParamSet;
use crate::rng;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirenConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    /// Number of hidden (sine) layers.
    pub depth: usize,
    pub omega0: f64,
}

impl SirenConfig {
    pub fn new(in_dim: usize, out_dim: usize, width: usize, depth: usize) -> Self {
        SirenConfig {
            in_dim,
            out_dim,
            width,
            depth,
            omega0: 30.0,
        }
    }

    pub fn with_omega0(mut self, omega0: f64) -> Self {
        self.omega0 = omega0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.depth < 1 || self.omega0 <= 0.0 {
            return Err(FunctaError::Config(format!("invalid siren config {self:?}")));
        }
        Ok(())
    }

    /// Total shift-modulation dimension: one shift per hidden unit.
    pub fn shift_dim(&self) -> usize {
        self.width * self.depth
    }

    /// Trainable parameters of the base network (excludes modulations).
    pub fn param_count(&self) -> usize {
        let mut n = self.in_dim * self.width + self.width; // first layer
        n += (self.depth - 1) * (self.width * self.width + self.width);
        n += self.width * self.out_dim + self.out_dim; // final linear
        n
    }
}

/// SIREN weight initialization: first layer U[-1/n_in, 1/n_in], later layers
/// U[-(1/w0) sqrt(6/n_in), (1/w0) sqrt(6/n_in)], biases zero. Weight matrices
/// are stored (n_in, n_out) so a batch of row coordinates multiplies on the
/// left.
pub fn init_siren(config: &SirenConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let mut params = ParamSet::new();
    for layer in 0..config.depth {
        let n_in = if layer == 0 { config.in_dim } else { config.width };
        let bound = if layer == 0 {
            1.0 / n_in as f64
        } else {
            (6.0 / n_in as f64).sqrt() / config.omega0
        };
        params.push(
            format!("w{layer}"),
            rng::uniform(&mut rng, (n_in, config.width), -bound, bound),
        );
        params.push(format!("b{layer}"), Array2::zeros((1, config.width)));
    }
    let bound = (6.0 / config.width as f64).sqrt() / config.omega0;
    params.push(
        "w_out",
        rng::uniform(&mut rng, (config.width, config.out_dim), -bound, bound),
    );
    params.push("b_out", Array2::zeros((1, config.out_dim)));
    Ok(params)
}

/// Latent-to-shift map s = phi W' + b' (row convention), W' initialized from
/// a truncated normal scaled by 1/sqrt(latent_dim), b' zero.
pub fn init_latent_map(config: &SirenConfig, latent_dim: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut params = ParamSet::new();
    params.push(
        "w_lat",
        rng::truncated_normal(rng, (latent_dim, config.shift_dim()), 1.0 / (latent_dim as f64).sqrt()),
    );
    params.push("b_lat", Array2::zeros((1, config.shift_dim())));
    params
}

/// Shared base network plus latent-to-shift map.
#[derive(Clone)]
pub struct LatentModulatedSiren {
    pub config: SirenConfig,
    pub latent_dim: usize,
    /// Base-network weights/biases followed by the latent map (w_lat, b_lat).
    pub params: ParamSet,
}

impl LatentModulatedSiren {
    pub fn init(config: SirenConfig, latent_dim: usize, seed: u64) -> Result<Self> {
        let mut params = init_siren(&config, seed)?;
        let mut rng = rng::seeded(seed.wrapping_add(1));
        for (name, v) in init_latent_map(&config, latent_dim, &mut rng).iter() {
            params.push(name, v.clone());
        }
        Ok(LatentModulatedSiren {
            config,
            latent_dim,
            params,
        })
    }

    /// Leaf vars for all trainable parameters, in ParamSet order.
    pub fn leaves(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|(_, v)| tape.leaf(v.clone())).collect()
    }

    /// Graph forward pass. `leaves` must align with `self.params`; `phi` is a
    /// (1, latent_dim) node. Returns (n, out_dim) features.
    pub fn forward_graph(&self, leaves: &[Var], phi: &Var, coords: &Var) -> Var {
        let c = &self.config;
        let n_base = 2 * c.depth + 2;
        let (w_lat, b_lat) = (&leaves[n_base], &leaves[n_base + 1]);
        let shifts = phi.matmul(w_lat).add(b_lat); // (1, width*depth)
        let mut h = coords.clone();
        for layer in 0..c.depth {
            let w = &leaves[2 * layer];
            let b = &leaves[2 * layer + 1];
            let s = shifts.slice_cols(layer * c.width, c.width);
            h = h.matmul(w).add(b).add(&s).scale(c.omega0).sin();
        }
        h.matmul(&leaves[2 * c.depth]).add(&leaves[2 * c.depth + 1]).add_scalar(0.5)
    }

    /// Numeric forward pass for a latent vector (1, latent_dim).
    pub fn forward(&self, phi: &Array2<f64>, coords: &Array2<f64>) -> Result<Array2<f64>> {
        if phi.dim() != (1, self.latent_dim) {
            return Err(FunctaError::Shape(format!(
                "phi shape {:?}, expected (1, {})",
                phi.dim(),
                self.latent_dim
            )));
        }
        let shifts = phi.dot(self.params.get("w_lat").unwrap()) + self.params.get("b_lat").unwrap();
        self.forward_with_shifts(&shifts, coords)
    }

    /// Forward with an explicit shift vector (1, width*depth), bypassing the
    /// latent map. Used by shift-equivalence checks and perturbation analysis.
    pub fn forward_with_shifts(&self, shifts: &Array2<f64>, coords: &Array2<f64>) -> Result<Array2<f64>> {
        let c = &self.config;
        if coords.ncols() != c.in_dim {
            return Err(FunctaError::Shape(format!(
                "coords have {} columns, expected {}",
                coords.ncols(),
                c.in_dim
            )));
        }
        if shifts.dim() != (1, c.shift_dim()) {
            return Err(FunctaError::Shape(format!(
                "shifts shape {:?}, expected (1, {})",
                shifts.dim(),
                c.shift_dim()
            )));
        }
        let mut h = coords.clone();
        for layer in 0..c.depth {
            let w = self.params.get(&format!("w{layer}")).unwrap();
            let b = self.params.get(&format!("b{layer}")).unwrap();
            let mut z = h.dot(w);
            for mut row in z.rows_mut() {
                row += &b.row(0);
                row += &shifts.slice(ndarray::s![0, layer * c.width..(layer + 1) * c.width]);
            }
            h = z.mapv(|x| (c.omega0 * x).sin());
        }
        let mut out = h.dot(self.params.get("w_out").unwrap());
        for mut row in out.rows_mut() {
            row += &self.params.get("b_out").unwrap().row(0);
        }
        Ok(out + 0.5)
    }

    pub fn zero_latent(&self) -> Array2<f64> {
        Array2::zeros((1, self.latent_dim))
    }
}

/// Mean squared error over points and channels (graph form).
pub fn recon_loss_graph(pred: &Var, targets: &Var) -> Var {
    pred.sub(targets).square().mean_all()
}

/// Mean squared error over points and channels; also returns the sum variant.
pub fn recon_loss(pred: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != targets.dim() {
        return Err(FunctaError::Shape(format!(
            "pred {:?} vs targets {:?}",
            pred.dim(),
            targets.dim()
        )));
    }
    if pred.is_empty() {
        return Err(FunctaError::Contract("empty batch in recon_loss".into()));
    }
    let sq = (pred - targets).mapv(|x| x * x);
    let sum = sq.sum();
    Ok((sum / sq.len() as f64, sum))
}

/// PSNR in dB from a mean-per-element MSE. Non-positive MSE maps to infinity.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Dataset-level PSNR: average the MSEs first, then convert.
pub fn dataset_psnr(mses: &[f64]) -> f64 {
    psnr(mses.iter().sum::<f64>() / mses.len() as f64)
}

/// Fraction of voxels matching after rounding predictions to {0,1}.
pub fn voxel_accuracy(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(FunctaError::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut hits = 0usize;
    for (p, t) in pred.iter().zip(target.iter()) {
        let r = if *p >= 0.5 { 1.0 } else { 0.0 };
        if r == *t {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// Parameter count for a plain MLP classifier spec (all hidden layers share
/// `width`; biases included).
pub fn mlp_param_count(in_dim: usize, width: usize, hidden_layers: usize, out_dim: usize) -> usize {
    let mut n = in_dim * width + width;
    n += (hidden_layers - 1) * (width * width + width);
    n += width * out_dim + out_dim;
    n
}

/// Reconstruction change when a single shift dimension is perturbed by
/// `delta`: per-coordinate L1 error map against the unperturbed output and
/// the scalar RMSE.
pub fn perturb_modulation_rmse(
    model: &LatentModulatedSiren,
    phi: &Array2<f64>,
    dim_index: usize,
    delta: f64,
    coords: &Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let shift_dim = model.config.shift_dim();
    if dim_index >= shift_dim {
        return Err(FunctaError::Contract(format!(
            "shift index {dim_index} out of range {shift_dim}"
        )));
    }
    let mut shifts = phi.dot(model.params.get("w_lat").unwrap()) + model.params.get("b_lat").unwrap();
    let base = model.forward_with_shifts(&shifts, coords)?;
    shifts[(0, dim_index)] += delta;
    let pert = model.forward_with_shifts(&shifts, coords)?;
    let diff = &pert - &base;
    let l1 = diff.mapv(f64::abs);
    let rmse = (diff.mapv(|x| x * x).mean().unwrap()).sqrt();
    Ok((l1, rmse))
}
