//! Denoising diffusion over modulation vectors: a fixed linear noise
//! schedule, a residual MLP that predicts the added noise from the corrupted
//! vector and a sinusoidal timestep embedding, and ancestral sampling.

use ndarray::{Array1, Array2};

use crate::error::{FunctaError, Result};
use crate::flow::LeafBank;
use crate::opt::{AdamState, LrSchedule, ParamSet};
use crate::rng;
use crate::tape::{grad, Tape, Var};

/// Linear beta schedule with precomputed alpha products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Array1<f64>,
    pub alphas: Array1<f64>,
    pub alpha_bars: Array1<f64>,
}

impl NoiseSchedule {
    /// betas linearly spaced from 1e-4 to 0.02 over `steps` timesteps.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(FunctaError::Config("schedule needs >= 2 steps".into()));
        }
        let betas = Array1::from_shape_fn(steps, |i| {
            1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64
        });
        let alphas = betas.mapv(|b| 1.0 - b);
        let mut alpha_bars = alphas.clone();
        for i in 1..steps {
            alpha_bars[i] = alpha_bars[i - 1] * alphas[i];
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(FunctaError::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Forward corruption x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps,
    /// with t in 1..=steps.
    pub fn q_sample(&self, x0: &Array2<f64>, t: usize, eps: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_t(t)?;
        if x0.dim() != eps.dim() {
            return Err(FunctaError::Shape("x0 and eps shapes differ".into()));
        }
        let ab = self.alpha_bars[t - 1];
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }

    /// One reverse step from x_t to x_{t-1} given the predicted noise.
    /// `noise` is ignored at t = 1 (the final, deterministic step).
    pub fn p_sample_step(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        eps_hat: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_t(t)?;
        let b = self.betas[t - 1];
        let a = self.alphas[t - 1];
        let ab = self.alpha_bars[t - 1];
        let mean = (x_t - &(eps_hat * (b / (1.0 - ab).sqrt()))) / a.sqrt();
        if t == 1 {
            Ok(mean)
        } else {
            Ok(mean + noise * b.sqrt())
        }
    }
}

/// 128-dimensional sinusoidal embedding of an integer timestep.
pub const TIME_EMBED_DIM: usize = 128;

fn time_embedding(ts: &[usize]) -> Array2<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Array2::zeros((ts.len(), TIME_EMBED_DIM));
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / (half - 1) as f64).exp();
            out[(i, j)] = (t as f64 * freq).sin();
            out[(i, half + j)] = (t as f64 * freq).cos();
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EpsNetConfig {
    pub dim: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub dropout: f64,
}

impl EpsNetConfig {
    pub fn new(dim: usize, width: usize, n_blocks: usize) -> Self {
        EpsNetConfig {
            dim,
            width,
            n_blocks,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 || self.n_blocks == 0 {
            return Err(FunctaError::Config("invalid eps-net configuration".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FunctaError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Residual MLP noise predictor. The timestep embedding passes through a
/// two-layer SiLU MLP and is added to the hidden state before every residual
/// block; the output head is zero-initialized so the untrained model
/// predicts zero noise.
pub struct EpsNet {
    pub config: EpsNetConfig,
    pub params: ParamSet,
}

impl EpsNet {
    pub fn init(config: EpsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamSet::new();
        let w = config.width;
        let lim_in = (6.0 / config.dim as f64).sqrt();
        params.push("w_in", rng::uniform(&mut r, (config.dim, w), -lim_in, lim_in));
        params.push("b_in", Array2::zeros((1, w)));
        let lim_t = (6.0 / TIME_EMBED_DIM as f64).sqrt();
        params.push("t_w0", rng::uniform(&mut r, (TIME_EMBED_DIM, w), -lim_t, lim_t));
        params.push("t_b0", Array2::zeros((1, w)));
        let lim_w = (6.0 / w as f64).sqrt();
        params.push("t_w1", rng::uniform(&mut r, (w, w), -lim_w, lim_w));
        params.push("t_b1", Array2::zeros((1, w)));
        for k in 0..config.n_blocks {
            params.push(format!("blk{k}.w0"), rng::uniform(&mut r, (w, w), -lim_w, lim_w));
            params.push(format!("blk{k}.b0"), Array2::zeros((1, w)));
            params.push(format!("blk{k}.w1"), rng::uniform(&mut r, (w, w), -lim_w, lim_w));
            params.push(format!("blk{k}.b1"), Array2::zeros((1, w)));
        }
        params.push("w_out", Array2::zeros((w, config.dim)));
        params.push("b_out", Array2::zeros((1, config.dim)));
        Ok(EpsNet { config, params })
    }

    pub fn forward_graph(
        &self,
        leaves: &LeafBank,
        x: &Var,
        ts: &[usize],
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        if x.shape().1 != self.config.dim {
            return Err(FunctaError::Shape(format!(
                "expected {} columns, got {}",
                self.config.dim,
                x.shape().1
            )));
        }
        if ts.len() != x.shape().0 {
            return Err(FunctaError::Contract("one timestep per row required".into()));
        }
        let tape = x.tape().clone();
        let temb = tape.constant(time_embedding(ts));
        let tcond = temb
            .matmul(leaves.get("t_w0"))
            .add(leaves.get("t_b0"))
            .silu()
            .matmul(leaves.get("t_w1"))
            .add(leaves.get("t_b1"));
        let mut h = x.matmul(leaves.get("w_in")).add(leaves.get("b_in"));
        let mut drng = dropout_rng;
        for k in 0..self.config.n_blocks {
            let inp = h.add(&tcond);
            let mut u = inp
                .matmul(leaves.get(&format!("blk{k}.w0")))
                .add(leaves.get(&format!("blk{k}.b0")))
                .silu();
            if let Some(r) = drng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let (n, c) = u.shape();
                    let mask = rng::uniform(r, (n, c), 0.0, 1.0).mapv(|v| {
                        if v < self.config.dropout {
                            0.0
                        } else {
                            1.0 / (1.0 - self.config.dropout)
                        }
                    });
                    u = u.mul(&tape.constant(mask));
                }
            }
            let u = u
                .matmul(leaves.get(&format!("blk{k}.w1")))
                .add(leaves.get(&format!("blk{k}.b1")));
            h = h.add(&u);
        }
        Ok(h.matmul(leaves.get("w_out")).add(leaves.get("b_out")))
    }

    /// Numeric prediction (dropout disabled).
    pub fn forward(&self, x: &Array2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &self.params);
        Ok(self
            .forward_graph(&leaves, &tape.constant(x.clone()), ts, None)?
            .data())
    }
}

/// Mean squared noise-prediction error over a batch with uniformly drawn
/// timesteps. Returns the loss node; timesteps and noise come from `rng`.
pub fn ddpm_loss_graph(
    net: &EpsNet,
    leaves: &LeafBank,
    schedule: &NoiseSchedule,
    x0: &Array2<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
    tape: &Tape,
) -> Result<Var> {
    use rand::Rng as _;
    let n = x0.nrows();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = rng::normal(rng, x0.dim(), 0.0, 1.0);
    let mut xt = Array2::zeros(x0.dim());
    for i in 0..n {
        let row = schedule.q_sample(
            &x0.row(i).to_owned().insert_axis(ndarray::Axis(0)),
            ts[i],
            &eps.row(i).to_owned().insert_axis(ndarray::Axis(0)),
        )?;
        xt.row_mut(i).assign(&row.row(0));
    }
    let eps_hat = net.forward_graph(leaves, &tape.constant(xt), &ts, Some(rng))?;
    Ok(eps_hat.sub(&tape.constant(eps)).square().mean_all())
}

/// Ancestral sampling from pure noise down to t = 1.
pub fn sample(net: &EpsNet, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut r = rng::seeded(seed);
    let dim = net.config.dim;
    let mut x = rng::normal(&mut r, (n, dim), 0.0, 1.0);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = net.forward(&x, &vec![t; n])?;
        let noise = rng::normal(&mut r, (n, dim), 0.0, 1.0);
        x = schedule.p_sample_step(&x, t, &eps_hat, &noise)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FunctaError::Numerical(format!(
                "non-finite sample at timestep {t}"
            )));
        }
    }
    Ok(x)
}

/// Adam training of the noise predictor. Returns per-iteration losses.
pub fn train_ddpm(
    net: &mut EpsNet,
    schedule: &NoiseSchedule,
    data: &Array2<f64>,
    iters: usize,
    batch_size: usize,
    seed: u64,
    lr_schedule: &LrSchedule,
) -> Result<Vec<f64>> {
    if data.nrows() == 0 || batch_size == 0 {
        return Err(FunctaError::Contract("empty data or batch".into()));
    }
    let mut adam = AdamState::new(&net.params);
    let mut r = rng::seeded(seed);
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let idx = rng::choose(&mut r, data.nrows(), batch_size.min(data.nrows()));
        let batch = data.select(ndarray::Axis(0), &idx);
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &net.params);
        let loss = ddpm_loss_graph(net, &leaves, schedule, &batch, &mut r, &tape)?;
        let lv = loss.value();
        if !lv.is_finite() {
            return Err(FunctaError::Numerical(format!(
                "non-finite diffusion loss at iteration {it}"
            )));
        }
        losses.push(lv);
        let grads = grad(&loss, leaves.vars())?;
        let gvals: Vec<Array2<f64>> = grads.iter().map(|g| g.data()).collect();
        adam.step(&mut net.params, &gvals, lr_schedule.lr((it + 1) as u64))?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_identities() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!((s.betas[0] - 1e-4).abs() < 1e-15);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        // alpha_bars is the running product of 1 - beta
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - s.betas[i];
            assert!((s.alpha_bars[i] - prod).abs() < 1e-12);
        }
        // essentially all signal destroyed at the final step
        assert!(s.alpha_bars[999] < 5e-5, "{}", s.alpha_bars[999]);
        assert!(NoiseSchedule::linear(1).is_err());
    }

    #[test]
    fn forward_marginal_matches_monte_carlo() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut r = rng::seeded(4);
        let x0 = Array2::from_elem((1, 1), 0.8);
        for &t in &[10usize, 100, 500] {
            let n = 20000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let eps = rng::normal(&mut r, (1, 1), 0.0, 1.0);
                let xt = s.q_sample(&x0, t, &eps).unwrap()[(0, 0)];
                sum += xt;
                sumsq += xt * xt;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let ab = s.alpha_bars[t - 1];
            assert!((mean - ab.sqrt() * 0.8).abs() < 0.02, "t={t} mean {mean}");
            assert!((var - (1.0 - ab)).abs() < 0.03, "t={t} var {var}");
        }
    }

    #[test]
    fn zero_init_net_predicts_zero_and_unit_loss() {
        let net = EpsNet::init(EpsNetConfig::new(3, 32, 2), 5).unwrap();
        let mut r = rng::seeded(1);
        let x = rng::normal(&mut r, (7, 3), 0.0, 1.0);
        let out = net.forward(&x, &[1, 5, 10, 50, 100, 500, 1000]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        // expected loss E[eps^2] = 1 with a zero predictor
        let s = NoiseSchedule::linear(1000).unwrap();
        let x0 = rng::normal(&mut r, (600, 3), 0.0, 0.5);
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &net.params);
        let loss = ddpm_loss_graph(&net, &leaves, &s, &x0, &mut r, &tape).unwrap();
        assert!((loss.value() - 1.0).abs() < 0.06, "{}", loss.value());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = EpsNet::init(EpsNetConfig::new(2, 8, 2), 9).unwrap();
        // non-zero head so the loss depends on every parameter
        let mut r = rng::seeded(2);
        for (_, v) in net.params.iter_mut() {
            *v += &rng::normal(&mut r, v.dim(), 0.0, 0.1);
        }
        let x = rng::normal(&mut r, (4, 2), 0.0, 1.0);
        let ts = [3usize, 700, 42, 999];
        let target = rng::normal(&mut r, (4, 2), 0.0, 1.0);

        let objective = |n: &EpsNet| -> f64 {
            let out = n.forward(&x, &ts).unwrap();
            (&out - &target).mapv(|v| v * v).mean().unwrap()
        };
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &net.params);
        let out = net
            .forward_graph(&leaves, &tape.constant(x.clone()), &ts, None)
            .unwrap();
        let loss = out.sub(&tape.constant(target.clone())).square().mean_all();
        let grads = grad(&loss, leaves.vars()).unwrap();

        let eps = 1e-6;
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let g = grads[pi].data();
            let shape = net.params.get(name).unwrap().dim();
            let total = shape.0 * shape.1;
            for k in [0, total / 2, total - 1] {
                let (i, j) = (k / shape.1, k % shape.1);
                net.params.get_mut(name).unwrap()[(i, j)] += eps;
                let fp = objective(&net);
                net.params.get_mut(name).unwrap()[(i, j)] -= 2.0 * eps;
                let fm = objective(&net);
                net.params.get_mut(name).unwrap()[(i, j)] += eps;
                let fd = (fp - fm) / (2.0 * eps);
                let an = g[(i, j)];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(an.abs()).max(1.0),
                    "{name}[{i},{j}]: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = NoiseSchedule::linear(10).unwrap();
        let x = Array2::from_elem((2, 2), 0.5);
        let eh = Array2::from_elem((2, 2), 0.1);
        let n1 = Array2::from_elem((2, 2), 5.0);
        let n2 = Array2::from_elem((2, 2), -5.0);
        let a = s.p_sample_step(&x, 1, &eh, &n1).unwrap();
        let b = s.p_sample_step(&x, 1, &eh, &n2).unwrap();
        assert_eq!(a, b);
        // but noise matters at t > 1
        let c = s.p_sample_step(&x, 2, &eh, &n1).unwrap();
        let d = s.p_sample_step(&x, 2, &eh, &n2).unwrap();
        assert_ne!(c, d);
        assert!(s.p_sample_step(&x, 0, &eh, &n1).is_err());
        assert!(s.p_sample_step(&x, 11, &eh, &n1).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_finite() {
        let net = EpsNet::init(EpsNetConfig::new(2, 16, 2), 3).unwrap();
        let s = NoiseSchedule::linear(50).unwrap();
        let a = sample(&net, &s, 5, 11).unwrap();
        let b = sample(&net, &s, 5, 11).unwrap();
        let c = sample(&net, &s, 5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_reduces_loss_below_unit() {
        let mut net = EpsNet::init(EpsNetConfig::new(2, 32, 2), 7).unwrap();
        let s = NoiseSchedule::linear(100).unwrap();
        // concentrated data: the noise becomes predictable at high t
        let data = Array2::from_elem((128, 2), 0.0);
        let lrs = LrSchedule {
            base_lr: 1e-3,
            warmup_iters: 20,
        };
        let losses = train_ddpm(&mut net, &s, &data, 150, 64, 13, &lrs).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(head > 0.8, "untrained loss should be near 1, got {head}");
        assert!(tail < head * 0.8, "head {head} tail {tail}");
    }
}
