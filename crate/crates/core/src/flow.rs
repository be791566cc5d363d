//! Neural spline flow over modulation vectors: blocks of a rational-quadratic
//! spline coupling layer followed by an invertible PLU-factored linear map,
//! over an isotropic Gaussian base. The normalizing direction (data to base)
//! is built on the tape so training can differentiate exact log-densities;
//! sampling inverts each block numerically.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{FunctaError, Result};
use crate::opt::{AdamState, LrSchedule, ParamSet};
use crate::rng;
use crate::tape::{grad, Tape, Var};

const MIN_BIN: f64 = 1e-3;
const MIN_DERIV: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct FlowConfig {
    /// Dimensionality of the modeled vectors (>= 2).
    pub dim: usize,
    /// Number of (coupling, linear) blocks. Zero means the base alone.
    pub n_layers: usize,
    pub n_bins: usize,
    /// Splines act on [-B, B]; identity tails outside.
    pub tail_bound: f64,
    /// Conditioner hidden width (two hidden layers).
    pub hidden: usize,
    /// Number of label classes; 0 disables conditioning.
    pub n_classes: usize,
    pub embed_dim: usize,
    pub base_std: f64,
    /// Conditioner dropout rate at train time.
    pub dropout: f64,
}

impl FlowConfig {
    pub fn new(dim: usize, n_layers: usize) -> Self {
        FlowConfig {
            dim,
            n_layers,
            n_bins: 8,
            tail_bound: 3.0,
            hidden: 128,
            n_classes: 0,
            embed_dim: 32,
            base_std: 0.25,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(FunctaError::Config("flow dim must be >= 2".into()));
        }
        if self.n_bins == 0 || self.hidden == 0 || self.base_std <= 0.0 {
            return Err(FunctaError::Config("invalid flow configuration".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FunctaError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Raw spline parameters per transformed dimension.
    pub fn spline_params_per_dim(&self) -> usize {
        3 * self.n_bins + 1
    }
}

/// Offset making a zero raw derivative parameter decode to exactly 1,
/// so a zero-initialized conditioner yields the identity spline.
fn deriv_offset() -> f64 {
    ((1.0 - MIN_DERIV).exp() - 1.0).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Decoded spline for one element: knot positions and knot derivatives.
struct SplineBins {
    xk: Vec<f64>,
    yk: Vec<f64>,
    d: Vec<f64>,
}

/// Numeric decoding of one raw parameter row (3K+1 values), matching the
/// graph-side arithmetic.
fn decode_bins(raw: &[f64], n_bins: usize, tail_bound: f64) -> SplineBins {
    let k = n_bins;
    let two_b = 2.0 * tail_bound;
    let decode_axis = |vals: &[f64]| -> Vec<f64> {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut knots = Vec::with_capacity(k + 1);
        let mut cum = 0.0;
        knots.push(-tail_bound);
        for v in &e {
            cum += (MIN_BIN + (1.0 - k as f64 * MIN_BIN) * (v / s)) * two_b;
            knots.push(-tail_bound + cum);
        }
        knots
    };
    let xk = decode_axis(&raw[..k]);
    let yk = decode_axis(&raw[k..2 * k]);
    let off = deriv_offset();
    let d: Vec<f64> = raw[2 * k..3 * k + 1]
        .iter()
        .map(|v| MIN_DERIV + softplus(v + off))
        .collect();
    SplineBins { xk, yk, d }
}

fn find_bin(knots: &[f64], v: f64) -> usize {
    let k = knots.len() - 1;
    let mut idx = 0;
    for i in 0..k {
        if v >= knots[i] {
            idx = i;
        }
    }
    idx.min(k - 1)
}

/// Numeric inverse of the spline for one element.
fn spline_inverse_scalar(y: f64, bins: &SplineBins, tail_bound: f64) -> f64 {
    if y.abs() > tail_bound {
        return y;
    }
    let k = find_bin(&bins.yk, y);
    let (x0, x1) = (bins.xk[k], bins.xk[k + 1]);
    let (y0, y1) = (bins.yk[k], bins.yk[k + 1]);
    let (d0, d1) = (bins.d[k], bins.d[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let dy = y - y0;
    let a = h * (s - d0) + dy * (d1 + d0 - 2.0 * s);
    let b = h * d0 - dy * (d1 + d0 - 2.0 * s);
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = 2.0 * c / (-b - disc.sqrt());
    x0 + xi.clamp(0.0, 1.0) * w
}

/// Constant (k, k) upper-triangular ones matrix: right-multiplying computes
/// a row-wise cumulative sum.
fn cumsum_matrix(tape: &Tape, k: usize) -> Var {
    let mut m = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            m[(i, j)] = 1.0;
        }
    }
    tape.constant(m)
}

/// Row-wise softmax with a detached shift for stability.
fn softmax_rows(x: &Var) -> Var {
    let data = x.data();
    let n = data.nrows();
    let mut mx = Array2::zeros((n, 1));
    for (i, row) in data.rows().into_iter().enumerate() {
        mx[(i, 0)] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let shifted = x.sub(&x.tape().constant(mx));
    let e = shifted.exp();
    let s = e.sum_axis1();
    e.div(&s)
}

/// One-hot row selector (n, k) for numeric indices.
fn one_hot(tape: &Tape, idx: &[usize], k: usize) -> Var {
    let mut m = Array2::zeros((idx.len(), k));
    for (i, &j) in idx.iter().enumerate() {
        m[(i, j)] = 1.0;
    }
    tape.constant(m)
}

/// Graph-side spline of one column. `x` is (n, 1), `raw` is (n, 3K+1).
/// Returns (y, per-row log |dy/dx|); identity with zero log-derivative
/// outside [-B, B].
fn spline_forward_graph(x: &Var, raw: &Var, n_bins: usize, tail_bound: f64) -> (Var, Var) {
    let tape = x.tape().clone();
    let k = n_bins;
    let n = x.shape().0;
    let two_b = 2.0 * tail_bound;

    let decode_axis = |r: &Var| -> (Var, Var) {
        // (widths scaled to 2B, right-knot positions) as (n, k) each
        let w = softmax_rows(r)
            .scale(1.0 - k as f64 * MIN_BIN)
            .add_scalar(MIN_BIN)
            .scale(two_b);
        let right = w.matmul(&cumsum_matrix(&tape, k)).add_scalar(-tail_bound);
        (w, right)
    };
    let (wx, x_right) = decode_axis(&raw.slice_cols(0, k));
    let (wy, y_right) = decode_axis(&raw.slice_cols(k, k));
    let derivs = raw
        .slice_cols(2 * k, k + 1)
        .add_scalar(deriv_offset())
        .softplus()
        .add_scalar(MIN_DERIV);

    // bin index per row, from numeric knot positions
    let xd = x.data();
    let xr = x_right.data();
    let mut idx = Vec::with_capacity(n);
    for i in 0..n {
        let mut knots = Vec::with_capacity(k + 1);
        knots.push(-tail_bound);
        knots.extend(xr.row(i).iter().cloned());
        idx.push(find_bin(&knots, xd[(i, 0)]));
    }
    let sel = one_hot(&tape, &idx, k);
    let sel_d0 = one_hot(&tape, &idx, k + 1);
    let idx1: Vec<usize> = idx.iter().map(|j| j + 1).collect();
    let sel_d1 = one_hot(&tape, &idx1, k + 1);

    let pick = |a: &Var, s: &Var| a.mul(s).sum_axis1();
    let xr_sel = pick(&x_right, &sel);
    let w_sel = pick(&wx, &sel);
    let x_left = xr_sel.sub(&w_sel);
    let yr_sel = pick(&y_right, &sel);
    let h_sel = pick(&wy, &sel);
    let y_left = yr_sel.sub(&h_sel);
    let d0 = pick(&derivs, &sel_d0);
    let d1 = pick(&derivs, &sel_d1);

    let s = h_sel.div(&w_sel);
    let xi = x.sub(&x_left).div(&w_sel).clamp(0.0, 1.0);
    let omxi = xi.neg().add_scalar(1.0);
    let xi2 = xi.square();
    let t = xi.mul(&omxi);
    let curv = d1.add(&d0).sub(&s.scale(2.0));
    let den = s.add(&curv.mul(&t));
    let y_in = y_left.add(&h_sel.mul(&s.mul(&xi2).add(&d0.mul(&t))).div(&den));
    let num_ld = d1
        .mul(&xi2)
        .add(&s.scale(2.0).mul(&t))
        .add(&d0.mul(&omxi.square()));
    let ld_in = s.square().mul(&num_ld).ln().sub(&den.ln().scale(2.0));

    // inside-interval mask as a constant: outside is the identity
    let mask = tape.constant(xd.mapv(|v| if v.abs() <= tail_bound { 1.0 } else { 0.0 }));
    let inv_mask = mask.neg().add_scalar(1.0);
    let y = mask.mul(&y_in).add(&inv_mask.mul(x));
    let ld = mask.mul(&ld_in);
    (y, ld)
}

/// Named leaves created on one tape in parameter order.
pub struct LeafBank {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl LeafBank {
    pub fn from_params(tape: &Tape, params: &ParamSet) -> Self {
        let mut names = Vec::new();
        let mut vars = Vec::new();
        for (name, value) in params.iter() {
            names.push(name.to_string());
            vars.push(tape.leaf(value.clone()));
        }
        LeafBank { names, vars }
    }

    pub fn get(&self, name: &str) -> &Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"));
        &self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn dropout_graph(x: &Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => {
            let (n, c) = x.shape();
            let mask = rng::uniform(r, (n, c), 0.0, 1.0)
                .mapv(|u| if u < rate { 0.0 } else { 1.0 / (1.0 - rate) });
            x.mul(&x.tape().constant(mask))
        }
        _ => x.clone(),
    }
}

pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamSet,
    /// Fixed permutation of each linear block.
    pub perms: Vec<Vec<usize>>,
}

impl FlowModel {
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamSet::new();
        let mut perms = Vec::new();
        for layer in 0..config.n_layers {
            let swap = layer % 2 == 1;
            let (id_dim, tr_dim) = split_dims(config.dim, swap);
            let cond_in = id_dim + if config.n_classes > 0 { config.embed_dim } else { 0 };
            let out_dim = tr_dim * config.spline_params_per_dim();
            let p = format!("l{layer}.cond");
            let lim0 = (6.0 / cond_in as f64).sqrt();
            params.push(format!("{p}.w0"), rng::uniform(&mut r, (cond_in, config.hidden), -lim0, lim0));
            params.push(format!("{p}.b0"), Array2::zeros((1, config.hidden)));
            let lim1 = (6.0 / config.hidden as f64).sqrt();
            params.push(format!("{p}.w1"), rng::uniform(&mut r, (config.hidden, config.hidden), -lim1, lim1));
            params.push(format!("{p}.b1"), Array2::zeros((1, config.hidden)));
            // zero-initialized head: every spline starts as the identity
            params.push(format!("{p}.w2"), Array2::zeros((config.hidden, out_dim)));
            params.push(format!("{p}.b2"), Array2::zeros((1, out_dim)));
            params.push(format!("l{layer}.plu.l"), Array2::zeros((config.dim, config.dim)));
            params.push(format!("l{layer}.plu.u"), Array2::eye(config.dim));
            perms.push(rng::permutation(&mut r, config.dim));
        }
        if config.n_classes > 0 {
            let e = rng::truncated_normal(&mut r, (config.n_classes, config.embed_dim), 0.05);
            params.push("embed", e);
        }
        Ok(FlowModel {
            config,
            params,
            perms,
        })
    }

    /// Re-applies the diagonal constraint after an optimizer step:
    /// |u_jj| >= 1e-6, preserving sign.
    pub fn project(&mut self) {
        for layer in 0..self.config.n_layers {
            let u = self.params.get_mut(&format!("l{layer}.plu.u")).unwrap();
            for j in 0..u.nrows() {
                let v = u[(j, j)];
                if v.abs() < 1e-6 {
                    u[(j, j)] = if v < 0.0 { -1e-6 } else { 1e-6 };
                }
            }
        }
    }

    fn embed_graph(&self, leaves: &LeafBank, labels: &[u32], tape: &Tape) -> Result<Var> {
        if self.config.n_classes == 0 {
            return Err(FunctaError::Config("flow is unconditional".into()));
        }
        for &l in labels {
            if l as usize >= self.config.n_classes {
                return Err(FunctaError::Contract(format!(
                    "label {l} out of range ({} classes)",
                    self.config.n_classes
                )));
            }
        }
        let sel = one_hot(tape, &labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), self.config.n_classes);
        Ok(sel.matmul(leaves.get("embed")))
    }

    fn conditioner_graph(
        &self,
        leaves: &LeafBank,
        layer: usize,
        input: &Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let p = format!("l{layer}.cond");
        let h0 = input.matmul(leaves.get(&format!("{p}.w0"))).add(leaves.get(&format!("{p}.b0"))).relu();
        let h0 = dropout_graph(&h0, self.config.dropout, rng.as_deref_mut());
        let h1 = h0.matmul(leaves.get(&format!("{p}.w1"))).add(leaves.get(&format!("{p}.b1"))).relu();
        let h1 = dropout_graph(&h1, self.config.dropout, rng.as_deref_mut());
        h1.matmul(leaves.get(&format!("{p}.w2"))).add(leaves.get(&format!("{p}.b2")))
    }

    fn coupling_forward_graph(
        &self,
        leaves: &LeafBank,
        layer: usize,
        x: &Var,
        embed: Option<&Var>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        let swap = layer % 2 == 1;
        let dim = self.config.dim;
        let m = dim / 2;
        let (id_part, tr_part) = if swap {
            (x.slice_cols(m, dim - m), x.slice_cols(0, m))
        } else {
            (x.slice_cols(0, m), x.slice_cols(m, dim - m))
        };
        let cond_in = match embed {
            Some(e) => id_part.concat_cols(e),
            None => id_part.clone(),
        };
        let raw = self.conditioner_graph(leaves, layer, &cond_in, rng);
        let ppd = self.config.spline_params_per_dim();
        let tr_dim = tr_part.shape().1;
        let mut out: Option<Var> = None;
        let mut ld: Option<Var> = None;
        for j in 0..tr_dim {
            let (yj, ldj) = spline_forward_graph(
                &tr_part.slice_cols(j, 1),
                &raw.slice_cols(j * ppd, ppd),
                self.config.n_bins,
                self.config.tail_bound,
            );
            out = Some(match out {
                Some(o) => o.concat_cols(&yj),
                None => yj,
            });
            ld = Some(match ld {
                Some(a) => a.add(&ldj),
                None => ldj,
            });
        }
        let tr_out = out.unwrap();
        let y = if swap {
            tr_out.concat_cols(&id_part)
        } else {
            id_part.concat_cols(&tr_out)
        };
        (y, ld.unwrap())
    }

    fn plu_forward_graph(&self, leaves: &LeafBank, layer: usize, x: &Var) -> (Var, Var) {
        let tape = x.tape().clone();
        let dim = self.config.dim;
        let n = x.shape().0;
        let mut lower_mask = Array2::zeros((dim, dim));
        let mut upper_mask = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                if i > j {
                    lower_mask[(i, j)] = 1.0;
                } else {
                    upper_mask[(i, j)] = 1.0;
                }
            }
        }
        let eye = tape.constant(Array2::eye(dim));
        let l = leaves
            .get(&format!("l{layer}.plu.l"))
            .mul(&tape.constant(lower_mask))
            .add(&eye);
        let u = leaves
            .get(&format!("l{layer}.plu.u"))
            .mul(&tape.constant(upper_mask));
        let mut pm = Array2::zeros((dim, dim));
        for (i, &j) in self.perms[layer].iter().enumerate() {
            pm[(i, j)] = 1.0;
        }
        let w = tape.constant(pm).matmul(&l).matmul(&u);
        let y = x.matmul(&w);
        // log |det W| = sum of log |u_jj|; the masked product with the
        // identity isolates the diagonal
        let diag = u.mul(&tape.constant(Array2::eye(dim))).sum_axis0();
        let ld_scalar = diag.square().ln().scale(0.5).sum_all();
        let ld = tape.constant(Array2::ones((n, 1))).mul(&ld_scalar);
        (y, ld)
    }

    /// Maps data to the base distribution on the tape. Returns
    /// (z, per-row log |det dz/dx|).
    pub fn forward_graph(
        &self,
        leaves: &LeafBank,
        x: &Var,
        labels: Option<&[u32]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        if x.shape().1 != self.config.dim {
            return Err(FunctaError::Shape(format!(
                "expected {} columns, got {}",
                self.config.dim,
                x.shape().1
            )));
        }
        let tape = x.tape().clone();
        let embed = match labels {
            Some(l) => {
                if l.len() != x.shape().0 {
                    return Err(FunctaError::Contract("one label per row required".into()));
                }
                Some(self.embed_graph(leaves, l, &tape)?)
            }
            None => None,
        };
        let mut z = x.clone();
        let mut ld = tape.constant(Array2::zeros((x.shape().0, 1)));
        for layer in 0..self.config.n_layers {
            let (y, ld1) = self.coupling_forward_graph(leaves, layer, &z, embed.as_ref(), &mut dropout_rng);
            let (y2, ld2) = self.plu_forward_graph(leaves, layer, &y);
            z = y2;
            ld = ld.add(&ld1).add(&ld2);
        }
        Ok((z, ld))
    }

    /// Per-row exact log-density as a graph node (n, 1).
    pub fn log_prob_graph(
        &self,
        leaves: &LeafBank,
        x: &Var,
        labels: Option<&[u32]>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (z, ld) = self.forward_graph(leaves, x, labels, dropout_rng)?;
        let s2 = self.config.base_std * self.config.base_std;
        let log_norm =
            -(self.config.dim as f64) * 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let base = z
            .square()
            .sum_axis1()
            .scale(-1.0 / (2.0 * s2))
            .add_scalar(log_norm);
        Ok(base.add(&ld))
    }

    /// Numeric per-row log-density (dropout disabled).
    pub fn log_prob(&self, x: &Array2<f64>, labels: Option<&[u32]>) -> Result<Array1<f64>> {
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &self.params);
        let xv = tape.constant(x.clone());
        let lp = self.log_prob_graph(&leaves, &xv, labels, None)?;
        Ok(lp.data().column(0).to_owned())
    }

    /// Numeric data-to-base map (dropout disabled).
    pub fn forward(&self, x: &Array2<f64>, labels: Option<&[u32]>) -> Result<(Array2<f64>, Array1<f64>)> {
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &self.params);
        let xv = tape.constant(x.clone());
        let (z, ld) = self.forward_graph(&leaves, &xv, labels, None)?;
        Ok((z.data(), ld.data().column(0).to_owned()))
    }

    fn plu_inverse(&self, layer: usize, y: &Array2<f64>) -> Array2<f64> {
        let dim = self.config.dim;
        let lname = format!("l{layer}.plu.l");
        let uname = format!("l{layer}.plu.u");
        let lraw = self.params.get(&lname).unwrap();
        let uraw = self.params.get(&uname).unwrap();
        let mut out = Array2::zeros(y.dim());
        for (ri, row) in y.rows().into_iter().enumerate() {
            // solve x (P L U) = y: first z U = y, then w L = z, then x = w P^T
            let mut z = vec![0.0; dim];
            for j in 0..dim {
                let mut acc = row[j];
                for i in 0..j {
                    acc -= z[i] * uraw[(i, j)];
                }
                z[j] = acc / uraw[(j, j)];
            }
            let mut w = vec![0.0; dim];
            for j in (0..dim).rev() {
                let mut acc = z[j];
                for i in (j + 1)..dim {
                    acc -= w[i] * lraw[(i, j)];
                }
                w[j] = acc; // unit diagonal
            }
            // w = x P with P[i][perm[i]] = 1 puts x_i into w[perm[i]]
            for (i, &pj) in self.perms[layer].iter().enumerate() {
                out[(ri, i)] = w[pj];
            }
        }
        out
    }

    fn coupling_inverse(&self, layer: usize, y: &Array2<f64>, labels: Option<&[u32]>) -> Result<Array2<f64>> {
        let swap = layer % 2 == 1;
        let dim = self.config.dim;
        let m = dim / 2;
        let n = y.nrows();
        let (id_cols, tr_cols): (Vec<usize>, Vec<usize>) = if swap {
            ((m..dim).collect(), (0..m).collect())
        } else {
            ((0..m).collect(), (m..dim).collect())
        };
        let id_part = y.select(ndarray::Axis(1), &id_cols);
        let tr_part = y.select(ndarray::Axis(1), &tr_cols);
        // conditioner depends only on the identity half, which the forward
        // pass left unchanged
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &self.params);
        let mut cond_in = tape.constant(id_part.clone());
        if let Some(l) = labels {
            let e = self.embed_graph(&leaves, l, &tape)?;
            cond_in = cond_in.concat_cols(&e);
        }
        let raw = self
            .conditioner_graph(&leaves, layer, &cond_in, &mut None)
            .data();
        let ppd = self.config.spline_params_per_dim();
        let mut x = y.clone();
        for (j, &col) in tr_cols.iter().enumerate() {
            for i in 0..n {
                let row: Vec<f64> = raw.row(i).iter().skip(j * ppd).take(ppd).cloned().collect();
                let bins = decode_bins(&row, self.config.n_bins, self.config.tail_bound);
                x[(i, col)] = spline_inverse_scalar(tr_part[(i, j)], &bins, self.config.tail_bound);
            }
        }
        let _ = id_part;
        Ok(x)
    }

    /// Draws samples by inverting the flow on base noise scaled by
    /// `temperature`.
    pub fn sample(
        &self,
        n: usize,
        labels: Option<&[u32]>,
        temperature: f64,
        seed: u64,
    ) -> Result<Array2<f64>> {
        if temperature < 0.0 {
            return Err(FunctaError::Config("temperature must be >= 0".into()));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(FunctaError::Contract("one label per sample required".into()));
            }
        }
        let mut r = rng::seeded(seed);
        let z = rng::normal(
            &mut r,
            (n, self.config.dim),
            0.0,
            self.config.base_std * temperature,
        );
        let mut x = z;
        for layer in (0..self.config.n_layers).rev() {
            x = self.plu_inverse(layer, &x);
            x = self.coupling_inverse(layer, &x, labels)?;
        }
        Ok(x)
    }

    /// Maps base-space points back through the flow (exact inverse of
    /// `forward`).
    pub fn inverse(&self, z: &Array2<f64>, labels: Option<&[u32]>) -> Result<Array2<f64>> {
        if let Some(l) = labels {
            if l.len() != z.nrows() {
                return Err(FunctaError::Contract("one label per row required".into()));
            }
        }
        let mut x = z.clone();
        for layer in (0..self.config.n_layers).rev() {
            x = self.plu_inverse(layer, &x);
            x = self.coupling_inverse(layer, &x, labels)?;
        }
        Ok(x)
    }
}

fn split_dims(dim: usize, swap: bool) -> (usize, usize) {
    let m = dim / 2;
    if swap {
        (dim - m, m)
    } else {
        (m, dim - m)
    }
}

/// Negative-log-likelihood training with Adam under the warmup/decay
/// schedule. Returns the per-iteration mean NLL.
pub fn train_flow(
    model: &mut FlowModel,
    data: &Array2<f64>,
    labels: Option<&[u32]>,
    iters: usize,
    batch_size: usize,
    seed: u64,
    schedule: &LrSchedule,
) -> Result<Vec<f64>> {
    if data.nrows() == 0 || batch_size == 0 {
        return Err(FunctaError::Contract("empty data or batch".into()));
    }
    if let Some(l) = labels {
        if l.len() != data.nrows() {
            return Err(FunctaError::Contract("one label per row required".into()));
        }
    }
    let mut adam = AdamState::new(&model.params);
    let mut r = rng::seeded(seed);
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let idx = rng::choose(&mut r, data.nrows(), batch_size.min(data.nrows()));
        let batch = data.select(ndarray::Axis(0), &idx);
        let batch_labels: Option<Vec<u32>> =
            labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &model.params);
        let x = tape.constant(batch);
        let lp = model.log_prob_graph(&leaves, &x, batch_labels.as_deref(), Some(&mut r))?;
        let loss = lp.mean_all().neg();
        let lv = loss.value();
        if !lv.is_finite() {
            return Err(FunctaError::Numerical(format!(
                "non-finite flow loss at iteration {it}"
            )));
        }
        losses.push(lv);
        let grads = grad(&loss, leaves.vars())?;
        let gvals: Vec<Array2<f64>> = grads.iter().map(|g| g.data()).collect();
        adam.step(&mut model.params, &gvals, schedule.lr((it + 1) as u64))?;
        model.project();
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn randomized_model(dim: usize, layers: usize, seed: u64) -> FlowModel {
        // perturb all parameters so the flow is far from the identity
        let mut m = FlowModel::init(FlowConfig::new(dim, layers), seed).unwrap();
        let mut r = rng::seeded(seed ^ 0x9e37);
        for (_, v) in m.params.iter_mut() {
            *v += &rng::normal(&mut r, v.dim(), 0.0, 0.1);
        }
        m.project();
        m
    }

    #[test]
    fn identity_init_log_prob_is_exactly_gaussian() {
        let cfg = FlowConfig::new(4, 2);
        let model = FlowModel::init(cfg, 11).unwrap();
        let mut r = rng::seeded(3);
        let x = rng::normal(&mut r, (6, 4), 0.0, 0.3);
        let lp = model.log_prob(&x, None).unwrap();
        let s2 = 0.25f64 * 0.25;
        for (i, row) in x.rows().into_iter().enumerate() {
            let expect: f64 = row
                .iter()
                .map(|v| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - v * v / (2.0 * s2))
                .sum();
            assert!((lp[i] - expect).abs() < 1e-12, "{} vs {expect}", lp[i]);
        }
        // and at the origin the density matches the closed form
        let lp0 = model.log_prob(&Array2::zeros((1, 4)), None).unwrap()[0];
        assert!((lp0 - (-4.0 * (0.25 * (2.0 * std::f64::consts::PI).sqrt()).ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_layers_is_the_base_distribution() {
        let model = FlowModel::init(FlowConfig::new(3, 0), 0).unwrap();
        let x = array![[0.1, -0.2, 0.05]];
        let lp = model.log_prob(&x, None).unwrap();
        let s2 = 0.25f64 * 0.25;
        let expect: f64 = x
            .row(0)
            .iter()
            .map(|v| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - v * v / (2.0 * s2))
            .sum();
        assert!((lp[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sample_then_forward_roundtrips() {
        let model = randomized_model(5, 3, 21);
        let x = model.sample(40, None, 1.0, 7).unwrap();
        let (z, _) = model.forward(&x, None).unwrap();
        // recompute the base noise the sampler started from
        let mut r = rng::seeded(7);
        let z0 = rng::normal(&mut r, (40, 5), 0.0, 0.25);
        for (a, b) in z.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_then_inverse_roundtrips() {
        let model = randomized_model(4, 2, 5);
        let mut r = rng::seeded(9);
        let x = rng::normal(&mut r, (30, 4), 0.0, 1.0);
        let (z, _) = model.forward(&x, None).unwrap();
        // invert manually through the layer stack
        let mut y = z;
        for layer in (0..model.config.n_layers).rev() {
            y = model.plu_inverse(layer, &y);
            y = model.coupling_inverse(layer, &y, None).unwrap();
        }
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let model = randomized_model(3, 2, 13);
        let x0 = array![[0.3, -0.8, 1.2]];
        let (_, ld) = model.forward(&x0, None).unwrap();
        let eps = 1e-6;
        let mut jac = Array2::zeros((3, 3));
        for j in 0..3 {
            let mut xp = x0.clone();
            xp[(0, j)] += eps;
            let mut xm = x0.clone();
            xm[(0, j)] -= eps;
            let (zp, _) = model.forward(&xp, None).unwrap();
            let (zm, _) = model.forward(&xm, None).unwrap();
            for i in 0..3 {
                jac[(j, i)] = (zp[(0, i)] - zm[(0, i)]) / (2.0 * eps);
            }
        }
        // 3x3 determinant
        let det = jac[(0, 0)] * (jac[(1, 1)] * jac[(2, 2)] - jac[(1, 2)] * jac[(2, 1)])
            - jac[(0, 1)] * (jac[(1, 0)] * jac[(2, 2)] - jac[(1, 2)] * jac[(2, 0)])
            + jac[(0, 2)] * (jac[(1, 0)] * jac[(2, 1)] - jac[(1, 1)] * jac[(2, 0)]);
        assert!((ld[0] - det.abs().ln()).abs() < 1e-5, "{} vs {}", ld[0], det.abs().ln());
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        // mild perturbation: the quadrature grid must resolve the density
        let mut model = FlowModel::init(FlowConfig::new(2, 2), 31).unwrap();
        let mut r = rng::seeded(77);
        for (_, v) in model.params.iter_mut() {
            *v += &rng::normal(&mut r, v.dim(), 0.0, 0.02);
        }
        model.project();
        // trapezoid-free Riemann sum over a wide grid
        let lim = 6.0;
        let n = 220;
        let h = 2.0 * lim / n as f64;
        let mut pts = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                pts.push(-lim + (i as f64 + 0.5) * h);
                pts.push(-lim + (j as f64 + 0.5) * h);
            }
        }
        let grid = Array2::from_shape_vec((n * n, 2), pts).unwrap();
        let mut total = 0.0;
        for chunk_start in (0..n * n).step_by(4000) {
            let end = (chunk_start + 4000).min(n * n);
            let rows: Vec<usize> = (chunk_start..end).collect();
            let chunk = grid.select(ndarray::Axis(0), &rows);
            let lp = model.log_prob(&chunk, None).unwrap();
            total += lp.mapv(f64::exp).sum() * h * h;
        }
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = FlowModel::init(FlowConfig::new(2, 1), 17).unwrap();
        let mut r = rng::seeded(2);
        for (_, v) in model.params.iter_mut() {
            *v += &rng::normal(&mut r, v.dim(), 0.0, 0.3);
        }
        model.project();
        let x = array![[0.4, -0.6], [1.1, 0.2]];

        let nll = |m: &FlowModel| -> f64 {
            -m.log_prob(&x, None).unwrap().mean().unwrap()
        };
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &model.params);
        let lp = model
            .log_prob_graph(&leaves, &tape.constant(x.clone()), None, None)
            .unwrap();
        let loss = lp.mean_all().neg();
        let grads = grad(&loss, leaves.vars()).unwrap();

        let eps = 1e-6;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let base = model.params.get(name).unwrap().clone();
            let g = grads[pi].data();
            // spot-check a few entries of each tensor
            let total = base.len();
            for k in [0, total / 2, total - 1] {
                let (i, j) = (k / base.ncols(), k % base.ncols());
                let mut mp = model.params.get(name).unwrap().clone();
                mp[(i, j)] += eps;
                let saved = std::mem::replace(model.params.get_mut(name).unwrap(), mp);
                let fp = nll(&model);
                let mut mm = saved.clone();
                mm[(i, j)] -= eps;
                *model.params.get_mut(name).unwrap() = mm;
                let fm = nll(&model);
                *model.params.get_mut(name).unwrap() = saved;
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
    fn conditioning_and_temperature() {
        let mut cfg = FlowConfig::new(3, 2);
        cfg.n_classes = 4;
        let model = FlowModel::init(cfg, 23).unwrap();
        let labels = vec![0u32, 3, 1];
        let x = array![[0.1, 0.2, -0.1], [0.0, 0.5, 0.3], [-0.2, 0.1, 0.0]];
        assert!(model.log_prob(&x, Some(&labels)).is_ok());
        assert!(model.log_prob(&x, Some(&[0, 9, 1])).is_err());
        // temperature zero collapses to the deterministic mode image
        let a = model.sample(2, Some(&[1, 1]), 0.0, 4).unwrap();
        let b = model.sample(2, Some(&[1, 1]), 0.0, 99).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        // identity init keeps samples at the scaled base std
        let big = model.sample(4000, Some(&vec![2u32; 4000]), 0.5, 8).unwrap();
        let std = (big.mapv(|v| v * v).sum() / (4000.0 * 3.0)).sqrt();
        assert!((std - 0.125).abs() < 0.005, "std {std}");
    }

    #[test]
    fn training_reduces_nll_on_shifted_gaussian() {
        let mut model = FlowModel::init(FlowConfig::new(2, 2), 41).unwrap();
        let mut r = rng::seeded(6);
        let data = rng::normal(&mut r, (256, 2), 0.0, 0.1) + 0.9;
        let schedule = LrSchedule {
            base_lr: 3e-4,
            warmup_iters: 50,
        };
        let losses = train_flow(&mut model, &data, None, 120, 64, 3, &schedule).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.5, "head {head} tail {tail}");
    }
}

#[cfg(test)]
mod spline_debug {
    use super::*;

    #[test]
    fn spline_fd_and_inverse() {
        let mut r = rng::seeded(77);
        let n = 9;
        let xs: Vec<f64> = (0..n).map(|i| -4.3 + 1.07 * i as f64).collect();
        let raw = rng::normal(&mut r, (n, 25), 0.0, 0.8);
        let tape = Tape::new();
        let xv = tape.constant(Array2::from_shape_vec((n,1), xs.clone()).unwrap());
        let rv = tape.constant(raw.clone());
        let (y, ld) = spline_forward_graph(&xv, &rv, 8, 3.0);
        let yd = y.data(); let ldd = ld.data();
        // FD derivative
        let eps = 1e-6;
        for i in 0..n {
            let xp = tape.constant(Array2::from_elem((1,1), xs[i]+eps));
            let xm = tape.constant(Array2::from_elem((1,1), xs[i]-eps));
            let rrow = tape.constant(raw.row(i).to_owned().insert_axis(ndarray::Axis(0)));
            let (yp, _) = spline_forward_graph(&xp, &rrow, 8, 3.0);
            let (ym, _) = spline_forward_graph(&xm, &rrow, 8, 3.0);
            let fd = (yp.value() - ym.value())/(2.0*eps);
            let an = ldd[(i,0)].exp();
            println!("x={} y={} ld_deriv={an} fd={fd}", xs[i], yd[(i,0)]);
            assert!((fd-an).abs() < 1e-4*an.max(1.0), "x={} fd={fd} an={an}", xs[i]);
            // numeric inverse
            let row: Vec<f64> = raw.row(i).to_vec();
            let bins = decode_bins(&row, 8, 3.0);
            let back = spline_inverse_scalar(yd[(i,0)], &bins, 3.0);
            assert!((back - xs[i]).abs() < 1e-9, "x={} back={back}", xs[i]);
        }
    }
}
