//! Classification of modulation vectors with a small SiLU MLP trained by
//! cross-entropy.

use ndarray::Array2;

use crate::error::{FunctaError, Result};
use crate::flow::LeafBank;
use crate::opt::{AdamState, ParamSet};
use crate::rng;
use crate::tape::{grad, Tape, Var};

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub in_dim: usize,
    pub n_classes: usize,
    pub width: usize,
    pub depth: usize,
    pub dropout: f64,
}

impl ClassifierConfig {
    pub fn new(in_dim: usize, n_classes: usize, width: usize, depth: usize) -> Self {
        ClassifierConfig {
            in_dim,
            n_classes,
            width,
            depth,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.width == 0 || self.depth == 0 || self.n_classes < 2 {
            return Err(FunctaError::Config("invalid classifier configuration".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FunctaError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamSet,
}

impl Classifier {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamSet::new();
        let mut fan_in = config.in_dim;
        for l in 0..config.depth {
            let lim = (6.0 / fan_in as f64).sqrt();
            params.push(format!("w{l}"), rng::uniform(&mut r, (fan_in, config.width), -lim, lim));
            params.push(format!("b{l}"), Array2::zeros((1, config.width)));
            fan_in = config.width;
        }
        let lim = (6.0 / fan_in as f64).sqrt();
        params.push("w_out", rng::uniform(&mut r, (fan_in, config.n_classes), -lim, lim));
        params.push("b_out", Array2::zeros((1, config.n_classes)));
        Ok(Classifier { config, params })
    }

    pub fn logits_graph(
        &self,
        leaves: &LeafBank,
        x: &Var,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        if x.shape().1 != self.config.in_dim {
            return Err(FunctaError::Shape(format!(
                "expected {} columns, got {}",
                self.config.in_dim,
                x.shape().1
            )));
        }
        let tape = x.tape().clone();
        let mut h = x.clone();
        let mut drng = dropout_rng;
        for l in 0..self.config.depth {
            h = h
                .matmul(leaves.get(&format!("w{l}")))
                .add(leaves.get(&format!("b{l}")))
                .silu();
            if let Some(r) = drng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let (n, c) = h.shape();
                    let mask = rng::uniform(r, (n, c), 0.0, 1.0).mapv(|v| {
                        if v < self.config.dropout {
                            0.0
                        } else {
                            1.0 / (1.0 - self.config.dropout)
                        }
                    });
                    h = h.mul(&tape.constant(mask));
                }
            }
        }
        Ok(h.matmul(leaves.get("w_out")).add(leaves.get("b_out")))
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &self.params);
        Ok(self.logits_graph(&leaves, &tape.constant(x.clone()), None)?.data())
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<u32>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u32
            })
            .collect())
    }
}

/// Mean cross-entropy via a numerically stable log-softmax.
pub fn cross_entropy_graph(logits: &Var, labels: &[u32], n_classes: usize) -> Result<Var> {
    let (n, c) = logits.shape();
    if c != n_classes || labels.len() != n {
        return Err(FunctaError::Contract("labels do not match logits".into()));
    }
    for &l in labels {
        if l as usize >= n_classes {
            return Err(FunctaError::Contract(format!("label {l} out of range")));
        }
    }
    let tape = logits.tape().clone();
    let data = logits.data();
    let mut mx = Array2::zeros((n, 1));
    for (i, row) in data.rows().into_iter().enumerate() {
        mx[(i, 0)] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let shifted = logits.sub(&tape.constant(mx));
    let lse = shifted.exp().sum_axis1().ln();
    let mut onehot = Array2::zeros((n, c));
    for (i, &l) in labels.iter().enumerate() {
        onehot[(i, l as usize)] = 1.0;
    }
    let picked = shifted.mul(&tape.constant(onehot)).sum_axis1();
    Ok(lse.sub(&picked).mean_all())
}

/// Training statistics: per-iteration loss and an exponentially averaged
/// train accuracy (decay 0.99).
pub struct TrainStats {
    pub losses: Vec<f64>,
    pub ema_accuracy: f64,
}

pub fn train_classifier(
    model: &mut Classifier,
    data: &Array2<f64>,
    labels: &[u32],
    iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainStats> {
    if data.nrows() == 0 || batch_size == 0 {
        return Err(FunctaError::Contract("empty data or batch".into()));
    }
    if labels.len() != data.nrows() {
        return Err(FunctaError::Contract("one label per row required".into()));
    }
    let mut adam = AdamState::new(&model.params);
    let mut r = rng::seeded(seed);
    let mut losses = Vec::with_capacity(iters);
    let mut ema = 1.0 / model.config.n_classes as f64;
    for it in 0..iters {
        let idx = rng::choose(&mut r, data.nrows(), batch_size.min(data.nrows()));
        let batch = data.select(ndarray::Axis(0), &idx);
        let batch_labels: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &model.params);
        let logits = model.logits_graph(&leaves, &tape.constant(batch), Some(&mut r))?;
        // batch accuracy from the same logits
        let preds = logits.data();
        let correct = preds
            .rows()
            .into_iter()
            .zip(&batch_labels)
            .filter(|(row, &l)| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u32
                    == l
            })
            .count();
        ema = 0.99 * ema + 0.01 * correct as f64 / batch_labels.len() as f64;
        let loss = cross_entropy_graph(&logits, &batch_labels, model.config.n_classes)?;
        let lv = loss.value();
        if !lv.is_finite() {
            return Err(FunctaError::Numerical(format!(
                "non-finite classifier loss at iteration {it}"
            )));
        }
        losses.push(lv);
        let grads = grad(&loss, leaves.vars())?;
        let gvals: Vec<Array2<f64>> = grads.iter().map(|g| g.data()).collect();
        adam.step(&mut model.params, &gvals, lr)?;
    }
    Ok(TrainStats {
        losses,
        ema_accuracy: ema,
    })
}

/// Overall and per-class accuracy on a labeled set.
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<(u32, f64, usize)>,
}

pub fn evaluate(model: &Classifier, data: &Array2<f64>, labels: &[u32]) -> Result<Evaluation> {
    if labels.len() != data.nrows() || data.nrows() == 0 {
        return Err(FunctaError::Contract("labels must match a non-empty set".into()));
    }
    let preds = model.predict(data)?;
    let n_classes = model.config.n_classes;
    let mut correct = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l as usize >= n_classes {
            return Err(FunctaError::Contract(format!("label {l} out of range")));
        }
        count[l as usize] += 1;
        if p == l {
            correct[l as usize] += 1;
        }
    }
    let accuracy = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    let per_class = (0..n_classes)
        .filter(|&c| count[c] > 0)
        .map(|c| (c as u32, correct[c] as f64 / count[c] as f64, count[c]))
        .collect();
    Ok(Evaluation {
        accuracy,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_matches_closed_form() {
        let tape = Tape::new();
        let logits = tape.constant(ndarray::array![[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]]);
        let loss = cross_entropy_graph(&logits, &[0, 2], 3).unwrap();
        let row0 = -(2.0f64.exp() / (2.0f64.exp() + 0.5f64.exp() + (-1.0f64).exp())).ln();
        let row1 = (3.0f64).ln();
        assert!((loss.value() - (row0 + row1) / 2.0).abs() < 1e-12);
        assert!(cross_entropy_graph(&logits, &[0, 3], 3).is_err());
        assert!(cross_entropy_graph(&logits, &[0], 3).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = Classifier::init(ClassifierConfig::new(3, 4, 8, 2), 5).unwrap();
        let mut r = rng::seeded(1);
        let x = rng::normal(&mut r, (6, 3), 0.0, 1.0);
        let labels = [0u32, 1, 2, 3, 0, 2];
        let objective = |m: &Classifier| -> f64 {
            let tape = Tape::new();
            let leaves = LeafBank::from_params(&tape, &m.params);
            let logits = m.logits_graph(&leaves, &tape.constant(x.clone()), None).unwrap();
            cross_entropy_graph(&logits, &labels, 4).unwrap().value()
        };
        let tape = Tape::new();
        let leaves = LeafBank::from_params(&tape, &model.params);
        let logits = model.logits_graph(&leaves, &tape.constant(x.clone()), None).unwrap();
        let loss = cross_entropy_graph(&logits, &labels, 4).unwrap();
        let grads = grad(&loss, leaves.vars()).unwrap();
        let eps = 1e-6;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let g = grads[pi].data();
            let shape = model.params.get(name).unwrap().dim();
            for k in [0, shape.0 * shape.1 - 1] {
                let (i, j) = (k / shape.1, k % shape.1);
                model.params.get_mut(name).unwrap()[(i, j)] += eps;
                let fp = objective(&model);
                model.params.get_mut(name).unwrap()[(i, j)] -= 2.0 * eps;
                let fm = objective(&model);
                model.params.get_mut(name).unwrap()[(i, j)] += eps;
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - g[(i, j)]).abs() < 1e-6 * fd.abs().max(1.0),
                    "{name}: fd={fd} an={}",
                    g[(i, j)]
                );
            }
        }
    }

    #[test]
    fn learns_linearly_separable_clusters() {
        let mut r = rng::seeded(3);
        let n_per = 60;
        let centers = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..n_per {
                let p = rng::normal(&mut r, (1, 2), 0.0, 0.25);
                rows.push(cx + p[(0, 0)]);
                rows.push(cy + p[(0, 1)]);
                labels.push(c as u32);
            }
        }
        let data = Array2::from_shape_vec((4 * n_per, 2), rows).unwrap();
        let mut model = Classifier::init(ClassifierConfig::new(2, 4, 32, 2), 7).unwrap();
        let stats = train_classifier(&mut model, &data, &labels, 300, 64, 1e-3, 11).unwrap();
        let eval = evaluate(&model, &data, &labels).unwrap();
        assert!(eval.accuracy > 0.97, "accuracy {}", eval.accuracy);
        assert!(stats.ema_accuracy > 0.8, "ema {}", stats.ema_accuracy);
        assert_eq!(eval.per_class.len(), 4);
        for (_, acc, cnt) in &eval.per_class {
            assert_eq!(*cnt, n_per);
            assert!(*acc > 0.9);
        }
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let mut r = rng::seeded(5);
        let data = rng::normal(&mut r, (200, 4), 0.0, 1.0);
        let labels: Vec<u32> = (0..200).map(|i| (i % 4) as u32).collect();
        let mut model = Classifier::init(ClassifierConfig::new(4, 4, 16, 2), 9).unwrap();
        // random data with arbitrary labels: held-out accuracy near chance
        let train_rows: Vec<usize> = (0..150).collect();
        let test_rows: Vec<usize> = (150..200).collect();
        let train = data.select(ndarray::Axis(0), &train_rows);
        let test = data.select(ndarray::Axis(0), &test_rows);
        train_classifier(&mut model, &train, &labels[..150], 200, 50, 1e-3, 2).unwrap();
        let eval = evaluate(&model, &test, &labels[150..]).unwrap();
        assert!(
            (eval.accuracy - 0.25).abs() < 0.15,
            "accuracy {}",
            eval.accuracy
        );
    }
}
