//! Reverse-mode automatic differentiation over dense rank-2 tensors.
//!
//! Gradients are built as ordinary graph nodes, so any scalar function of a
//! gradient can itself be differentiated. This is what lets the meta-learning
//! outer loop backpropagate through unrolled inner-loop SGD updates without a
//! separate higher-order mechanism.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2};

use crate::error::{FunctaError, Result};

#[derive(Clone)]
enum Op {
    Const,
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    // scalar kept for debugging/readability of dumped graphs
    AddScalar(usize, #[allow(dead_code)] f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Elu(usize, f64),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumAxis0(usize),
    SumAxis1(usize),
    BroadcastAs(usize, #[allow(dead_code)] usize, #[allow(dead_code)] usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    ConcatCols(usize, usize),
    GatherCols(usize, Rc<Vec<usize>>),
    ScatterCols(usize, Rc<Vec<usize>>, usize),
    Reshape(usize, #[allow(dead_code)] usize, #[allow(dead_code)] usize),
    Detach(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Const | Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | ConcatCols(a, b) => {
                vec![*a, *b]
            }
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | Transpose(a)
            | Sin(a)
            | Cos(a)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Sigmoid(a)
            | Softplus(a)
            | Relu(a)
            | Elu(a, _)
            | Clamp(a, _, _)
            | SumAll(a)
            | SumAxis0(a)
            | SumAxis1(a)
            | BroadcastAs(a, _, _)
            | SliceCols(a, _, _)
            | PadCols(a, _, _)
            | GatherCols(a, _)
            | ScatterCols(a, _, _)
            | Reshape(a, _, _)
            | Detach(a) => vec![*a],
        }
    }
}

struct Node {
    data: Array2<f64>,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// A recorded computation graph. Single-threaded; independent graphs may run
/// on parallel workers.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    pub(crate) id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_done: false,
            })),
        }
    }

    fn push(&self, data: Array2<f64>, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { data, op });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    pub fn constant(&self, data: Array2<f64>) -> Var {
        self.push(data, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn leaf(&self, data: Array2<f64>) -> Var {
        self.push(data, Op::Leaf)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn data_of(&self, id: usize) -> Array2<f64> {
        self.inner.borrow().nodes[id].data.clone()
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        let b = self.inner.borrow();
        let d = &b.nodes[id].data;
        (d.nrows(), d.ncols())
    }

    /// Numeric gradients of a scalar `root` w.r.t. `wrt`, as plain arrays.
    /// Rejected if called twice on the same tape without `reset_backward`.
    pub fn backward(&self, root: &Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.backward_done {
                return Err(FunctaError::Contract(
                    "backward already run on this tape; reset before re-running".into(),
                ));
            }
            inner.backward_done = true;
        }
        let grads = grad(root, wrt)?;
        Ok(grads.iter().map(|g| g.data()).collect())
    }

    pub fn reset_backward(&self) {
        self.inner.borrow_mut().backward_done = false;
    }
}

fn same_tape(a: &Var, b: &Var) -> bool {
    Rc::ptr_eq(&a.tape.inner, &b.tape.inner)
}

impl Var {
    pub fn data(&self) -> Array2<f64> {
        self.tape.data_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.dim(), (1, 1), "value() requires a scalar node");
        d[(0, 0)]
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn unary(&self, data: Array2<f64>, op: Op) -> Var {
        self.tape.push(data, op)
    }

    fn binary(&self, other: &Var, f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>, op: impl Fn(usize, usize) -> Op) -> Var {
        assert!(same_tape(self, other), "vars from different tapes");
        let (a, b) = broadcast_pair(self, other);
        let da = a.data();
        let db = b.data();
        assert_eq!(da.dim(), db.dim(), "shape mismatch in elementwise op");
        self.tape.push(f(&da, &db), op(a.id, b.id))
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a / b, Op::Div)
    }

    pub fn neg(&self) -> Var {
        self.unary(-&self.data(), Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(&self.data() * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(&self.data() + c, Op::AddScalar(self.id, c))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        assert!(same_tape(self, other), "vars from different tapes");
        let a = self.data();
        let b = other.data();
        assert_eq!(a.ncols(), b.nrows(), "matmul dimension mismatch");
        self.tape.push(a.dot(&b), Op::MatMul(self.id, other.id))
    }

    pub fn t(&self) -> Var {
        self.unary(self.data().t().to_owned(), Op::Transpose(self.id))
    }

    pub fn sin(&self) -> Var {
        self.unary(self.data().mapv(f64::sin), Op::Sin(self.id))
    }

    pub fn cos(&self) -> Var {
        self.unary(self.data().mapv(f64::cos), Op::Cos(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(self.data().mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(self.data().mapv(f64::ln), Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(self.data().mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(
            self.data().mapv(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Sigmoid(self.id),
        )
    }

    /// Numerically stable ln(1 + exp(x)).
    pub fn softplus(&self) -> Var {
        self.unary(
            self.data().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p()),
            Op::Softplus(self.id),
        )
    }

    pub fn relu(&self) -> Var {
        self.unary(self.data().mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn elu(&self, alpha: f64) -> Var {
        self.unary(
            self.data()
                .mapv(|x| if x >= 0.0 { x } else { alpha * (x.exp() - 1.0) }),
            Op::Elu(self.id, alpha),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(
            self.data().mapv(|x| x.clamp(lo, hi)),
            Op::Clamp(self.id, lo, hi),
        )
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn silu(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    pub fn sum_all(&self) -> Var {
        self.unary(Array2::from_elem((1, 1), self.data().sum()), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var {
        let (r, c) = self.shape();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    /// Column sums: (n, k) -> (1, k).
    pub fn sum_axis0(&self) -> Var {
        let d = self.data();
        let s = d.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        self.unary(s, Op::SumAxis0(self.id))
    }

    /// Row sums: (n, k) -> (n, 1).
    pub fn sum_axis1(&self) -> Var {
        let d = self.data();
        let s = d.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        self.unary(s, Op::SumAxis1(self.id))
    }

    /// Broadcast a (1,1), (1,k) or (n,1) node to (rows, cols).
    pub fn broadcast_as(&self, rows: usize, cols: usize) -> Var {
        let d = self.data();
        let (r, c) = (d.nrows(), d.ncols());
        if (r, c) == (rows, cols) {
            return self.clone();
        }
        let out = match (r, c) {
            (1, 1) => Array2::from_elem((rows, cols), d[(0, 0)]),
            (1, k) if k == cols => {
                let row = d.row(0).to_owned();
                Array2::from_shape_fn((rows, cols), |(_, j)| row[j])
            }
            (n, 1) if n == rows => {
                let col = d.column(0).to_owned();
                Array2::from_shape_fn((rows, cols), |(i, _)| col[i])
            }
            _ => panic!("cannot broadcast ({r},{c}) to ({rows},{cols})"),
        };
        self.unary(out, Op::BroadcastAs(self.id, rows, cols))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let d = self.data();
        assert!(start + len <= d.ncols(), "slice out of range");
        self.unary(
            d.slice(s![.., start..start + len]).to_owned(),
            Op::SliceCols(self.id, start, len),
        )
    }

    /// Embed into a zero matrix of `total` columns starting at `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var {
        let d = self.data();
        assert!(start + d.ncols() <= total, "pad out of range");
        let mut out = Array2::zeros((d.nrows(), total));
        out.slice_mut(s![.., start..start + d.ncols()]).assign(&d);
        self.unary(out, Op::PadCols(self.id, start, total))
    }

    pub fn concat_cols(&self, other: &Var) -> Var {
        assert!(same_tape(self, other), "vars from different tapes");
        let a = self.data();
        let b = other.data();
        assert_eq!(a.nrows(), b.nrows(), "concat row mismatch");
        let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
        out.slice_mut(s![.., ..a.ncols()]).assign(&a);
        out.slice_mut(s![.., a.ncols()..]).assign(&b);
        self.tape.push(out, Op::ConcatCols(self.id, other.id))
    }

    /// Per-row column gather: out[i, 0] = self[i, idx[i]].
    pub fn gather_cols(&self, idx: Rc<Vec<usize>>) -> Var {
        let d = self.data();
        assert_eq!(d.nrows(), idx.len(), "gather index length mismatch");
        let out = Array2::from_shape_fn((d.nrows(), 1), |(i, _)| d[(i, idx[i])]);
        self.unary(out, Op::GatherCols(self.id, idx))
    }

    /// Per-row column scatter of a (n,1) into (n,k) zeros.
    pub fn scatter_cols(&self, idx: Rc<Vec<usize>>, k: usize) -> Var {
        let d = self.data();
        assert_eq!(d.ncols(), 1, "scatter expects a column vector");
        assert_eq!(d.nrows(), idx.len(), "scatter index length mismatch");
        let mut out = Array2::zeros((d.nrows(), k));
        for i in 0..d.nrows() {
            out[(i, idx[i])] = d[(i, 0)];
        }
        self.unary(out, Op::ScatterCols(self.id, idx, k))
    }

    /// Row-major reshape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let d = self.data();
        assert_eq!(d.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = d.iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.unary(out, Op::Reshape(self.id, rows, cols))
    }

    /// Cuts the gradient flow; value passes through unchanged.
    pub fn detach(&self) -> Var {
        self.unary(self.data(), Op::Detach(self.id))
    }
}

/// Align shapes of an elementwise pair, broadcasting (1,1), (1,k) or (n,1)
/// operands against the other.
fn broadcast_pair(a: &Var, b: &Var) -> (Var, Var) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    if (ar, ac) == (br, bc) {
        return (a.clone(), b.clone());
    }
    let rows = ar.max(br);
    let cols = ac.max(bc);
    (a.broadcast_as(rows, cols), b.broadcast_as(rows, cols))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $varm:ident) => {
        impl std::ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$varm(self, rhs)
            }
        }
        impl std::ops::$trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$varm(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$varm(&self, rhs)
            }
        }
        impl std::ops::$trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$varm(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl std::ops::Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}

/// Reverse-mode gradients of a scalar `root` w.r.t. each of `wrt`.
///
/// The returned gradients are themselves graph nodes on the same tape, so
/// they can be combined into further expressions and differentiated again.
pub fn grad(root: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    let tape = root.tape.clone();
    if root.shape() != (1, 1) {
        return Err(FunctaError::Contract(format!(
            "backward root must be scalar, got {:?}",
            root.shape()
        )));
    }
    for w in wrt {
        if !same_tape(root, w) {
            return Err(FunctaError::Contract("wrt var on a different tape".into()));
        }
    }

    // Reachable set (parents always have smaller ids than children).
    let mut reachable = vec![false; root.id + 1];
    let mut stack = vec![root.id];
    while let Some(id) = stack.pop() {
        if reachable[id] {
            continue;
        }
        reachable[id] = true;
        let parents = tape.inner.borrow().nodes[id].op.parents();
        stack.extend(parents);
    }

    let mut adjoint: HashMap<usize, Var> = HashMap::new();
    adjoint.insert(root.id, tape.constant(Array2::ones((1, 1))));

    let var_of = |id: usize| Var {
        tape: tape.clone(),
        id,
    };
    let accum = |adjoint: &mut HashMap<usize, Var>, id: usize, contrib: Var| {
        match adjoint.remove(&id) {
            Some(g) => adjoint.insert(id, g.add(&contrib)),
            None => adjoint.insert(id, contrib),
        };
    };

    for id in (0..=root.id).rev() {
        if !reachable[id] {
            continue;
        }
        let g = match adjoint.get(&id) {
            Some(g) => g.clone(),
            None => continue,
        };
        let op = tape.inner.borrow().nodes[id].op.clone();
        use Op::*;
        match op {
            Const | Leaf => {}
            Add(a, b) => {
                accum(&mut adjoint, a, g.clone());
                accum(&mut adjoint, b, g);
            }
            Sub(a, b) => {
                accum(&mut adjoint, a, g.clone());
                accum(&mut adjoint, b, g.neg());
            }
            Mul(a, b) => {
                accum(&mut adjoint, a, g.mul(&var_of(b)));
                accum(&mut adjoint, b, g.mul(&var_of(a)));
            }
            Div(a, b) => {
                let bv = var_of(b);
                accum(&mut adjoint, a, g.div(&bv));
                let out = var_of(id);
                accum(&mut adjoint, b, g.mul(&out).div(&bv).neg());
            }
            Neg(a) => accum(&mut adjoint, a, g.neg()),
            Scale(a, c) => accum(&mut adjoint, a, g.scale(c)),
            AddScalar(a, _) => accum(&mut adjoint, a, g),
            MatMul(a, b) => {
                accum(&mut adjoint, a, g.matmul(&var_of(b).t()));
                accum(&mut adjoint, b, var_of(a).t().matmul(&g));
            }
            Transpose(a) => accum(&mut adjoint, a, g.t()),
            Sin(a) => accum(&mut adjoint, a, g.mul(&var_of(a).cos())),
            Cos(a) => accum(&mut adjoint, a, g.mul(&var_of(a).sin()).neg()),
            Exp(a) => accum(&mut adjoint, a, g.mul(&var_of(id))),
            Ln(a) => accum(&mut adjoint, a, g.div(&var_of(a))),
            Sqrt(a) => accum(&mut adjoint, a, g.scale(0.5).div(&var_of(id))),
            Sigmoid(a) => {
                let y = var_of(id);
                let one_minus = y.neg().add_scalar(1.0);
                accum(&mut adjoint, a, g.mul(&y).mul(&one_minus));
            }
            Softplus(a) => accum(&mut adjoint, a, g.mul(&var_of(a).sigmoid())),
            Relu(a) => {
                let mask = tape.constant(var_of(a).data().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                accum(&mut adjoint, a, g.mul(&mask));
            }
            Elu(a, alpha) => {
                let x = var_of(a);
                let pos = tape.constant(x.data().mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 }));
                let neg = tape.constant(x.data().mapv(|v| if v < 0.0 { alpha } else { 0.0 }));
                let d = pos.add(&neg.mul(&x.exp()));
                accum(&mut adjoint, a, g.mul(&d));
            }
            Clamp(a, lo, hi) => {
                let mask = tape.constant(
                    var_of(a)
                        .data()
                        .mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }),
                );
                accum(&mut adjoint, a, g.mul(&mask));
            }
            SumAll(a) => {
                let (r, c) = tape.shape_of(a);
                accum(&mut adjoint, a, g.broadcast_as(r, c));
            }
            SumAxis0(a) => {
                let (r, c) = tape.shape_of(a);
                accum(&mut adjoint, a, g.broadcast_as(r, c));
            }
            SumAxis1(a) => {
                let (r, c) = tape.shape_of(a);
                accum(&mut adjoint, a, g.broadcast_as(r, c));
            }
            BroadcastAs(a, _, _) => {
                let (r, c) = tape.shape_of(a);
                let red = match (r, c) {
                    (1, 1) => g.sum_all(),
                    (1, _) => g.sum_axis0(),
                    (_, 1) => g.sum_axis1(),
                    _ => unreachable!("broadcast source must be scalar, row or column"),
                };
                accum(&mut adjoint, a, red);
            }
            SliceCols(a, start, _len) => {
                let (_, total) = tape.shape_of(a);
                accum(&mut adjoint, a, g.pad_cols(start, total));
            }
            PadCols(a, start, _total) => {
                let (_, len) = tape.shape_of(a);
                accum(&mut adjoint, a, g.slice_cols(start, len));
            }
            ConcatCols(a, b) => {
                let (_, ac) = tape.shape_of(a);
                let (_, bc) = tape.shape_of(b);
                accum(&mut adjoint, a, g.slice_cols(0, ac));
                accum(&mut adjoint, b, g.slice_cols(ac, bc));
            }
            GatherCols(a, idx) => {
                let (_, k) = tape.shape_of(a);
                accum(&mut adjoint, a, g.scatter_cols(idx, k));
            }
            ScatterCols(a, idx, _k) => {
                accum(&mut adjoint, a, g.gather_cols(idx));
            }
            Reshape(a, _, _) => {
                let (r, c) = tape.shape_of(a);
                accum(&mut adjoint, a, g.reshape(r, c));
            }
            Detach(_) => {}
        }
    }

    Ok(wrt
        .iter()
        .map(|w| match adjoint.get(&w.id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = w.shape();
                tape.constant(Array2::zeros((r, c)))
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0], [2.0]]);
        let root = x.square().sum_all();
        let g = t.backward(&root, &[x]).unwrap();
        assert_eq!(g[0], array![[2.0], [4.0]]);
    }

    #[test]
    fn constant_root_zero_grads() {
        let t = Tape::new();
        let x = t.leaf(array![[3.0, -1.0]]);
        let root = t.scalar(5.0);
        let g = t.backward(&root, &[x]).unwrap();
        assert_eq!(g[0], array![[0.0, 0.0]]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert!(t.backward(&x.clone(), &[x]).is_err());
    }

    #[test]
    fn double_backward_rejected() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0]]);
        let root = x.square().sum_all();
        t.backward(&root, &[x.clone()]).unwrap();
        assert!(t.backward(&root, &[x]).is_err());
    }

    #[test]
    fn second_order_through_grad_nodes() {
        // f(x) = x^3, f' = 3x^2, f'' = 6x
        let t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let y = x.square().mul(&x).sum_all();
        let g = grad(&y, &[x.clone()]).unwrap();
        assert!((g[0].value() - 12.0).abs() < 1e-12);
        let gg = grad(&g[0].sum_all(), &[x]).unwrap();
        assert!((gg[0].value() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_broadcast_grads_match_fd() {
        let mut rng = crate::rng::seeded(7);
        let a0 = crate::rng::uniform(&mut rng, (3, 2), -1.0, 1.0);
        let b0 = crate::rng::uniform(&mut rng, (2, 4), -1.0, 1.0);
        let bias0 = crate::rng::uniform(&mut rng, (1, 4), -1.0, 1.0);
        let f = |a: &Array2<f64>, b: &Array2<f64>, bias: &Array2<f64>| {
            let t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            let biasv = t.leaf(bias.clone());
            let y = av.matmul(&bv).add(&biasv).sin().square().sum_all();
            (t, y, av, bv, biasv)
        };
        let (t, y, av, bv, biasv) = f(&a0, &b0, &bias0);
        let g = t.backward(&y, &[av, bv, biasv]).unwrap();
        let eps = 1e-6;
        for (pi, p0) in [a0.clone(), b0.clone(), bias0.clone()].iter().enumerate() {
            for idx in 0..p0.len() {
                let (r, c) = (idx / p0.ncols(), idx % p0.ncols());
                let mut plus = [a0.clone(), b0.clone(), bias0.clone()];
                plus[pi][(r, c)] += eps;
                let mut minus = [a0.clone(), b0.clone(), bias0.clone()];
                minus[pi][(r, c)] -= eps;
                let yp = f(&plus[0], &plus[1], &plus[2]).1.value();
                let ym = f(&minus[0], &minus[1], &minus[2]).1.value();
                let fd = (yp - ym) / (2.0 * eps);
                let an = g[pi][(r, c)];
                assert!(
                    (fd - an).abs() / fd.abs().max(1e-3) < 1e-4,
                    "param {pi} entry {idx}: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let idx = Rc::new(vec![2usize, 0]);
        let y = x.gather_cols(idx).square().sum_all();
        let g = t.backward(&y, &[x]).unwrap();
        assert_eq!(g[0], array![[0.0, 0.0, 6.0], [8.0, 0.0, 0.0]]);
    }
}
