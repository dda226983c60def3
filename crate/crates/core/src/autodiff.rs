//! Reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation as it is evaluated; nodes are appended
//! in evaluation order, so a single reverse sweep from the output visits each
//! node once in valid topological order. Binary element-wise operations
//! broadcast singleton rows/columns, and the backward pass sums gradients back
//! onto the broadcast axes.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{Array2, Axis};

use crate::error::{CcdError, Result};
use crate::vehicle::Real;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Min(usize, usize),
    Clamp(usize, f64, f64),
    SmoothL1(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Concat(Vec<usize>),
    Col(usize, usize),
    BroadcastRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Operation recorder. Create one per optimisation step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape`, undoing broadcasting.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_map(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let a = a.broadcast(shape).expect("broadcast");
    let b = b.broadcast(shape).expect("broadcast");
    let mut out = Array2::zeros(shape);
    ndarray::Zip::from(&mut out).and(&a).and(&b).for_each(|o, &x, &y| *o = f(x, y));
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Column vector from a slice.
    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            zip_map(&nodes[a].value, &nodes[b].value, f)
        };
        self.push(value, op)
    }

    fn value_of(&self, idx: usize) -> Array2<f64> {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.idx].value.dim() != (1, 1) {
            return Err(CcdError::Shape(format!("backward requires a 1x1 output, got {:?}", nodes[output.idx].value.dim())));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.idx] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    acc(&mut grads, a, reduce_to(g.clone(), val(a).dim()));
                    acc(&mut grads, b, reduce_to(g.clone(), val(b).dim()));
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, a, reduce_to(g.clone(), val(a).dim()));
                    acc(&mut grads, b, reduce_to(-&g, val(b).dim()));
                }
                &Op::Mul(a, b) => {
                    let ga = zip_map(&g, val(b), |g, y| g * y);
                    let gb = zip_map(&g, val(a), |g, x| g * x);
                    acc(&mut grads, a, reduce_to(ga, val(a).dim()));
                    acc(&mut grads, b, reduce_to(gb, val(b).dim()));
                }
                &Op::Div(a, b) => {
                    let ga = zip_map(&g, val(b), |g, y| g / y);
                    // d(a/b)/db = -out / b
                    let gb = zip_map(&zip_map(&g, &node.value, |g, o| -g * o), val(b), |t, y| t / y);
                    acc(&mut grads, a, reduce_to(ga, val(a).dim()));
                    acc(&mut grads, b, reduce_to(gb, val(b).dim()));
                }
                &Op::Neg(a) => acc(&mut grads, a, -&g),
                &Op::Scale(a, s) => acc(&mut grads, a, &g * s),
                &Op::Offset(a) => acc(&mut grads, a, g.clone()),
                &Op::MatMul(a, b) => {
                    acc(&mut grads, a, g.dot(&val(b).t()));
                    acc(&mut grads, b, val(a).t().dot(&g));
                }
                &Op::Tanh(a) => acc(&mut grads, a, zip_map(&g, &node.value, |g, t| g * (1.0 - t * t))),
                &Op::Softplus(a) => acc(&mut grads, a, zip_map(&g, val(a), |g, x| g * sigmoid(x))),
                &Op::Exp(a) => acc(&mut grads, a, zip_map(&g, &node.value, |g, e| g * e)),
                &Op::Ln(a) => acc(&mut grads, a, zip_map(&g, val(a), |g, x| g / x)),
                &Op::Sqrt(a) => acc(&mut grads, a, zip_map(&g, &node.value, |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })),
                &Op::Abs(a) => acc(&mut grads, a, zip_map(&g, val(a), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })),
                &Op::Min(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let shape = node.value.dim();
                    let ba = va.broadcast(shape).expect("broadcast");
                    let bb = vb.broadcast(shape).expect("broadcast");
                    let mut ga = Array2::zeros(shape);
                    let mut gb = Array2::zeros(shape);
                    ndarray::Zip::from(&mut ga).and(&mut gb).and(&g).and(&ba).and(&bb).for_each(|ga, gb, &g, &x, &y| {
                        if x <= y {
                            *ga = g;
                        } else {
                            *gb = g;
                        }
                    });
                    acc(&mut grads, a, reduce_to(ga, va.dim()));
                    acc(&mut grads, b, reduce_to(gb, vb.dim()));
                }
                &Op::Clamp(a, lo, hi) => acc(&mut grads, a, zip_map(&g, val(a), |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })),
                &Op::SmoothL1(a) => acc(&mut grads, a, zip_map(&g, val(a), |g, d| if d.abs() < 1.0 { g * d } else { g * d.signum() })),
                &Op::Sum(a) => {
                    let s = g[(0, 0)];
                    acc(&mut grads, a, Array2::from_elem(val(a).dim(), s));
                }
                &Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    acc(&mut grads, a, Array2::from_elem(val(a).dim(), g[(0, 0)] / n));
                }
                &Op::SumCols(a) => {
                    let dim = val(a).dim();
                    let ga = g.broadcast(dim).expect("broadcast").to_owned();
                    acc(&mut grads, a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                &Op::Col(a, j) => {
                    let mut ga = Array2::zeros(val(a).dim());
                    ga.column_mut(j).assign(&g.column(0));
                    acc(&mut grads, a, ga);
                }
                &Op::BroadcastRows(a) => acc(&mut grads, a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: nodes.iter().map(|n| n.value.dim()).collect() })
    }
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.idx]),
        }
    }

    pub fn scalar_wrt(&self, v: Var<'_>) -> f64 {
        self.grads[v.idx].as_ref().map_or(0.0, |g| g.sum())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.value_of(self.idx)
    }

    /// First element; convenient for 1x1 nodes.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.dim()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.dot(&nodes[rhs.idx].value)
        };
        self.tape.push(value, Op::MatMul(self.idx, rhs.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Tanh(self.idx), |a| a.mapv(f64::tanh))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Softplus(self.idx), |a| a.mapv(softplus))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Exp(self.idx), |a| a.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Ln(self.idx), |a| a.mapv(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Sqrt(self.idx), |a| a.mapv(f64::sqrt))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Abs(self.idx), |a| a.mapv(f64::abs))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn min(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.idx, rhs.idx, Op::Min(self.idx, rhs.idx), f64::min)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Clamp(self.idx, lo, hi), |a| a.mapv(|x| x.clamp(lo, hi)))
    }

    /// Element-wise smooth-L1 (Huber with unit threshold) of `self`.
    pub fn smooth_l1(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::SmoothL1(self.idx), |a| a.mapv(smooth_l1))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Sum(self.idx), |a| Array2::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Mean(self.idx), |a| Array2::from_elem((1, 1), a.sum() / a.len() as f64))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::SumCols(self.idx), |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    pub fn col(self, j: usize) -> Var<'t> {
        self.tape.unary(self.idx, Op::Col(self.idx, j), |a| a.column(j).to_owned().insert_axis(Axis(1)))
    }

    /// Repeat a single row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        self.tape.unary(self.idx, Op::BroadcastRows(self.idx), |a| {
            assert_eq!(a.nrows(), 1, "broadcast_rows expects a single row");
            a.broadcast((n, a.ncols())).expect("broadcast").to_owned()
        })
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.idx].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat rows must match")
        };
        tape.push(value, Op::Concat(parts.iter().map(|p| p.idx).collect()))
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self.idx, rhs.idx, Op::$op(self.idx, rhs.idx), $f)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Neg(self.idx), |a| -a)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, s: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Scale(self.idx, s), |a| a * s)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Offset(self.idx), |a| a + c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

impl Real for Var<'_> {
    fn abs(self) -> Self {
        Var::abs(self)
    }

    fn lift(self, value: f64) -> Self {
        self.tape.scalar(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn linear_map_gradient_is_input() {
        let tape = Tape::new();
        let w = tape.leaf(array![[0.3], [-1.2], [2.0]]);
        let x = tape.leaf(array![[1.5, -0.5, 4.0]]);
        let y = x.matmul(w).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w), array![[1.5], [-0.5], [4.0]]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let tape = Tape::new();
        let z = tape.scalar(0.0);
        let g = tape.backward(z.tanh()).unwrap();
        assert_eq!(g.scalar_wrt(z), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Array2::zeros((2, 1)));
        assert!(tape.backward(x.tanh()).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.leaf(Array2::ones((2, 3)));
        let g = tape.backward(a * a).unwrap();
        assert_eq!(g.wrt(b), Array2::<f64>::zeros((2, 3)));
        assert_eq!(g.scalar_wrt(a), 4.0);
    }

    #[test]
    fn broadcast_gradients_sum_back() {
        let tape = Tape::new();
        let col = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let s = tape.scalar(2.0);
        let row = tape.leaf(array![[1.0, 10.0]]);
        let out = ((col * s) + row).sum();
        assert_abs_diff_eq!(out.item(), 2.0 * 6.0 * 2.0 + 3.0 * 11.0, epsilon = 1e-12);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(col), array![[4.0], [4.0], [4.0]]);
        assert_eq!(g.scalar_wrt(s), 12.0);
        assert_eq!(g.wrt(row), array![[3.0, 3.0]]);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = x*x + 3x at x=2 -> f' = 2x + 3 = 7
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let f = x * x + x * 3.0;
        let g = tape.backward(f).unwrap();
        assert_eq!(g.scalar_wrt(x), 7.0);
    }
}
