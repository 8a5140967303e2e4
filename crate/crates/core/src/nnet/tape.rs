//! Scalar reverse-mode differentiation.
//!
//! A [`Tape`] records every scalar operation performed on [`Var`] handles
//! together with the local partial derivatives, so a single reverse sweep
//! yields the gradient of one output with respect to every recorded input.
//! Kinematics, decoding and all loss heads are written against the [`Real`]
//! trait, which `f64` and `Var` both implement; the same code path therefore
//! produces values and gradients.
//!
//! Dense network layers are not recorded scalar-by-scalar. They enter the
//! tape through [`Tape::custom`], a node whose value and partials the caller
//! supplies (typically from [`crate::nnet::Mlp`] backpropagation).

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::NnetError;

/// Arithmetic needed by the differentiable code paths in this crate.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(self, c: f64) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn sigmoid(self) -> Self;
    fn silu(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn constant_like(self, c: f64) -> Self {
        c
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn silu(self) -> Self {
        self * sigmoid(self)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Operations that can be evaluated but have no usable derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOp {
    Floor,
    Round,
    /// 1 if x > threshold else 0.
    Threshold,
    Sign,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    edge_start: u32,
    edge_len: u32,
    /// Set for non-differentiable nodes; holds the op for diagnostics.
    step: Option<StepOp>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
}

/// Recording context for [`Var`] arithmetic.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, parents: &[(u32, f64)], step: Option<StepOp>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let edge_start = inner.edges.len() as u32;
        inner.edges.extend_from_slice(parents);
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            value,
            edge_start,
            edge_len: parents.len() as u32,
            step,
        });
        idx
    }

    /// An independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: self.push(value, &[], None),
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    /// Node with caller-supplied value and partial derivatives
    /// `d value / d parent`.
    pub fn custom<'t>(&'t self, value: f64, partials: &[(Var<'t>, f64)]) -> Var<'t> {
        let edges: Vec<(u32, f64)> = partials.iter().map(|(v, d)| (v.idx, *d)).collect();
        Var {
            tape: self,
            idx: self.push(value, &edges, None),
        }
    }

    /// Sum of many variables as one node.
    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value()).sum();
        let edges: Vec<(u32, f64)> = xs.iter().map(|x| (x.idx, 1.0)).collect();
        Var {
            tape: self,
            idx: self.push(value, &edges, None),
        }
    }

    /// `Σ c_i x_i` as one node.
    pub fn linear_combination<'t>(&'t self, xs: &[Var<'t>], coeffs: &[f64]) -> Var<'t> {
        debug_assert_eq!(xs.len(), coeffs.len());
        let value = xs.iter().zip(coeffs).map(|(x, c)| x.value() * c).sum();
        let edges: Vec<(u32, f64)> = xs.iter().zip(coeffs).map(|(x, c)| (x.idx, *c)).collect();
        Var {
            tape: self,
            idx: self.push(value, &edges, None),
        }
    }

    /// Evaluate a non-differentiable op. Its output participates in forward
    /// computation, but [`Tape::gradient`] refuses to propagate through it.
    pub fn step<'t>(&'t self, op: StepOp, x: Var<'t>, threshold: f64) -> Var<'t> {
        let v = x.value();
        let value = match op {
            StepOp::Floor => v.floor(),
            StepOp::Round => v.round(),
            StepOp::Threshold => f64::from(u8::from(v > threshold)),
            StepOp::Sign => v.signum(),
        };
        Var {
            tape: self,
            idx: self.push(value, &[(x.idx, 0.0)], Some(op)),
        }
    }

    /// Adjoints of every recorded node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradient, NnetError> {
        let inner = self.inner.borrow();
        let n = output.idx as usize + 1;
        let mut adj = vec![0.0; inner.nodes.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            if let Some(op) = node.step {
                return Err(NnetError::UnsupportedOp(format!("{op:?}")));
            }
            let s = node.edge_start as usize;
            for &(p, d) in &inner.edges[s..s + node.edge_len as usize] {
                adj[p as usize] += a * d;
            }
        }
        Ok(Gradient { adj })
    }
}

/// Result of a reverse sweep.
pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx as usize]
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(*v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, d: f64) -> Self {
        Var {
            tape: self.tape,
            idx: self.tape.push(value, &[(self.idx, d)], None),
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        Var {
            tape: self.tape,
            idx: self.tape.push(value, &[(self.idx, da), (other.idx, db)], None),
        }
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.tape.inner.borrow().nodes[self.idx as usize].value
    }
    fn constant_like(self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn sqrt(self) -> Self {
        let v = self.value().sqrt();
        self.unary(v, 0.5 / v)
    }
    fn ln(self) -> Self {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }
    fn exp(self) -> Self {
        let v = self.value().exp();
        self.unary(v, v)
    }
    fn abs(self) -> Self {
        let x = self.value();
        // subgradient 0 at the kink
        self.unary(x.abs(), x.signum() * f64::from(u8::from(x != 0.0)))
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.value());
        self.unary(s, s * (1.0 - s))
    }
    fn silu(self) -> Self {
        let x = self.value();
        let s = sigmoid(x);
        self.unary(x * s, s * (1.0 + x * (1.0 - s)))
    }
    fn square(self) -> Self {
        let x = self.value();
        self.unary(x * x, 2.0 * x)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.value() + o.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.value() - o.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        self.binary(o, a * b, b, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        self.binary(o, a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Self {
        self.unary(self.value() + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Self {
        self.unary(self.value() - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Self {
        self.unary(self.value() * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Self {
        self.unary(self.value() / c, 1.0 / c)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<S: Real>(x: S, y: S) -> S {
        (x * y + x.sin_free()).silu() / (y.square() + 1.0) + (x - y).abs().sqrt() * x.exp().ln()
    }

    trait SinFree: Real {
        fn sin_free(self) -> Self {
            self.sigmoid() * 3.0 - 1.0
        }
    }
    impl<T: Real> SinFree for T {}

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.7, -1.3);
        let tape = Tape::new();
        let (x, y) = (tape.var(x0), tape.var(y0));
        let out = poly(x, y);
        assert!((out.value() - poly(x0, y0)).abs() < 1e-15);
        let g = tape.gradient(out).unwrap();
        let fd = finite_difference(|p| poly(p[0], p[1]), &[x0, y0], 1e-6);
        assert!((g.wrt(x) - fd[0]).abs() < 1e-8);
        assert!((g.wrt(y) - fd[1]).abs() < 1e-8);
    }

    #[test]
    fn custom_and_sum_nodes() {
        let tape = Tape::new();
        let xs = tape.vars(&[1.0, 2.0, 3.0]);
        let s = tape.sum(&xs);
        let lc = tape.linear_combination(&xs, &[2.0, 0.0, -1.0]);
        let c = tape.custom(10.0, &[(s, 0.5), (lc, 4.0)]);
        let g = tape.gradient(c).unwrap();
        assert_eq!(g.wrt_all(&xs), vec![8.5, 0.5, -3.5]);
    }

    #[test]
    fn step_ops_refuse_gradients() {
        let tape = Tape::new();
        let x = tape.var(0.3);
        let t = tape.step(StepOp::Threshold, x, 0.5);
        assert_eq!(t.value(), 0.0);
        let y = t * x + x;
        assert!(matches!(tape.gradient(y), Err(NnetError::UnsupportedOp(_))));
        // unreachable step nodes do not matter
        let z = x * 2.0;
        assert_eq!(tape.gradient(z).unwrap().wrt(x), 2.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let c = x.constant_like(4.0);
        let out = c * 2.0;
        assert_eq!(tape.gradient(out).unwrap().wrt(x), 0.0);
    }
}
