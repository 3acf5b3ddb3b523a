//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! Training needs exact gradients of simulated closed-loop costs with
//! respect to controller parameters. Those costs are long chains of scalar
//! operations (dynamics steps, controller evaluations, stage costs), so a
//! classic Wengert tape fits: the forward pass records every intermediate
//! value together with the local derivatives toward its operands, and a
//! single backward sweep accumulates adjoints to recover the full gradient
//! at a cost proportional to one forward evaluation.
//!
//! The [`Scalar`] trait is the bridge between plain evaluation and
//! differentiation: simulation and cost code is written once, generically
//! over `S: Scalar`, and runs either on `f64` (fast, no recording) or on
//! [`Var`] (recorded on a [`Tape`]). The two paths execute the *same*
//! floating-point operations in the same order, so values agree bit-for-bit
//! and gradients correspond exactly to the evaluated function.
//!
//! Design notes:
//!
//! * Each tape node stores at most two parent indices with precomputed
//!   local derivative weights. The backward sweep is a single reverse loop.
//! * [`Scalar::vmax`]/[`Scalar::vmin`] select a branch by value and return
//!   the chosen operand unchanged, so the backward pass sees only the
//!   active piece. No node is recorded, which also prevents `0 * inf`
//!   adjoint poisoning from the pruned branch.
//! * The backward sweep skips nodes with zero adjoint. Besides speed, this
//!   keeps infinite local weights in unreachable subexpressions (for
//!   example a `sqrt` at zero whose result was later multiplied by zero)
//!   from turning the whole gradient into NaN.
//!
//! ```
//! use snoc::autodiff::{Scalar, Tape};
//!
//! // d/dx [tanh(x * x)] = (1 - tanh^2(x^2)) * 2x
//! let tape = Tape::new();
//! let x = tape.var(0.7);
//! let y = (x * x).tanh();
//! let grad = y.grad();
//! let expected = (1.0 - f64::tanh(0.49).powi(2)) * 1.4;
//! assert!((grad.wrt(x) - expected).abs() < 1e-15);
//! ```

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Numeric type usable in simulation and cost code.
///
/// Implemented by `f64` (plain evaluation) and [`Var`] (recorded
/// evaluation). Generic code mixes scalars with constants through
/// [`lift`](Scalar::lift), [`scale`](Scalar::scale) and
/// [`shift`](Scalar::shift) instead of bare `f64` arithmetic so that the
/// same source line works for both implementations.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Current numeric value.
    fn value(self) -> f64;

    /// A constant with value `v`, attached to the same tape as `self`.
    fn lift(self, v: f64) -> Self;

    /// `k * self` for a constant `k`.
    fn scale(self, k: f64) -> Self;

    /// `self + c` for a constant `c`.
    fn shift(self, c: f64) -> Self;

    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn recip(self) -> Self;

    /// The operand with the larger value (`self` on ties). Differentiates
    /// as the selected branch.
    fn vmax(self, other: Self) -> Self;

    /// The operand with the smaller value (`self` on ties). Differentiates
    /// as the selected branch.
    fn vmin(self, other: Self) -> Self;

    /// `max(self, c)` for a constant `c`.
    fn vmax_c(self, c: f64) -> Self {
        let k = self.lift(c);
        self.vmax(k)
    }

    /// `min(self, c)` for a constant `c`.
    fn vmin_c(self, c: f64) -> Self {
        let k = self.lift(c);
        self.vmin(k)
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, v: f64) -> f64 {
        v
    }
    fn scale(self, k: f64) -> f64 {
        k * self
    }
    fn shift(self, c: f64) -> f64 {
        self + c
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn recip(self) -> f64 {
        f64::recip(self)
    }
    fn vmax(self, other: f64) -> f64 {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn vmin(self, other: f64) -> f64 {
        if self <= other {
            self
        } else {
            other
        }
    }
}

/// One recorded operation: value plus up to two weighted parents.
#[derive(Clone, Copy)]
struct Node {
    weights: [f64; 2],
    deps: [u32; 2],
}

/// Record of a forward computation.
///
/// Create one tape per differentiated evaluation, register inputs with
/// [`Tape::var`], compute the output generically, then call [`Var::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an independent input variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [0.0, 0.0], None)
    }

    fn push(&self, value: f64, weights: [f64; 2], deps: Option<[u32; 2]>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape overflow: more than u32::MAX nodes");
        // Leaves depend on themselves with zero weight, which makes the
        // backward sweep uniform (no special case per node).
        let deps = deps.unwrap_or([index, index]);
        nodes.push(Node { weights, deps });
        Var {
            tape: self,
            index,
            val: value,
        }
    }

    fn unary(&self, a: Var<'_>, value: f64, weight: f64) -> Var<'_> {
        self.push(value, [weight, 0.0], Some([a.index, a.index]))
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, value: f64, wa: f64, wb: f64) -> Var<'_> {
        self.push(value, [wa, wb], Some([a.index, b.index]))
    }
}

/// A value recorded on a [`Tape`]. Copyable handle: tape reference, node
/// index, cached value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    val: f64,
}

impl<'t> Var<'t> {
    /// Reverse sweep from `self`, returning the adjoints of every node.
    ///
    /// The sweep visits nodes in reverse recording order and skips any
    /// node whose accumulated adjoint is exactly zero.
    pub fn grad(self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        let end = self.index as usize;
        let mut adj = vec![0.0; end + 1];
        adj[end] = 1.0;
        for i in (0..=end).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            adj[node.deps[0] as usize] += node.weights[0] * a;
            adj[node.deps[1] as usize] += node.weights[1] * a;
        }
        Gradients { adj }
    }
}

/// Adjoints produced by [`Var::grad`], queried per input variable.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// Derivative of the swept output with respect to `v`.
    ///
    /// `v` must live on the tape the sweep ran on. Variables recorded
    /// after the output have zero derivative.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj.get(v.index as usize).copied().unwrap_or(0.0)
    }
}

impl Scalar for Var<'_> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, v: f64) -> Self {
        self.tape.push(v, [0.0, 0.0], None)
    }
    fn scale(self, k: f64) -> Self {
        self.tape.unary(self, k * self.val, k)
    }
    fn shift(self, c: f64) -> Self {
        self.tape.unary(self, self.val + c, 1.0)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.tape.unary(self, t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary(self, e, e)
    }
    fn ln(self) -> Self {
        self.tape.unary(self, self.val.ln(), self.val.recip())
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape.unary(self, s, 0.5 / s)
    }
    fn abs(self) -> Self {
        self.tape.unary(self, self.val.abs(), self.val.signum())
    }
    fn recip(self) -> Self {
        let r = self.val.recip();
        self.tape.unary(self, r, -r * r)
    }
    fn vmax(self, other: Self) -> Self {
        if self.val >= other.val {
            self
        } else {
            other
        }
    }
    fn vmin(self, other: Self) -> Self {
        if self.val <= other.val {
            self
        } else {
            other
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        self.tape.binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.tape.binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.tape
            .binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        let inv = rhs.val.recip();
        self.tape
            .binary(self, rhs, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        self.tape.unary(self, -self.val, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A smooth test function exercising every recorded operation, written
    /// once and run on both scalar implementations.
    fn composite<S: Scalar>(x: S, y: S, z: S) -> S {
        let a = (x * y + z.tanh()).exp().scale(0.25);
        let b = (x * x + y * y).shift(1.0).sqrt().ln();
        let c = (z * z).shift(2.0).recip() - (x - y).abs();
        let d = (a + b * c).shift(0.5);
        d / (x * x + y * y + z * z).shift(3.0)
    }

    #[test]
    fn values_match_plain_evaluation() {
        let tape = Tape::new();
        let (x, y, z) = (tape.var(0.3), tape.var(-1.2), tape.var(0.8));
        let out = composite(x, y, z);
        assert_eq!(out.value(), composite(0.3_f64, -1.2, 0.8));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let vars = [tape.var(p[0]), tape.var(p[1]), tape.var(p[2])];
            let grad = composite(vars[0], vars[1], vars[2]).grad();
            let h = 1e-6;
            for i in 0..3 {
                let (mut lo, mut hi) = (p, p);
                lo[i] -= h;
                hi[i] += h;
                let fd = (composite(hi[0], hi[1], hi[2]) - composite(lo[0], lo[1], lo[2]))
                    / (2.0 * h);
                let ad = grad.wrt(vars[i]);
                assert!(
                    (ad - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "coord {i} at {p:?}: ad={ad} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn chain_rule_is_exact_on_analytic_case() {
        let tape = Tape::new();
        let x = tape.var(0.7);
        let grad = (x * x).tanh().grad();
        let expected = (1.0 - f64::tanh(0.49).powi(2)) * 1.4;
        assert!((grad.wrt(x) - expected).abs() < 1e-15);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f = (x * x) + (x * x): adjoint flows through the shared node twice.
        let tape = Tape::new();
        let x = tape.var(3.0);
        let sq = x * x;
        let grad = (sq + sq).grad();
        assert_eq!(grad.wrt(x), 12.0);
    }

    #[test]
    fn branch_selection_differentiates_the_active_piece() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(5.0);
        let m = (x * x).vmax(y); // 4 < 5: picks y
        let grad = (m * x).grad();
        assert_eq!(grad.wrt(y), 2.0);
        assert_eq!(grad.wrt(x), 5.0);

        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(5.0);
        let m = (x * x).vmax(y); // 9 > 5: picks x * x
        let grad = m.grad();
        assert_eq!(grad.wrt(x), 6.0);
        assert_eq!(grad.wrt(y), 0.0);
    }

    #[test]
    fn constant_clamps_differentiate_as_identity_inside_the_range() {
        let tape = Tape::new();
        let x = tape.var(0.4);
        let grad = x.vmax_c(0.0).vmin_c(1.0).grad();
        assert_eq!(grad.wrt(x), 1.0);

        let tape = Tape::new();
        let x = tape.var(1.7);
        let clamped = x.vmax_c(0.0).vmin_c(1.0);
        assert_eq!(clamped.value(), 1.0);
        assert_eq!(clamped.grad().wrt(x), 0.0);
    }

    #[test]
    fn zero_adjoint_subtrees_cannot_poison_the_gradient() {
        // sqrt at zero has an infinite local derivative; multiplying the
        // result by zero must still yield a finite, correct gradient.
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = tape.var(2.0);
        let f = y * y + x.sqrt().scale(0.0);
        let grad = f.grad();
        assert_eq!(grad.wrt(y), 4.0);
        assert_eq!(grad.wrt(x), 0.0);
    }

    #[test]
    fn f64_and_var_branch_ties_agree() {
        assert_eq!(2.0_f64.vmax(2.0), 2.0);
        assert_eq!((-1.0_f64).vmin(3.0), -1.0);
        let tape = Tape::new();
        let a = tape.var(2.0);
        let b = tape.var(2.0);
        // Ties pick the left operand on both implementations.
        let picked = a.vmax(b);
        assert_eq!(picked.grad().wrt(a), 1.0);
    }

    #[test]
    fn variables_recorded_after_the_output_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let out = x * x;
        let later = tape.var(9.0);
        let grad = out.grad();
        assert_eq!(grad.wrt(later), 0.0);
        assert_eq!(grad.wrt(x), 3.0);
    }
}
