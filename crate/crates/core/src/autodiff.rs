//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each recorded node stores its parent slots and the local partial
//! derivatives computed at record time, so the backward pass is a single
//! reverse sweep with no re-evaluation. Nodes have at most two parents
//! and cost 24 bytes; a full training step fits in a few million nodes.
//!
//! [`Var`] is `Copy` and may be a tape-less constant (`Real::lit`), which
//! lets pipeline code written against [`Real`] run unchanged at `f64` or
//! on the tape. Constants fold eagerly: an operation whose operands are
//! all constants records nothing, so frozen parameters cost no tape space.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::{Error, Result};

/// Denominator floor for guarded division: divisors smaller than this in
/// magnitude are replaced by `copysign(DIV_GUARD, d)` and the partial with
/// respect to the divisor is dropped.
pub const DIV_GUARD: f64 = 1e-12;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    wa: f64,
    wb: f64,
}

/// Wengert list. Interior mutability so `Var` operands can record through
/// shared references; not thread-safe by design.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all nodes but keeps the allocation. Any `Var` from before the
    /// clear is dangling; using one afterwards is a logic error.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// New leaf variable (a parameter). Its adjoint is read back with
    /// [`Gradients::wrt`] after `backward`.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            a: NONE,
            b: NONE,
            wa: 0.0,
            wb: 0.0,
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow: {} nodes", idx);
        nodes.push(node);
        idx as u32
    }

    /// Reverse sweep from `output`. Adjoints with zero incoming gradient are
    /// skipped, so disconnected subgraphs (including recorded-but-unused
    /// branches with non-finite partials) contribute nothing.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let Some(tape) = output.tape else {
            // Constant output: every gradient is zero.
            return Gradients { adj: Vec::new() };
        };
        debug_assert!(
            std::ptr::eq(tape, self),
            "backward called on a foreign tape's output"
        );
        let mut adj = vec![0.0f64; nodes.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.a != NONE {
                adj[n.a as usize] += n.wa * g;
            }
            if n.b != NONE {
                adj[n.b as usize] += n.wb * g;
            }
        }
        Gradients { adj }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints from one backward sweep.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// d(output)/d(v). Zero for constants and for variables the output does
    /// not depend on.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            None => 0.0,
            Some(_) => self.adj.get(v.idx as usize).copied().unwrap_or(0.0),
        }
    }
}

/// Tracked scalar: a slot on a tape, or a free constant when `tape` is
/// `None`. Copy, 24 bytes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            None => write!(f, "Var(const {})", self.val),
            Some(_) => write!(f, "Var(#{} = {})", self.idx, self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val,
        }
    }

    fn unary(self, val: f64, w: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.push(Node {
                    a: self.idx,
                    b: NONE,
                    wa: w,
                    wb: 0.0,
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn binary(self, o: Self, val: f64, wa: f64, wb: f64) -> Self {
        match (self.tape, o.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => {
                let idx = t.push(Node {
                    a: self.idx,
                    b: NONE,
                    wa,
                    wb: 0.0,
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (None, Some(t)) => {
                let idx = t.push(Node {
                    a: o.idx,
                    b: NONE,
                    wa: wb,
                    wb: 0.0,
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (Some(t), Some(t2)) => {
                debug_assert!(std::ptr::eq(t, t2), "operands from different tapes");
                let idx = t.push(Node {
                    a: self.idx,
                    b: o.idx,
                    wa,
                    wb,
                });
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    /// Guarded: divisors under [`DIV_GUARD`] in magnitude are floored and
    /// the divisor partial is dropped for that node.
    fn div(self, o: Self) -> Self {
        let (den, wb) = if o.val.abs() < DIV_GUARD {
            (DIV_GUARD.copysign(o.val), 0.0)
        } else {
            (o.val, -self.val / (o.val * o.val))
        };
        self.binary(o, self.val / den, 1.0 / den, wb)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar the pipeline is generic over: `f64` for plain evaluation, `Var`
/// for recording. Both run the identical operation sequence, so values
/// agree bit for bit wherever no division guard engages.
pub trait Real: Copy + fmt::Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    const TRACKS_GRADIENTS: bool;

    fn lit(v: f64) -> Self;
    fn value(self) -> f64;

    /// `self * k` for a plain constant; one node on the tape.
    fn scale(self, k: f64) -> Self;
    /// `self + k` for a plain constant; one node on the tape.
    fn shift(self, k: f64) -> Self;
    /// Fused `wa * self + wb * o`; a single node, which keeps big weighted
    /// sums (convolutions) cheap to record.
    fn affine(self, wa: f64, o: Self, wb: f64) -> Self;

    fn exp(self) -> Self;
    fn try_ln(self) -> Result<Self>;
    fn try_sqrt(self) -> Result<Self>;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    /// Clamps the value, passes the gradient straight through unchanged.
    fn clamp_st(self, lo: f64, hi: f64) -> Self;

    fn ln(self) -> Self {
        self.try_ln().expect("ln of non-positive input")
    }

    fn sqrt(self) -> Self {
        self.try_sqrt().expect("sqrt of negative input")
    }
}

impl Real for f64 {
    const TRACKS_GRADIENTS: bool = false;

    fn lit(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn shift(self, k: f64) -> Self {
        self + k
    }
    fn affine(self, wa: f64, o: Self, wb: f64) -> Self {
        wa * self + wb * o
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn try_ln(self) -> Result<Self> {
        if self <= 0.0 {
            return Err(Error::Domain {
                op: "ln",
                msg: format!("non-positive input {}", self),
            });
        }
        Ok(f64::ln(self))
    }
    fn try_sqrt(self) -> Result<Self> {
        if self < 0.0 {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {}", self),
            });
        }
        Ok(f64::sqrt(self))
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn clamp_st(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
}

impl<'t> Real for Var<'t> {
    const TRACKS_GRADIENTS: bool = true;

    fn lit(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn scale(self, k: f64) -> Self {
        self.unary(self.val * k, k)
    }
    fn shift(self, k: f64) -> Self {
        self.unary(self.val + k, 1.0)
    }
    fn affine(self, wa: f64, o: Self, wb: f64) -> Self {
        self.binary(o, wa * self.val + wb * o.val, wa, wb)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn try_ln(self) -> Result<Self> {
        if self.val <= 0.0 {
            return Err(Error::Domain {
                op: "ln",
                msg: format!("non-positive input {} at record time", self.val),
            });
        }
        Ok(self.unary(self.val.ln(), 1.0 / self.val))
    }
    fn try_sqrt(self) -> Result<Self> {
        if self.val < 0.0 {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {} at record time", self.val),
            });
        }
        let s = self.val.sqrt();
        // Partial is +inf at exactly zero; harmless unless the output
        // actually depends on it, in which case the non-finite gradient
        // surfaces in the caller's NaN checks.
        Ok(self.unary(s, 0.5 / s))
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn abs(self) -> Self {
        let w = if self.val == 0.0 {
            0.0
        } else {
            self.val.signum()
        };
        self.unary(self.val.abs(), w)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }
    fn clamp_st(self, lo: f64, hi: f64) -> Self {
        self.unary(self.val.clamp(lo, hi), 1.0)
    }
}

/// Left-fold sum; fixed order so tape and f64 paths agree bit for bit.
pub fn sum<T: Real>(items: impl IntoIterator<Item = T>) -> T {
    let mut it = items.into_iter();
    let Some(first) = it.next() else {
        return T::lit(0.0);
    };
    it.fold(first, |acc, x| acc + x)
}

/// Arithmetic mean; zero for an empty iterator.
pub fn mean<T: Real>(items: impl IntoIterator<Item = T>) -> T {
    let mut n = 0usize;
    let total = sum(items.into_iter().inspect(|_| n += 1));
    if n == 0 {
        T::lit(0.0)
    } else {
        total.scale(1.0 / n as f64)
    }
}

pub fn dot_slice<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}

/// `w` is row-major `rows x cols`; returns `w @ x + bias`.
pub fn matvec<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T], bias: &[T]) -> Vec<T> {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), cols);
    assert_eq!(bias.len(), rows);
    (0..rows)
        .map(|r| dot_slice(&w[r * cols..(r + 1) * cols], x) + bias[r])
        .collect()
}

/// Result of [`grad_check`]: analytic tape gradient against central finite
/// differences, with the worst offender identified.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Index into the parameter vector where `max_rel_err` occurred.
    pub worst_param: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Checks the tape gradient of `f` at `x0` against central differences
/// with per-coordinate step `1e-5 * max(1, |x|)`. Relative error uses
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x0: &[f64]) -> GradReport
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = x0.iter().map(|&v| tape.var(v)).collect();
    let out = f(&vars);
    let grads = tape.backward(out);
    let analytic: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |x: &[f64]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = x.iter().map(|&v| t.var(v)).collect();
        f(&vs).value()
    };

    let mut numeric = vec![0.0f64; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let h = 1e-5 * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let fp = eval(&x);
        x[i] = x0[i] - h;
        let fm = eval(&x);
        x[i] = x0[i];
        numeric[i] = (fp - fm) / (2.0 * h);
    }

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..x0.len() {
        let abs = (analytic[i] - numeric[i]).abs();
        let rel = abs / analytic[i].abs().max(numeric[i].abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }

    GradReport {
        analytic,
        numeric,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_param: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn product_plus_sin_matches_hand_derivative() {
        // f(x, y) = x * sin(x) + y at (2, 3)
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(3.0);
        let f = x * x.sin() + y;
        let g = tape.backward(f);
        close(f.value(), 2.0 * 2.0f64.sin() + 3.0, 1e-15);
        close(g.wrt(x), 2.0f64.sin() + 2.0 * 2.0f64.cos(), 1e-12);
        close(g.wrt(y), 1.0, 0.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let c = Var::constant(5.0);
        let g = tape.backward(c);
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn constants_fold_without_recording() {
        let tape = Tape::new();
        let _x = tape.var(1.0);
        let before = tape.len();
        let a = Var::constant(2.0);
        let b = Var::constant(3.0);
        let c = a * b + a.sin() - b.exp();
        assert_eq!(tape.len(), before);
        assert!(c.value().is_finite());
    }

    #[test]
    fn division_guard_floors_denominator_and_kills_divisor_gradient() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let b = tape.var(1e-30);
        let y = x / b;
        close(y.value(), 2.0 / DIV_GUARD, 1e-3);
        let g = tape.backward(y);
        close(g.wrt(x), 1.0 / DIV_GUARD, 1e-3);
        assert_eq!(g.wrt(b), 0.0);

        // Healthy divisors keep the quotient rule.
        let tape = Tape::new();
        let x = tape.var(2.0);
        let b = tape.var(4.0);
        let y = x / b;
        let g = tape.backward(y);
        close(g.wrt(x), 0.25, 1e-15);
        close(g.wrt(b), -2.0 / 16.0, 1e-15);
    }

    #[test]
    fn negative_zero_divisor_floors_to_negative() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let b = tape.var(-0.0);
        let y = x / b;
        assert!(y.value() < 0.0, "sign of -0 divisor must be kept");
    }

    #[test]
    fn clamp_is_straight_through() {
        let tape = Tape::new();
        let x = tape.var(40.0);
        let s = x.clamp_st(-30.0, 30.0).sigmoid();
        let g = tape.backward(s);
        let sv = sigmoid_f64(30.0);
        close(s.value(), sv, 1e-15);
        // FD would say zero here (both sides clamp); straight-through keeps
        // the saturated-sigmoid derivative instead.
        close(g.wrt(x), sv * (1.0 - sv), 1e-18);
    }

    #[test]
    fn relu_and_abs_subgradients_at_zero_are_zero() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let g = tape.backward(x.relu());
        assert_eq!(g.wrt(x), 0.0);
        let g = tape.backward(x.abs());
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn ln_and_sqrt_reject_bad_domains_at_record_time() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        assert!(x.try_ln().is_err());
        assert!(x.try_sqrt().is_err());
        assert!((-1.0f64).try_ln().is_err());
        assert!((-1.0f64).try_sqrt().is_err());
    }

    #[test]
    fn fused_affine_matches_explicit_form() {
        let tape = Tape::new();
        let a = tape.var(1.25);
        let b = tape.var(-0.75);
        let fused = a.affine(2.0, b, -3.0);
        let explicit = a.scale(2.0) + b.scale(-3.0);
        assert_eq!(fused.value(), explicit.value());
        let g = tape.backward(fused);
        assert_eq!(g.wrt(a), 2.0);
        assert_eq!(g.wrt(b), -3.0);
    }

    #[test]
    fn tape_and_f64_paths_agree_bitwise() {
        fn poly<T: Real>(x: T, y: T) -> T {
            let s = x.sigmoid() * y.exp() + (x * x + y * y).shift(1e-9).sqrt();
            s.scale(0.5) - (x - y).abs() / (x * y).shift(4.0)
        }
        let (xv, yv) = (0.731, -1.217);
        let plain = poly(xv, yv);
        let tape = Tape::new();
        let traced = poly(tape.var(xv), tape.var(yv));
        assert_eq!(plain.to_bits(), traced.value().to_bits());
    }

    #[test]
    fn dot_and_matvec_gradients_are_exact() {
        let tape = Tape::new();
        let a: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&v| tape.var(v)).collect();
        let b: Vec<Var> = [-0.5, 0.25, 4.0].iter().map(|&v| tape.var(v)).collect();
        let d = dot_slice(&a, &b);
        close(d.value(), 1.0 * -0.5 + 2.0 * 0.25 + 3.0 * 4.0, 1e-15);
        let g = tape.backward(d);
        for i in 0..3 {
            close(g.wrt(a[i]), b[i].value(), 0.0);
            close(g.wrt(b[i]), a[i].value(), 0.0);
        }

        let tape = Tape::new();
        let w: Vec<Var> = (1..=6).map(|v| tape.var(v as f64)).collect();
        let x: Vec<Var> = [2.0, -1.0, 0.5].iter().map(|&v| tape.var(v)).collect();
        let bias: Vec<Var> = [10.0, 20.0].iter().map(|&v| tape.var(v)).collect();
        let y = matvec(&w, 2, 3, &x, &bias);
        close(y[0].value(), 1.0 * 2.0 - 2.0 + 1.5 + 10.0, 1e-15);
        close(y[1].value(), 8.0 - 5.0 + 3.0 + 20.0, 1e-15);
        let g = tape.backward(y[1]);
        close(g.wrt(w[3]), 2.0, 0.0);
        close(g.wrt(x[0]), 4.0, 0.0);
        close(g.wrt(bias[1]), 1.0, 0.0);
        close(g.wrt(bias[0]), 0.0, 0.0);
    }

    #[test]
    fn mean_of_empty_is_zero() {
        let m: f64 = mean(std::iter::empty::<f64>());
        assert_eq!(m, 0.0);
    }

    #[test]
    fn grad_check_passes_on_composite_expression() {
        let report = grad_check(
            |v| {
                let s = v[0].sin() * v[1].exp() + (v[0] * v[0]).shift(1.0).ln();
                s.sigmoid() * v[2] + v[2].abs().scale(0.5)
            },
            &[0.8, -0.4, 1.7],
        );
        assert!(
            report.passes(1e-7),
            "max rel err {} at param {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn grad_check_each_primitive() {
        let cases: Vec<(&str, Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>>, Vec<f64>)> = vec![
            ("add", Box::new(|v| v[0] + v[1]), vec![0.3, -1.2]),
            ("sub", Box::new(|v| v[0] - v[1]), vec![0.3, -1.2]),
            ("mul", Box::new(|v| v[0] * v[1]), vec![0.3, -1.2]),
            ("div", Box::new(|v| v[0] / v[1]), vec![0.3, -1.2]),
            ("neg", Box::new(|v| -v[0]), vec![0.7]),
            ("exp", Box::new(|v| v[0].exp()), vec![0.9]),
            ("ln", Box::new(|v| v[0].ln()), vec![2.3]),
            ("sqrt", Box::new(|v| v[0].sqrt()), vec![1.9]),
            ("sin", Box::new(|v| v[0].sin()), vec![0.5]),
            ("cos", Box::new(|v| v[0].cos()), vec![0.5]),
            ("abs", Box::new(|v| v[0].abs()), vec![-0.8]),
            ("sigmoid", Box::new(|v| v[0].sigmoid()), vec![0.4]),
            ("relu", Box::new(|v| v[0].relu()), vec![0.6]),
            ("scale", Box::new(|v| v[0].scale(-2.5)), vec![0.6]),
            ("shift", Box::new(|v| v[0].shift(3.0)), vec![0.6]),
            (
                "affine",
                Box::new(|v| v[0].affine(1.5, v[1], -0.5)),
                vec![0.6, 2.0],
            ),
        ];
        for (name, f, x0) in cases {
            let report = grad_check(&*f, &x0);
            assert!(
                report.passes(1e-7),
                "{}: max rel err {}",
                name,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn node_budget_is_lean() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let y = tape.var(2.0);
        let base = tape.len();
        let _ = x * y + x;
        // mul + add, nothing else
        assert_eq!(tape.len() - base, 2);
        let n = tape.len();
        let _ = x.affine(0.5, y, 0.5);
        assert_eq!(tape.len() - n, 1);
    }

    #[test]
    fn clear_retains_capacity_and_resets_length() {
        let tape = Tape::new();
        for i in 0..100 {
            let v = tape.var(i as f64);
            let _ = v * v;
        }
        assert!(tape.len() >= 200);
        tape.clear();
        assert!(tape.is_empty());
        let x = tape.var(3.0);
        let y = x.exp();
        let g = tape.backward(y);
        close(g.wrt(x), 3.0f64.exp(), 1e-12);
    }
}
