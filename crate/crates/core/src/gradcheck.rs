//! Central finite-difference gradient checking.
//!
//! The finite-difference side only runs forward passes, so it stays
//! independent of the reverse-mode implementation it is used to verify.

use crate::tensor::{Tape, Tensor, TensorId};

const H: f64 = 1e-6;

/// Relative error between an autodiff gradient entry and its
/// finite-difference estimate.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6)
}

/// Check `d loss / d x` for a scalar-valued graph built by `f`.
/// Returns the maximum relative error over all entries of `x`.
pub fn check_scalar_fn<F>(x0: &Tensor, f: F) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = f(&mut tape, x);
    tape.backward(loss).expect("backward");
    let ad = tape.grad(x).expect("grad").to_vec();

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::new();
        let xi = t.constant(Tensor::new(x0.shape().to_vec(), data.to_vec()).unwrap());
        let l = f(&mut t, xi);
        t.value(l).data()[0]
    };

    let mut max_rel = 0.0f64;
    let mut data = x0.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + H;
        let plus = eval(&data);
        data[i] = orig - H;
        let minus = eval(&data);
        data[i] = orig;
        let fd = (plus - minus) / (2.0 * H);
        max_rel = max_rel.max(relative_error(ad[i], fd));
    }
    max_rel
}

/// Check gradients w.r.t. both arguments of a two-input graph.
pub fn check_two_arg<F>(a0: &Tensor, b0: &Tensor, f: F) -> f64
where
    F: Fn(&mut Tape, TensorId, TensorId) -> TensorId,
{
    let ra = check_scalar_fn(a0, |t, a| {
        let b = t.leaf(b0.clone());
        f(t, a, b)
    });
    let rb = check_scalar_fn(b0, |t, b| {
        let a = t.leaf(a0.clone());
        f(t, a, b)
    });
    ra.max(rb)
}

/// Check gradients w.r.t. all three arguments of a three-input graph.
pub fn check_three_arg<F>(a0: &Tensor, b0: &Tensor, c0: &Tensor, f: F) -> f64
where
    F: Fn(&mut Tape, TensorId, TensorId, TensorId) -> TensorId,
{
    let ra = check_scalar_fn(a0, |t, a| {
        let b = t.leaf(b0.clone());
        let c = t.leaf(c0.clone());
        f(t, a, b, c)
    });
    let rb = check_scalar_fn(b0, |t, b| {
        let a = t.leaf(a0.clone());
        let c = t.leaf(c0.clone());
        f(t, a, b, c)
    });
    let rc = check_scalar_fn(c0, |t, c| {
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        f(t, a, b, c)
    });
    ra.max(rb).max(rc)
}
