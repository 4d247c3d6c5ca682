//! Central-difference gradient checking.

use super::{Tape, Tensor};

/// Compare the tape gradient of a scalar-valued function against central
/// differences, coordinate by coordinate. Returns the worst relative error,
/// with denominators floored at 1e-8.
///
/// `f` must be deterministic; it is re-evaluated 2·numel times on fresh
/// tapes with gradients disabled.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&super::Var) -> super::Var,
{
    finite_difference_check_masked(f, x, h, |_| false)
}

/// Like [`finite_difference_check`] but skips coordinates the caller marks
/// as kink-adjacent (within `h` of a non-differentiable point of f, e.g.
/// relu/abs/clamp inputs near their corners).
pub fn finite_difference_check_masked<F>(
    f: F,
    x: &Tensor,
    h: f64,
    exclude: impl Fn(usize) -> bool,
) -> f64
where
    F: Fn(&super::Var) -> super::Var,
{
    assert!(h > 0.0, "finite_difference_check: h must be positive");
    let tape = Tape::new();
    let xv = tape.leaf(x, true);
    let loss = f(&xv);
    loss.backward();
    let analytic = match xv.grad() {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Tensor| -> f64 {
        let t = Tape::new();
        let v = t.leaf(probe, false);
        f(&v).item()
    };

    let base = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        if exclude(i) {
            continue;
        }
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(&Tensor::from_vec(x.shape().to_vec(), plus));
        let fm = eval(&Tensor::from_vec(x.shape().to_vec(), minus));
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}
