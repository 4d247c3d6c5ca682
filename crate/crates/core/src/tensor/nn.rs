//! Network primitives: softmax, layer norm, GELU, cross-entropy.

use super::shape::numel;
use super::{Op, Var};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact GELU via the platform erf.
pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_deriv(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let phi_pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi_cdf + x * phi_pdf
}

/// Walk all lanes along `axis`: calls `f(start, stride, len)` per lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * axis_len * inner + i, inner);
        }
    }
}

impl Var {
    /// GELU with the exact erf form.
    pub fn gelu(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<f64> = node.data.iter().map(|&v| gelu_exact(v)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(out, shape, Op::Gelu { a: self.id }, needs)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let shape = node.shape.clone();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        assert!(shape[axis] > 0, "softmax: empty axis {axis} in {shape:?}");
        let axis_len = shape[axis];
        let mut out = vec![0.0; node.data.len()];
        for_each_lane(&shape, axis, |start, stride| {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..axis_len {
                mx = mx.max(node.data[start + k * stride]);
            }
            let mut total = 0.0;
            for k in 0..axis_len {
                let e = (node.data[start + k * stride] - mx).exp();
                out[start + k * stride] = e;
                total += e;
            }
            for k in 0..axis_len {
                out[start + k * stride] /= total;
            }
        });
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(out, shape, Op::Softmax { a: self.id, axis }, needs)
    }

    /// Layer normalization over the last axis, then affine by gamma/beta.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        assert!(
            self.same_tape(gamma) && self.same_tape(beta),
            "layer_norm: operands recorded on different tapes"
        );
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let shape = node.shape.clone();
        let dim = *shape.last().expect("layer_norm: input must have at least one axis");
        let ng = &inner.nodes[gamma.id];
        let nb = &inner.nodes[beta.id];
        assert_eq!(ng.shape, vec![dim], "layer_norm: gamma shape {:?}, want [{dim}]", ng.shape);
        assert_eq!(nb.shape, vec![dim], "layer_norm: beta shape {:?}, want [{dim}]", nb.shape);
        let rows = node.data.len() / dim;
        let mut out = vec![0.0; node.data.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &node.data[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for (j, &v) in row.iter().enumerate() {
                out[r * dim + j] = (v - mean) * inv_std * ng.data[j] + nb.data[j];
            }
        }
        let needs = node.needs_grad || ng.needs_grad || nb.needs_grad;
        drop(inner);
        self.tape.record(
            out,
            shape,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: means,
                inv_std: inv_stds,
            },
            needs,
        )
    }

    /// Per-example cross-entropy: −log softmax(logits)[label], log-sum-exp
    /// stable. Input B×K, labels length B, output length B.
    pub fn cross_entropy_per_example(&self, labels: &[usize]) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let shape = node.shape.clone();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be B×K, got {shape:?}");
        let (b, k) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b, "cross_entropy: {} labels for batch of {b}", labels.len());
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "cross_entropy: label {y} at index {i} out of range for {k} classes");
        }
        let mut out = vec![0.0; b];
        let mut probs = vec![0.0; b * k];
        for r in 0..b {
            let row = &node.data[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * k + j] = e;
                total += e;
            }
            for j in 0..k {
                probs[r * k + j] /= total;
            }
            let lse = mx + total.ln();
            out[r] = lse - row[labels[r]];
        }
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(
            out,
            vec![b],
            Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs },
            needs,
        )
    }

    /// Mean cross-entropy over the batch (scalar).
    pub fn cross_entropy(&self, labels: &[usize]) -> Var {
        self.cross_entropy_per_example(labels).mean_all()
    }
}

pub(crate) fn softmax_backward(g: &[f64], y: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let mut dx = vec![0.0; numel(shape)];
    for_each_lane(shape, axis, |start, stride| {
        let mut dot = 0.0;
        for k in 0..axis_len {
            let i = start + k * stride;
            dot += g[i] * y[i];
        }
        for k in 0..axis_len {
            let i = start + k * stride;
            dx[i] = y[i] * (g[i] - dot);
        }
    });
    dx
}

pub(crate) fn layer_norm_backward(
    g: &[f64],
    x: &[f64],
    x_shape: &[usize],
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dim = *x_shape.last().unwrap();
    let rows = x.len() / dim;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let nd = dim as f64;
    for r in 0..rows {
        let base = r * dim;
        let (m, is) = (mean[r], inv_std[r]);
        // xhat = (x - m) * is; dxhat = g * gamma
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..dim {
            let xhat = (x[base + j] - m) * is;
            let dxhat = g[base + j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += g[base + j] * xhat;
            dbeta[j] += g[base + j];
        }
        for j in 0..dim {
            let xhat = (x[base + j] - m) * is;
            let dxhat = g[base + j] * gamma[j];
            dx[base + j] = is * (dxhat - sum_dxhat / nd - xhat * sum_dxhat_xhat / nd);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn cross_entropy_backward(
    g: &[f64],
    probs: &[f64],
    logits_shape: &[usize],
    labels: &[usize],
) -> Vec<f64> {
    let (b, k) = (logits_shape[0], logits_shape[1]);
    let mut dlogits = vec![0.0; b * k];
    for r in 0..b {
        for j in 0..k {
            let indicator = if labels[r] == j { 1.0 } else { 0.0 };
            dlogits[r * k + j] = g[r] * (probs[r * k + j] - indicator);
        }
    }
    dlogits
}
