//! Elementwise, reduction, and shape primitives on [`Var`].

use super::shape::{
    broadcast_shapes, for_each_broadcast1, for_each_broadcast2, numel, reduce_to_shape, strides,
};
use super::{Op, TapeInner, Tensor, Var};
use std::ops::Range;

impl Var {
    fn binary(&self, rhs: &Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert!(self.same_tape(rhs), "{name}: operands recorded on different tapes");
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        let out_shape = broadcast_shapes(&na.shape, &nb.shape).unwrap_or_else(|| {
            panic!("{name}: incompatible shapes {:?} vs {:?}", na.shape, nb.shape)
        });
        let mut out = vec![0.0; numel(&out_shape)];
        for_each_broadcast2(&out_shape, &na.shape, &nb.shape, |o, ia, ib| {
            out[o] = f(na.data[ia], nb.data[ib]);
        });
        let needs = na.needs_grad || nb.needs_grad;
        drop(inner);
        self.tape.record(out, out_shape, op, needs)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op, differentiable: bool) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<f64> = node.data.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad && differentiable;
        drop(inner);
        self.tape.record(out, shape, op, needs)
    }

    pub fn add(&self, rhs: &Var) -> Var {
        self.binary(rhs, "add", |a, b| a + b, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul { a: self.id, b: rhs.id })
    }

    pub fn div(&self, rhs: &Var) -> Var {
        self.binary(rhs, "div", |a, b| a / b, Op::Div { a: self.id, b: rhs.id })
    }

    pub fn neg(&self) -> Var {
        self.unary(|v| -v, Op::Neg { a: self.id }, true)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, Op::Exp { a: self.id }, true)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, Op::Ln { a: self.id }, true)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, Op::Sqrt { a: self.id }, true)
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, Op::Tanh { a: self.id }, true)
    }

    pub fn relu(&self) -> Var {
        self.unary(|v| v.max(0.0), Op::Relu { a: self.id }, true)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { a: self.id }, true)
    }

    pub fn powf(&self, exponent: f64) -> Var {
        self.unary(|v| v.powf(exponent), Op::Powf { a: self.id, exponent }, true)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|v| v + c, Op::AddScalar { a: self.id }, true)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(|v| v * c, Op::MulScalar { a: self.id, c }, true)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, Op::Abs { a: self.id }, true)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        self.unary(|v| v.clamp(lo, hi), Op::Clamp { a: self.id, lo, hi }, true)
    }

    /// Componentwise sign with sign(0) = 0. Propagates zero gradient.
    pub fn sign(&self) -> Var {
        self.unary(super::sign_of, Op::Constant, false)
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Var {
        let (out, out_shape, _count) = self.reduce_sum(axes, keepdims, "sum");
        let needs = self.needs_grad_flag();
        self.tape.record(out, out_shape, Op::SumAxes { a: self.id }, needs)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdims: bool) -> Var {
        let (mut out, out_shape, count) = self.reduce_sum(axes, keepdims, "mean");
        for v in out.iter_mut() {
            *v /= count as f64;
        }
        let needs = self.needs_grad_flag();
        self.tape.record(out, out_shape, Op::MeanAxes { a: self.id, count }, needs)
    }

    pub fn sum_all(&self) -> Var {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Var {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false)
    }

    fn needs_grad_flag(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn reduce_sum(&self, axes: &[usize], keepdims: bool, name: &str) -> (Vec<f64>, Vec<usize>, usize) {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let in_shape = &node.shape;
        for &ax in axes {
            assert!(ax < in_shape.len(), "{name}: axis {ax} out of range for {in_shape:?}");
        }
        fn shape_after(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
            let mut out = Vec::new();
            for (ax, &e) in shape.iter().enumerate() {
                if axes.contains(&ax) {
                    if keepdims {
                        out.push(1);
                    }
                } else {
                    out.push(e);
                }
            }
            out
        }
        let kept_shape = shape_after(in_shape, axes, true);
        let out_shape = shape_after(in_shape, axes, keepdims);
        let mut out = vec![0.0; numel(&kept_shape)];
        // accumulate input into the kept-dims layout (same flat order as out_shape)
        for_each_broadcast1(in_shape, &kept_shape, |flat_in, flat_out| {
            out[flat_out] += node.data[flat_in];
        });
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        (out, out_shape, count)
    }

    /// Maximum along one axis (first index wins ties). Returns the max values
    /// and the flat argmax indices into the input. Gradient flows only to the
    /// argmax positions.
    pub fn max_axis(&self, axis: usize, keepdims: bool) -> (Var, Vec<usize>) {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let in_shape = node.shape.clone();
        assert!(axis < in_shape.len(), "max_axis: axis {axis} out of range for {in_shape:?}");
        let axis_len = in_shape[axis];
        assert!(axis_len > 0, "max_axis: empty axis {axis} in {in_shape:?}");
        let inner_stride: usize = in_shape[axis + 1..].iter().product();
        let outer: usize = in_shape[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * inner_stride);
        let mut argmax = Vec::with_capacity(outer * inner_stride);
        for o in 0..outer {
            for i in 0..inner_stride {
                let base = o * axis_len * inner_stride + i;
                let (mut best, mut best_at) = (node.data[base], base);
                for k in 1..axis_len {
                    let idx = base + k * inner_stride;
                    if node.data[idx] > best {
                        best = node.data[idx];
                        best_at = idx;
                    }
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
        let mut out_shape: Vec<usize> = Vec::new();
        for (ax, &e) in in_shape.iter().enumerate() {
            if ax == axis {
                if keepdims {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(e);
            }
        }
        let needs = node.needs_grad;
        drop(inner);
        let v = self.tape.record(
            out,
            out_shape,
            Op::MaxAxis { a: self.id, argmax: argmax.clone() },
            needs,
        );
        (v, argmax)
    }

    // ── shape ops ─────────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(
            numel(new_shape),
            node.data.len(),
            "reshape: {:?} -> {:?} changes element count",
            node.shape,
            new_shape
        );
        let data = node.data.as_ref().clone();
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(data, new_shape.to_vec(), Op::Reshape { a: self.id }, needs)
    }

    /// Reorder axes; materializes the permuted data.
    pub fn permute(&self, perm: &[usize]) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let in_shape = &node.shape;
        assert_eq!(perm.len(), in_shape.len(), "permute: {perm:?} does not fit {in_shape:?}");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "permute: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out = permute_data(&node.data, in_shape, perm);
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(out, out_shape, Op::Permute { a: self.id, perm: perm.to_vec() }, needs)
    }

    /// Swap two axes.
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Var {
        let ndim = self.shape().len();
        let mut perm: Vec<usize> = (0..ndim).collect();
        perm.swap(ax0, ax1);
        self.permute(&perm)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let ok = broadcast_shapes(&node.shape, target).map(|s| s == target).unwrap_or(false);
        assert!(ok, "broadcast_to: cannot broadcast {:?} to {:?}", node.shape, target);
        let mut out = vec![0.0; numel(target)];
        for_each_broadcast1(target, &node.shape, |o, i| out[o] = node.data[i]);
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(out, target.to_vec(), Op::BroadcastTo { a: self.id }, needs)
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = &parts[0];
        for p in parts {
            assert!(first.same_tape(p), "concat: operands recorded on different tapes");
        }
        let inner = first.tape.inner.borrow();
        let base_shape = inner.nodes[first.id].shape.clone();
        assert!(axis < base_shape.len(), "concat: axis {axis} out of range for {base_shape:?}");
        let mut axis_total = 0;
        for p in parts {
            let s = &inner.nodes[p.id].shape;
            assert_eq!(s.len(), base_shape.len(), "concat: rank mismatch {s:?} vs {base_shape:?}");
            for (ax, (&ea, &eb)) in s.iter().zip(base_shape.iter()).enumerate() {
                assert!(
                    ax == axis || ea == eb,
                    "concat: shapes {s:?} vs {base_shape:?} differ off axis {axis}"
                );
            }
            axis_total += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner_stride: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let node = &inner.nodes[p.id];
            let len = node.shape[axis];
            for o in 0..outer {
                let src = &node.data[o * len * inner_stride..(o + 1) * len * inner_stride];
                let dst_start = (o * axis_total + offset) * inner_stride;
                out[dst_start..dst_start + len * inner_stride].copy_from_slice(src);
            }
            offset += len;
        }
        let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
        drop(inner);
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.record(out, out_shape, Op::Concat { inputs: ids, axis }, needs)
    }

    /// Rectangular sub-block, one half-open range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Var {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let in_shape = &node.shape;
        assert_eq!(ranges.len(), in_shape.len(), "slice: {ranges:?} does not fit {in_shape:?}");
        for (ax, r) in ranges.iter().enumerate() {
            assert!(
                r.start <= r.end && r.end <= in_shape[ax],
                "slice: range {r:?} out of bounds on axis {ax} of {in_shape:?}"
            );
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let in_strides = strides(in_shape);
        let mut out = Vec::with_capacity(numel(&out_shape));
        copy_block(&node.data, &in_strides, ranges, 0, 0, &mut out);
        let needs = node.needs_grad;
        drop(inner);
        self.tape.record(out, out_shape, Op::Slice { a: self.id, ranges: ranges.to_vec() }, needs)
    }
}

fn copy_block(
    data: &[f64],
    in_strides: &[usize],
    ranges: &[Range<usize>],
    axis: usize,
    base: usize,
    out: &mut Vec<f64>,
) {
    if axis == ranges.len() {
        out.push(data[base]);
        return;
    }
    if axis == ranges.len() - 1 {
        // contiguous innermost run
        let start = base + ranges[axis].start * in_strides[axis];
        out.extend_from_slice(&data[start..start + (ranges[axis].end - ranges[axis].start)]);
        return;
    }
    for i in ranges[axis].clone() {
        copy_block(data, in_strides, ranges, axis + 1, base + i * in_strides[axis], out);
    }
}

pub(crate) fn permute_data(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    // stride of output axis ax in the input buffer
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let mut out = vec![0.0; total];
    if total == 0 {
        return out;
    }
    let ndim = out_shape.len();
    if ndim == 0 {
        out[0] = data[0];
        return out;
    }
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for item in out.iter_mut() {
        *item = data[src];
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            src += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= walk[ax] * out_shape[ax];
        }
    }
    out
}

pub(crate) fn permute_backward(
    g: &[f64],
    out_shape: &[usize],
    _in_shape: &[usize],
    perm: &[usize],
) -> Vec<f64> {
    let mut inverse = vec![0usize; perm.len()];
    for (ax, &p) in perm.iter().enumerate() {
        inverse[p] = ax;
    }
    permute_data(g, out_shape, &inverse)
}

pub(crate) fn mul_backward(
    g: &[f64],
    out_shape: &[usize],
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut da_full = vec![0.0; g.len()];
    let mut db_full = vec![0.0; g.len()];
    for_each_broadcast2(out_shape, a_shape, b_shape, |o, ia, ib| {
        da_full[o] = g[o] * b[ib];
        db_full[o] = g[o] * a[ia];
    });
    (
        reduce_to_shape(&da_full, out_shape, a_shape),
        reduce_to_shape(&db_full, out_shape, b_shape),
    )
}

pub(crate) fn div_backward(
    g: &[f64],
    out_shape: &[usize],
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut da_full = vec![0.0; g.len()];
    let mut db_full = vec![0.0; g.len()];
    for_each_broadcast2(out_shape, a_shape, b_shape, |o, ia, ib| {
        da_full[o] = g[o] / b[ib];
        db_full[o] = -g[o] * a[ia] / (b[ib] * b[ib]);
    });
    (
        reduce_to_shape(&da_full, out_shape, a_shape),
        reduce_to_shape(&db_full, out_shape, b_shape),
    )
}

/// Backward of a sum/mean reduction: spread `g` (shaped like the kept-dims
/// reduction of `in_shape`) over `da`, scaled.
pub(crate) fn spread_reduced(
    g: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
    da: &mut [f64],
    scale: f64,
) {
    // out_shape may have dropped axes; rebuild the keepdims layout, which has
    // the same flat order, then broadcast.
    let kept: Vec<usize> = if out_shape.len() == in_shape.len() {
        out_shape.to_vec()
    } else {
        // reconstruct by matching trailing products
        let mut kept = vec![1; in_shape.len()];
        let mut it = out_shape.iter().rev();
        let mut pending = it.next().copied();
        for ax in (0..in_shape.len()).rev() {
            if let Some(e) = pending {
                if in_shape[ax] == e {
                    kept[ax] = e;
                    pending = it.next().copied();
                }
            }
        }
        kept
    };
    for_each_broadcast1(in_shape, &kept, |flat_in, flat_g| {
        da[flat_in] += g[flat_g] * scale;
    });
}

pub(crate) fn concat_backward(
    g: &[f64],
    out_shape: &[usize],
    axis: usize,
    inputs: &[usize],
    inner: &TapeInner,
) -> Vec<(usize, Vec<f64>)> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner_stride: usize = out_shape[axis + 1..].iter().product();
    let axis_total = out_shape[axis];
    let mut parts = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for &idx in inputs {
        let len = inner.nodes[idx].shape[axis];
        let mut da = vec![0.0; inner.nodes[idx].data.len()];
        for o in 0..outer {
            let src_start = (o * axis_total + offset) * inner_stride;
            let dst_start = o * len * inner_stride;
            da[dst_start..dst_start + len * inner_stride]
                .copy_from_slice(&g[src_start..src_start + len * inner_stride]);
        }
        offset += len;
        parts.push((idx, da));
    }
    parts
}

pub(crate) fn slice_backward(g: &[f64], in_shape: &[usize], ranges: &[Range<usize>]) -> Vec<f64> {
    let mut da = vec![0.0; numel(in_shape)];
    let in_strides = strides(in_shape);
    let mut cursor = 0usize;
    scatter_block(g, &mut da, &in_strides, ranges, 0, 0, &mut cursor);
    da
}

fn scatter_block(
    g: &[f64],
    da: &mut [f64],
    in_strides: &[usize],
    ranges: &[Range<usize>],
    axis: usize,
    base: usize,
    cursor: &mut usize,
) {
    if axis == ranges.len() {
        da[base] += g[*cursor];
        *cursor += 1;
        return;
    }
    if axis == ranges.len() - 1 {
        let start = base + ranges[axis].start * in_strides[axis];
        let len = ranges[axis].end - ranges[axis].start;
        for i in 0..len {
            da[start + i] += g[*cursor + i];
        }
        *cursor += len;
        return;
    }
    for i in ranges[axis].clone() {
        scatter_block(g, da, in_strides, ranges, axis + 1, base + i * in_strides[axis], cursor);
    }
}

/// Elementwise helpers on plain tensors, used by attack inner loops that run
/// outside any tape.
impl Tensor {
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "zip_map: shape mismatch");
        Tensor::from_vec(
            self.shape().to_vec(),
            self.data().iter().zip(other.data().iter()).map(|(&a, &b)| f(a, b)).collect(),
        )
    }
}
