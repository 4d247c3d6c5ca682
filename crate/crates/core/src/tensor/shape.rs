//! Shape arithmetic: broadcasting with trailing-axis alignment, strides,
//! and odometer iteration used by the elementwise kernels.

/// Number of elements for a shape. The empty shape is a scalar (1 element).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        s[ax] = acc;
        acc *= shape[ax];
    }
    s
}

/// Broadcast two shapes with trailing-axis alignment.
/// Returns `None` when some aligned pair of extents disagrees and neither is 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for ax in 0..ndim {
        let ea = dim_from_trailing(a, ndim, ax);
        let eb = dim_from_trailing(b, ndim, ax);
        out[ax] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_trailing(shape: &[usize], ndim: usize, ax: usize) -> usize {
    let pad = ndim - shape.len();
    if ax < pad {
        1
    } else {
        shape[ax - pad]
    }
}

/// Strides of `shape` viewed in the coordinate space of `out_shape`
/// (zero stride on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let own = strides(shape);
    let pad = ndim - shape.len();
    let mut s = vec![0; ndim];
    for ax in 0..ndim {
        if ax >= pad && shape[ax - pad] != 1 {
            s[ax] = own[ax - pad];
        }
    }
    s
}

/// Visit every flat index of `out_shape` together with the flat indices of two
/// broadcast operands. Avoids div/mod by running an odometer.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; ndim];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ia, ib);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
}

/// Single-operand variant of [`for_each_broadcast2`].
pub fn for_each_broadcast1(
    out_shape: &[usize],
    a_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    for_each_broadcast2(out_shape, a_shape, a_shape, |flat, ia, _| f(flat, ia));
}

/// Sum `grad` (laid out per `out_shape`) back down to `in_shape`,
/// inverting a broadcast.
pub fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel(in_shape)];
    for_each_broadcast1(out_shape, in_shape, |flat, i_in| acc[i_in] += grad[flat]);
    acc
}
