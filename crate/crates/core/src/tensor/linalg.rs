//! Matrix multiplication and 2-D convolution, forward and backward.

use super::shape::numel;
use super::{Op, Var};

/// C[m,n] += A[m,k] · B[k,n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aip * bpj;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += api * bpj;
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    batch_shape: Vec<usize>,
}

fn matmul_dims(a_shape: &[usize], b_shape: &[usize]) -> MatDims {
    assert!(
        a_shape.len() >= 2 && b_shape.len() >= 2,
        "matmul: operands must be at least 2-D, got {a_shape:?} and {b_shape:?}"
    );
    let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    assert_eq!(
        ka, kb,
        "matmul: inner dimensions disagree, {a_shape:?} x {b_shape:?}"
    );
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let (batch_shape, a_batched, b_batched) = if a_batch == b_batch {
        (a_batch.to_vec(), !a_batch.is_empty(), !b_batch.is_empty())
    } else if b_batch.is_empty() {
        (a_batch.to_vec(), true, false)
    } else if a_batch.is_empty() {
        (b_batch.to_vec(), false, true)
    } else {
        panic!("matmul: batch dimensions disagree, {a_shape:?} x {b_shape:?}");
    };
    MatDims { batch: numel(&batch_shape), m, k: ka, n, a_batched, b_batched, batch_shape }
}

pub(crate) fn matmul_forward(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let d = matmul_dims(a_shape, b_shape);
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for t in 0..d.batch {
        let a_off = if d.a_batched { t * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { t * d.k * d.n } else { 0 };
        mm_nn(
            &a[a_off..a_off + d.m * d.k],
            &b[b_off..b_off + d.k * d.n],
            &mut out[t * d.m * d.n..(t + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    let mut out_shape = d.batch_shape;
    out_shape.push(d.m);
    out_shape.push(d.n);
    (out, out_shape)
}

/// dA = G·Bᵀ, dB = Aᵀ·G, with a sum over batch for an unbatched operand.
pub(crate) fn matmul_backward(
    g: &[f64],
    _out_shape: &[usize],
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let d = matmul_dims(a_shape, b_shape);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for t in 0..d.batch {
        let a_off = if d.a_batched { t * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { t * d.k * d.n } else { 0 };
        let g_t = &g[t * d.m * d.n..(t + 1) * d.m * d.n];
        mm_nt(g_t, &b[b_off..b_off + d.k * d.n], &mut da[a_off..a_off + d.m * d.k], d.m, d.n, d.k);
        mm_tn(&a[a_off..a_off + d.m * d.k], g_t, &mut db[b_off..b_off + d.k * d.n], d.k, d.m, d.n);
    }
    (da, db)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv2d_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> ConvDims {
    assert_eq!(x_shape.len(), 4, "conv2d: input must be B×C×H×W, got {x_shape:?}");
    assert_eq!(w_shape.len(), 4, "conv2d: kernel must be O×C×kh×kw, got {w_shape:?}");
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, ck, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    assert_eq!(
        c_in, ck,
        "conv2d: input channels {c_in} do not match kernel channels {ck} ({x_shape:?} x {w_shape:?})"
    );
    assert!(
        h + 2 * padding >= kh && w + 2 * padding >= kw,
        "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * padding,
        w + 2 * padding
    );
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    ConvDims { batch, c_in, h, w, c_out, kh, kw, h_out, w_out }
}

/// Cross-correlation, NCHW layout.
pub(crate) fn conv2d_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let d = conv2d_dims(x_shape, w_shape, stride, padding);
    let mut out = vec![0.0; d.batch * d.c_out * d.h_out * d.w_out];
    let x_plane = d.h * d.w;
    let k_plane = d.kh * d.kw;
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let out_base = (b * d.c_out + o) * d.h_out * d.w_out;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let mut acc = 0.0;
                    for c in 0..d.c_in {
                        let xc = (b * d.c_in + c) * x_plane;
                        let wc = (o * d.c_in + c) * k_plane;
                        for ki in 0..d.kh {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row = xc + ih as usize * d.w;
                            for kj in 0..d.kw {
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += x[row + iw as usize] * w[wc + ki * d.kw + kj];
                            }
                        }
                    }
                    out[out_base + oh * d.w_out + ow] = acc;
                }
            }
        }
    }
    (out, vec![d.batch, d.c_out, d.h_out, d.w_out])
}

pub(crate) fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = conv2d_dims(x_shape, w_shape, stride, padding);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let x_plane = d.h * d.w;
    let k_plane = d.kh * d.kw;
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let out_base = (b * d.c_out + o) * d.h_out * d.w_out;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let gv = g[out_base + oh * d.w_out + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..d.c_in {
                        let xc = (b * d.c_in + c) * x_plane;
                        let wc = (o * d.c_in + c) * k_plane;
                        for ki in 0..d.kh {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row = xc + ih as usize * d.w;
                            for kj in 0..d.kw {
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                dx[row + iw as usize] += gv * w[wc + ki * d.kw + kj];
                                dw[wc + ki * d.kw + kj] += gv * x[row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

impl Var {
    /// Matrix product. Supports equal leading batch dimensions or one
    /// unbatched 2-D operand shared across the batch.
    pub fn matmul(&self, rhs: &Var) -> Var {
        assert!(self.same_tape(rhs), "matmul: operands recorded on different tapes");
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        let (out, out_shape) = matmul_forward(&na.data, &na.shape, &nb.data, &nb.shape);
        let needs = na.needs_grad || nb.needs_grad;
        drop(inner);
        self.tape.record(out, out_shape, Op::MatMul { a: self.id, b: rhs.id }, needs)
    }

    /// 2-D cross-correlation of a B×C×H×W input with an O×C×kh×kw kernel.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Var {
        assert!(self.same_tape(kernel), "conv2d: operands recorded on different tapes");
        let inner = self.tape.inner.borrow();
        let (nx, nw) = (&inner.nodes[self.id], &inner.nodes[kernel.id]);
        let (out, out_shape) =
            conv2d_forward(&nx.data, &nx.shape, &nw.data, &nw.shape, stride, padding);
        let needs = nx.needs_grad || nw.needs_grad;
        drop(inner);
        self.tape.record(
            out,
            out_shape,
            Op::Conv2d { x: self.id, w: kernel.id, stride, padding },
            needs,
        )
    }
}
