//! Orthonormal 2-D DCT/IDCT and binary coefficient masks for
//! frequency-constrained perturbations.
//!
//! The transform is the separable type-II DCT with orthonormal scaling, so
//! the inverse is the transpose and Parseval holds exactly up to rounding.
//! Coefficient (0,0) is DC; low-pass masks keep the top-left corner block,
//! high-pass masks keep the bottom-right.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Orthonormal DCT-II basis matrix: `m[j][i] = s_j cos(pi (2i+1) j / 2n)`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for j in 0..n {
        let s = if j == 0 { norm0 } else { norm };
        for i in 0..n {
            m[j * n + i] =
                s * (std::f64::consts::PI * (2 * i + 1) as f64 * j as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// out[r,c] = sum_k a[r,k] b[k,c], all matrices h×w-compatible and row-major.
fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Forward orthonormal 2-D DCT of an H×W image: `C_H · X · C_Wᵀ`.
pub fn dct2d(x: &Tensor) -> Tensor {
    let (h, w) = plane_dims(x, "dct2d");
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    let tmp = mat_mul(&ch, x.data(), h, h, w); // C_H · X
    let out = mat_mul(&tmp, &transpose(&cw, w, w), h, w, w); // · C_Wᵀ
    Tensor::from_vec(vec![h, w], out)
}

/// Inverse of [`dct2d`]: `C_Hᵀ · X · C_W`.
pub fn idct2d(x: &Tensor) -> Tensor {
    let (h, w) = plane_dims(x, "idct2d");
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    let tmp = mat_mul(&transpose(&ch, h, h), x.data(), h, h, w);
    let out = mat_mul(&tmp, &cw, h, w, w);
    Tensor::from_vec(vec![h, w], out)
}

fn plane_dims(x: &Tensor, op: &str) -> (usize, usize) {
    assert_eq!(x.shape().len(), 2, "{op}: input must be H×W, got {:?}", x.shape());
    let (h, w) = (x.shape()[0], x.shape()[1]);
    assert!(h >= 1 && w >= 1, "{op}: empty plane {:?}", x.shape());
    (h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Full,
    Low,
    High,
    Custom,
}

/// Binary mask over the DCT coefficient grid.
#[derive(Debug, Clone)]
pub struct FrequencyMask {
    pub height: usize,
    pub width: usize,
    pub mode: MaskMode,
    /// Corner extent for low/high modes; 0 for full/custom.
    pub corner: usize,
    grid: Vec<bool>,
}

impl FrequencyMask {
    /// Build a mask. `low` keeps the f×f top-left (low-frequency) corner,
    /// `high` keeps the f×f bottom-right corner, `full` keeps everything.
    pub fn new(height: usize, width: usize, mode: MaskMode, f: usize) -> FrequencyMask {
        assert!(
            f <= height.min(width),
            "frequency mask: corner {f} exceeds min extent of {height}x{width}"
        );
        let mut grid = vec![false; height * width];
        match mode {
            MaskMode::Full => grid.iter_mut().for_each(|g| *g = true),
            MaskMode::Low => {
                for r in 0..f {
                    for c in 0..f {
                        grid[r * width + c] = true;
                    }
                }
            }
            MaskMode::High => {
                for r in height - f..height {
                    for c in width - f..width {
                        grid[r * width + c] = true;
                    }
                }
            }
            MaskMode::Custom => {}
        }
        FrequencyMask { height, width, mode, corner: f, grid }
    }

    pub fn custom(height: usize, width: usize, grid: Vec<bool>) -> FrequencyMask {
        assert_eq!(grid.len(), height * width, "frequency mask: grid size mismatch");
        FrequencyMask { height, width, mode: MaskMode::Custom, corner: 0, grid }
    }

    /// Desk-scale default corner size, scaled proportionally from the
    /// reference 32-of-224 low / 192-of-224 high split.
    pub fn default_corner(mode: MaskMode, extent: usize) -> usize {
        match mode {
            MaskMode::Low => ((32.0 / 224.0) * extent as f64).round() as usize,
            MaskMode::High => ((192.0 / 224.0) * extent as f64).round() as usize,
            MaskMode::Full | MaskMode::Custom => 0,
        }
    }

    /// Mask with the proportional default corner for a square H×H grid.
    pub fn with_default_corner(mode: MaskMode, extent: usize) -> FrequencyMask {
        FrequencyMask::new(extent, extent, mode, Self::default_corner(mode, extent))
    }

    pub fn ones(&self) -> usize {
        self.grid.iter().filter(|&&g| g).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.width + col]
    }

    /// Complement of the union of the given masks (same extents required).
    pub fn complement_of(masks: &[&FrequencyMask]) -> FrequencyMask {
        let (h, w) = (masks[0].height, masks[0].width);
        let mut grid = vec![true; h * w];
        for m in masks {
            assert_eq!((m.height, m.width), (h, w), "frequency mask: extent mismatch");
            for (g, &keep) in grid.iter_mut().zip(m.grid.iter()) {
                *g &= !keep;
            }
        }
        FrequencyMask { height: h, width: w, mode: MaskMode::Custom, corner: 0, grid }
    }

    pub fn union(&self, other: &FrequencyMask) -> FrequencyMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let grid = self.grid.iter().zip(other.grid.iter()).map(|(a, b)| a | b).collect();
        FrequencyMask { height: self.height, width: self.width, mode: MaskMode::Custom, corner: 0, grid }
    }

    pub fn is_disjoint(&self, other: &FrequencyMask) -> bool {
        self.grid.iter().zip(other.grid.iter()).all(|(a, b)| !(a & b))
    }

    /// Binary (P5) PGM rendering: kept coefficients white, filtered black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.grid.iter().map(|&g| if g { 255u8 } else { 0 }));
        out
    }
}

/// Filter one H×W plane through the mask in the DCT domain:
/// `IDCT(DCT(delta) ⊙ M)`.
pub fn filter_plane(delta: &Tensor, mask: &FrequencyMask) -> Tensor {
    let (h, w) = plane_dims(delta, "filter_plane");
    assert_eq!(
        (h, w),
        (mask.height, mask.width),
        "filter_plane: image {h}x{w} vs mask {}x{}",
        mask.height,
        mask.width
    );
    let coeff = dct2d(delta);
    let masked: Vec<f64> = coeff
        .data()
        .iter()
        .zip(mask.grid.iter())
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    idct2d(&Tensor::from_vec(vec![h, w], masked))
}

/// Filter a C×H×W perturbation channel by channel.
pub fn filter_channels(delta: &Tensor, mask: &FrequencyMask) -> Tensor {
    let shape = delta.shape().to_vec();
    assert_eq!(shape.len(), 3, "filter_channels: input must be C×H×W, got {shape:?}");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(delta.numel());
    for ch in 0..c {
        let plane = Tensor::from_vec(
            vec![h, w],
            delta.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        );
        out.extend_from_slice(filter_plane(&plane, mask).data());
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(N²) summation oracle for the orthonormal DCT-II.
    fn brute_force_dct2d(x: &Tensor) -> Tensor {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; h * w];
        let scale = |j: usize, n: usize| -> f64 {
            if j == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        for u in 0..h {
            for v in 0..w {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x.data()[i * w + j]
                            * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64
                                / (2 * h) as f64)
                                .cos()
                            * (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64
                                / (2 * w) as f64)
                                .cos();
                    }
                }
                out[u * w + v] = acc * scale(u, h) * scale(v, w);
            }
        }
        Tensor::from_vec(vec![h, w], out)
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn constant_image_is_pure_dc() {
        let (h, w, c) = (6, 9, 0.37);
        let x = Tensor::full(vec![h, w], c);
        let f = dct2d(&x);
        let dc = c * ((h * w) as f64).sqrt();
        assert!((f.data()[0] - dc).abs() < 1e-12);
        for &v in &f.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
        // inverse of the constant-image case
        let mut coeffs = vec![0.0; h * w];
        coeffs[0] = dc;
        let back = idct2d(&Tensor::from_vec(vec![h, w], coeffs));
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn two_point_orthonormal_values() {
        // 1-D [1, 0] as a 1x2 plane: both coefficients 1/sqrt(2)
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
        let f = dct2d(&x);
        assert!((f.data()[0] - 0.70711).abs() < 1e-5);
        assert!((f.data()[1] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn parseval_and_round_trip() {
        let x = Tensor::from_vec(vec![16, 16], pseudo_random(256, 99));
        let f = dct2d(&x);
        let n2 = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n2(&x) - n2(&f)).abs() < 1e-10);
        assert!(idct2d(&f).max_abs_diff(&x) < 1e-10);
        assert!(dct2d(&idct2d(&x)).max_abs_diff(&x) < 1e-10);
        let zeros = Tensor::zeros(vec![4, 4]);
        assert_eq!(idct2d(&zeros).data(), Tensor::zeros(vec![4, 4]).data());
    }

    #[test]
    fn matches_brute_force_on_small_sizes() {
        for (h, w) in [(1, 1), (2, 3), (4, 4), (7, 5), (16, 16)] {
            let x = Tensor::from_vec(vec![h, w], pseudo_random(h * w, (h * 31 + w) as u64));
            let fast = dct2d(&x);
            let slow = brute_force_dct2d(&x);
            assert!(fast.max_abs_diff(&slow) < 1e-8, "{h}x{w}");
        }
    }

    #[test]
    fn paper_scale_mask_counts() {
        let low = FrequencyMask::new(224, 224, MaskMode::Low, 32);
        assert_eq!(low.ones(), 1024);
        assert!(low.get(0, 0) && low.get(31, 31) && !low.get(32, 0));
        let high = FrequencyMask::new(224, 224, MaskMode::High, 192);
        assert_eq!(high.ones(), 36864);
        assert!(high.get(223, 223) && high.get(32, 32) && !high.get(31, 223));
        assert!(low.is_disjoint(&high));
        // an excluded mid region exists
        assert!(low.ones() + high.ones() < 224 * 224);
        let full = FrequencyMask::new(224, 224, MaskMode::Full, 0);
        assert_eq!(full.ones(), 224 * 224);
    }

    #[test]
    fn default_corners_scale_proportionally() {
        assert_eq!(FrequencyMask::default_corner(MaskMode::Low, 224), 32);
        assert_eq!(FrequencyMask::default_corner(MaskMode::High, 224), 192);
        assert_eq!(FrequencyMask::default_corner(MaskMode::Low, 32), 5);
        assert_eq!(FrequencyMask::default_corner(MaskMode::High, 32), 27);
    }

    #[test]
    fn disjoint_masks_filter_linearly() {
        let (h, w) = (12, 12);
        let delta = Tensor::from_vec(vec![h, w], pseudo_random(h * w, 5));
        let low = FrequencyMask::new(h, w, MaskMode::Low, 3);
        let high = FrequencyMask::new(h, w, MaskMode::High, 7);
        let mid = FrequencyMask::complement_of(&[&low, &high]);
        assert!(low.is_disjoint(&high) && low.is_disjoint(&mid) && high.is_disjoint(&mid));
        // partition reassembles the unfiltered perturbation
        let sum = filter_plane(&delta, &low)
            .zip_map(&filter_plane(&delta, &high), |a, b| a + b)
            .zip_map(&filter_plane(&delta, &mid), |a, b| a + b);
        assert!(sum.max_abs_diff(&delta) < 1e-10);
        // union of disjoint masks filters the same as the sum of parts
        let union = low.union(&high);
        let sum2 =
            filter_plane(&delta, &low).zip_map(&filter_plane(&delta, &high), |a, b| a + b);
        assert!(filter_plane(&delta, &union).max_abs_diff(&sum2) < 1e-10);
    }

    #[test]
    fn pgm_rendering() {
        let m = FrequencyMask::new(2, 3, MaskMode::Low, 1);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[255, 0, 0, 0, 0, 0]);
    }
}
