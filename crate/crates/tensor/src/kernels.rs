//! Shared numeric kernels used by forward and backward passes.

use crate::scalar::Scalar;

/// c += a @ b with a: [m,k], b: [k,n], c: [m,n].
///
/// The k-outer / j-inner loop order keeps the inner loop a contiguous
/// axpy over rows of `b` and `c`, which autovectorizes.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a @ b^T with a: [m,k], b: [n,k], c: [m,n]. Dot-product form.
pub fn matmul_tb_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut dot = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                dot += av * bv;
            }
            c[i * n + j] += dot;
        }
    }
}

pub fn matmul_tb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_tb_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a^T @ b with a: [k,m], b: [k,n], c: [m,n]. Rank-1 update form.
pub fn matmul_ta_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v += a_pi * b_v;
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// da += g @ b^T for the product out = a @ b (a: [m,k], b: [k,n], g: [m,n]).
/// Materializes b^T so the accumulation runs in axpy form with a long
/// contiguous inner loop (the dot form stalls when n is a narrow channel
/// count).
pub fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, da, m, n, k);
}

/// db += a^T @ g for the product out = a @ b. When the output row width n
/// is narrow, accumulate the transposed result with the long k-wide inner
/// loop and fold it back.
pub fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    if n >= 32 {
        matmul_ta_acc(a, g, db, k, m, n);
    } else {
        let mut dbt = vec![T::zero(); n * k];
        matmul_ta_acc(g, a, &mut dbt, n, m, k);
        for r in 0..k {
            for c in 0..n {
                db[r * n + c] += dbt[c * k + r];
            }
        }
    }
}

/// Geometry of a dense 2-D convolution over channels-last [h, w, cin] input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Unfold input patches into a [out_h*out_w, kh*kw*cin] matrix (zero padding).
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.kh * g.kw * g.cin;
    let mut cols = vec![T::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst_base = (oy * ow + ox) * patch;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = dst_base + (ky * g.kw + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Fold a [out_h*out_w, kh*kw*cin] gradient matrix back onto the input grid.
pub fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.kh * g.kw * g.cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let src_base = (oy * ow + ox) * patch;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = src_base + (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        input_grad[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}

/// One bilinear sampling position: two taps per axis with their weights.
/// Coordinates are clamped to the valid grid, so taps always hit the map.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub wy: f64,
    pub wx: f64,
}

/// Taps for sampling at continuous grid coordinate (gy, gx) where integer
/// coordinates sit on pixel centers.
pub fn bilinear_taps(gy: f64, gx: f64, h: usize, w: usize) -> BilinearTaps {
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let y0 = gy.floor() as usize;
    let x0 = gx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    BilinearTaps {
        y0,
        y1,
        x0,
        x1,
        wy: gy - y0 as f64,
        wx: gx - x0 as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let c = matmul(&a, &b, 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let base = matmul(&a, &b, m, k, n);

        let bt = transpose(&b, k, n);
        let via_tb = matmul_tb(&a, &bt, m, k, n);
        for (x, y) in base.iter().zip(via_tb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut via_ta = vec![0.0; m * n];
        matmul_ta_acc(&at, &b, &mut via_ta, m, k, n);
        for (x, y) in base.iter().zip(via_ta.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_geom_strides() {
        let g = ConvGeom {
            h: 128,
            w: 128,
            cin: 3,
            cout: 8,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.out_h(), 64);
        assert_eq!(g.out_w(), 64);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom {
            h: 5,
            w: 4,
            cin: 2,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.h * g.w * g.cin).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut folded = vec![0.0; x.len()];
        col2im_acc(&y, &g, &mut folded);
        let rhs: f64 = x.iter().zip(folded.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }
}
