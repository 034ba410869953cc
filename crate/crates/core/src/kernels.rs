//! Dense math kernels behind the tape ops. Plain loops arranged so the
//! inner dimension is contiguous; fast enough for desk-scale training.

use crate::scalar::Scalar;

/// c (m,n) = a (m,k) * b (k,n)
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c (m,n) = a (m,k) * b^T with b stored (n,k)
pub fn matmul_tb<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// c (k,n) = a^T * b with a stored (m,k), b (m,n)
pub fn matmul_ta<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![E::ZERO; k * n];
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Valid-convolution output extent under the floor rule, `None` when the
/// window does not fit.
pub fn out_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    if input >= window && stride > 0 {
        Some((input - window) / stride + 1)
    } else {
        None
    }
}

/// Unfold one (C,H,W) image into (C*L*L, Ho*Wo) patch columns, stride 1.
pub fn im2col<E: Scalar>(img: &[E], c: usize, h: usize, w: usize, l: usize, cols: &mut [E]) {
    let ho = h - l + 1;
    let wo = w - l + 1;
    debug_assert_eq!(cols.len(), c * l * l * ho * wo);
    let mut row = 0;
    for ch in 0..c {
        for i in 0..l {
            for j in 0..l {
                let base = row * ho * wo;
                for oy in 0..ho {
                    let src = ch * h * w + (oy + i) * w + j;
                    let dst = base + oy * wo;
                    cols[dst..dst + wo].copy_from_slice(&img[src..src + wo]);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of patch-column gradients back onto the (C,H,W) image.
pub fn col2im_add<E: Scalar>(cols: &[E], c: usize, h: usize, w: usize, l: usize, img: &mut [E]) {
    let ho = h - l + 1;
    let wo = w - l + 1;
    let mut row = 0;
    for ch in 0..c {
        for i in 0..l {
            for j in 0..l {
                let base = row * ho * wo;
                for oy in 0..ho {
                    let dst = ch * h * w + (oy + i) * w + j;
                    let src = base + oy * wo;
                    for x in 0..wo {
                        img[dst + x] += cols[src + x];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-wise softmax with max subtraction; rows sum to 1 and entries are
/// clamped into [0,1] so downstream domain checks never trip on rounding.
pub fn softmax_rows<E: Scalar>(data: &[E], rows: usize, k: usize) -> Vec<E> {
    debug_assert_eq!(data.len(), rows * k);
    let mut out = vec![E::ZERO; rows * k];
    for r in 0..rows {
        let row = &data[r * k..(r + 1) * k];
        let orow = &mut out[r * k..(r + 1) * k];
        let mut m = E::neg_infinity();
        for &v in row {
            m = m.maxs(v);
        }
        let mut sum = E::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = (*o / sum).mins(E::ONE).maxs(E::ZERO);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_identity() {
        // [[1,2],[3,4]] * I
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2), a.to_vec());
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // b stored transposed (4,3)
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_tb(&a, &bt, 2, 3, 4), c);
        // a stored transposed (3,2)
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(matmul_ta(&at, &b, 3, 2, 4), c);
    }

    #[test]
    fn extent_floor_rule() {
        assert_eq!(out_extent(30, 5, 2), Some(13));
        assert_eq!(out_extent(11, 5, 2), Some(4));
        assert_eq!(out_extent(5, 5, 2), Some(1));
        assert_eq!(out_extent(4, 5, 2), None);
        assert_eq!(out_extent(14, 7, 3), Some(3));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (c, h, w, l) = (2usize, 5usize, 4usize, 3usize);
        let img: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
        let ho = h - l + 1;
        let wo = w - l + 1;
        let mut cols = vec![0.0; c * l * l * ho * wo];
        im2col(&img, c, h, w, l, &mut cols);
        // <im2col(x), y> == <x, col2im(y)> for random y
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_add(&y, c, h, w, l, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let out = softmax_rows(&[0.0, 0.0, 0.0, 1.0, -2.0, 7.0], 2, 3);
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15);
        for r in 0..2 {
            let s: f64 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
