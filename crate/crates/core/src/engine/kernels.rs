//! Raw slice kernels shared by the tape's forward and backward passes.

use std::cmp::Ordering;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one CHW image into a `(C*k*k) x (Ho*Wo)` patch matrix.
pub(crate) fn im2col<S: Scalar>(input: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { S::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch-matrix gradients into a CHW buffer.
pub(crate) fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, input: &mut [S]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_nn_add<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for q in 0..k {
            let w = a[i * k + q];
            let brow = &b[q * n..(q + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`.
pub(crate) fn gemm_nt_add<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for q in 0..k {
            let brow = &b[q * n..(q + 1) * n];
            out[i * k + q] += dot(arow, brow);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
pub(crate) fn gemm_tn_add<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for q in 0..k {
            let w = a[i * k + q];
            let orow = &mut out[q * n..(q + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four partial sums let the compiler vectorize without reassociating.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Ordering used for top-K selection: larger value first, then lower index.
#[inline]
pub(crate) fn rank_order<S: Scalar>(row: &[S], a: usize, b: usize) -> Ordering {
    row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `row`, ties broken by lower index,
/// returned in ascending index order.
pub(crate) fn top_k_indices<S: Scalar>(row: &[S], k: usize, scratch: &mut Vec<usize>) -> Vec<usize> {
    scratch.clear();
    scratch.extend(0..row.len());
    if k < row.len() {
        scratch.select_nth_unstable_by(k - 1, |&a, &b| rank_order(row, a, b));
    }
    let mut top = scratch[..k].to_vec();
    top.sort_unstable();
    top
}

/// Source-pixel indices and weights for half-pixel-centre bilinear resampling
/// along one axis (edges clamped).
pub(crate) fn bilinear_taps<S: Scalar>(in_len: usize, factor: usize) -> Vec<(usize, usize, S)> {
    let f = S::lit(factor as f64);
    let half = S::lit(0.5);
    (0..in_len * factor)
        .map(|o| {
            let mut src = (S::lit(o as f64) + half) / f - half;
            if src < S::zero() {
                src = S::zero();
            }
            let lo = src.floor().to_usize().unwrap_or(0).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let w = src - S::lit(lo as f64);
            (lo, hi, w)
        })
        .collect()
}
