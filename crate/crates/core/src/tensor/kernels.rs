//! Raw numeric kernels on flat slices. No graph bookkeeping here.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the stride layout, so
    // every index touched by dgemm lies inside the borrowed buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window layout shared by convolution and its transpose.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `img` (`channels x height x width`) into a
/// `(channels*kh*kw) x (out_h*out_w)` matrix; out-of-bounds taps read zero.
pub(crate) fn im2col(img: &[f64], w: &Window, cols: &mut [f64]) {
    let ncols = w.col_cols();
    for c in 0..w.channels {
        let plane = &img[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..w.kernel_h {
            for kj in 0..w.kernel_w {
                let row = (c * w.kernel_h + ki) * w.kernel_w + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..w.out_h {
                    let ii = (oi * w.stride + ki) as isize - w.pad as isize;
                    let dst_row = &mut dst[oi * w.out_w..(oi + 1) * w.out_w];
                    if ii < 0 || ii >= w.height as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * w.width..(ii as usize + 1) * w.width];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * w.stride + kj) as isize - w.pad as isize;
                        *d = if jj < 0 || jj >= w.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
pub(crate) fn col2im(cols: &[f64], w: &Window, img: &mut [f64]) {
    let ncols = w.col_cols();
    for c in 0..w.channels {
        let plane = &mut img[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..w.kernel_h {
            for kj in 0..w.kernel_w {
                let row = (c * w.kernel_h + ki) * w.kernel_w + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..w.out_h {
                    let ii = (oi * w.stride + ki) as isize - w.pad as isize;
                    if ii < 0 || ii >= w.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w.width..(ii as usize + 1) * w.width];
                    for oj in 0..w.out_w {
                        let jj = (oj * w.stride + kj) as isize - w.pad as isize;
                        if jj >= 0 && (jj as usize) < w.width {
                            dst[jj as usize] += src[oi * w.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes aligned on trailing dimensions.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
