//! Strided 1-D convolution via chunked im2col + GEMM.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::{Scalar, Tape, Var};

/// Upper bound on the im2col buffer, in elements.
const COLS_BUDGET: usize = 1 << 21;

/// Output length of a convolution with symmetric `(kernel - 1) / 2` padding.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (len + 2 * pad - kernel) / stride + 1
}

fn chunk_len(cin: usize, kernel: usize) -> usize {
    (COLS_BUDGET / (cin * kernel).max(1)).max(1)
}

/// Valid output positions `t` in `[t0, t1)` for which `t*stride + j - pad`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(
    t0: usize,
    t1: usize,
    j: usize,
    stride: usize,
    pad: usize,
    len: usize,
) -> (usize, usize) {
    // lower: t*stride + j >= pad
    let lo = if j >= pad {
        0
    } else {
        (pad - j).div_ceil(stride)
    };
    // upper: t*stride + j - pad < len  <=>  t*stride < len + pad - j
    let hi = if len + pad > j {
        (len + pad - j).div_ceil(stride)
    } else {
        0
    };
    (lo.max(t0), hi.min(t1).max(lo.max(t0)))
}

fn im2col<F: Scalar>(
    x: ArrayView2<F>,
    kernel: usize,
    stride: usize,
    t0: usize,
    t1: usize,
    cols: &mut Array2<F>,
) {
    let (cin, len) = x.dim();
    let pad = (kernel - 1) / 2;
    cols.fill(F::zero());
    for ci in 0..cin {
        let xrow = x.row(ci);
        let xs = xrow.as_slice().expect("contiguous input row");
        for j in 0..kernel {
            let (lo, hi) = valid_range(t0, t1, j, stride, pad, len);
            if lo == hi {
                continue;
            }
            let mut crow = cols.row_mut(ci * kernel + j);
            let cs = crow.as_slice_mut().expect("contiguous cols row");
            if stride == 1 {
                let src = lo + j - pad;
                cs[lo - t0..hi - t0].copy_from_slice(&xs[src..src + (hi - lo)]);
            } else {
                for t in lo..hi {
                    cs[t - t0] = xs[t * stride + j - pad];
                }
            }
        }
    }
}

fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    kernel: usize,
    stride: usize,
    t0: usize,
    t1: usize,
    mut gx: ArrayViewMut2<F>,
) {
    let (cin, len) = gx.dim();
    let pad = (kernel - 1) / 2;
    for ci in 0..cin {
        let mut grow = gx.row_mut(ci);
        let gs = grow.as_slice_mut().expect("contiguous grad row");
        for j in 0..kernel {
            let (lo, hi) = valid_range(t0, t1, j, stride, pad, len);
            let crow = cols.row(ci * kernel + j);
            for t in lo..hi {
                gs[t * stride + j - pad] += crow[t - t0];
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    /// 1-D convolution of `x: [cin, len]` with `weight: [cout, cin*kernel]`
    /// (row layout `ci*kernel + j`) and `bias: [cout, 1]`, using
    /// `(kernel - 1) / 2` zero padding on both sides.
    pub fn conv1d(
        &self,
        x: &Var<F>,
        weight: &Var<F>,
        bias: &Var<F>,
        kernel: usize,
        stride: usize,
    ) -> Var<F> {
        let (cin, len) = x.shape();
        let cout = weight.rows();
        assert!(kernel >= 1 && stride >= 1);
        assert_eq!(weight.cols(), cin * kernel, "conv1d weight shape");
        assert_eq!(bias.shape(), (cout, 1), "conv1d bias shape");
        let lout = conv_output_len(len, kernel, stride);
        let chunk = chunk_len(cin, kernel);

        let mut out = Array2::<F>::zeros((cout, lout));
        let mut cols = Array2::<F>::zeros((cin * kernel, chunk.min(lout)));
        let mut t0 = 0;
        while t0 < lout {
            let t1 = (t0 + chunk).min(lout);
            if cols.ncols() != t1 - t0 {
                cols = Array2::zeros((cin * kernel, t1 - t0));
            }
            im2col(x.value.view(), kernel, stride, t0, t1, &mut cols);
            general_mat_mul(
                F::one(),
                &*weight.value,
                &cols,
                F::zero(),
                &mut out.slice_mut(s![.., t0..t1]),
            );
            t0 = t1;
        }
        out += &*bias.value;

        let (xv, wv) = (Arc::clone(&x.value), Arc::clone(&weight.value));
        self.record(out, &[x, weight, bias], move |g, needs| {
            let mut gx = needs[0].then(|| Array2::<F>::zeros((cin, len)));
            let mut gw = needs[1].then(|| Array2::<F>::zeros((cout, cin * kernel)));
            if gx.is_some() || gw.is_some() {
                let mut cols = Array2::<F>::zeros((cin * kernel, chunk.min(lout)));
                let mut gcols = Array2::<F>::zeros((cin * kernel, chunk.min(lout)));
                let mut t0 = 0;
                while t0 < lout {
                    let t1 = (t0 + chunk).min(lout);
                    if cols.ncols() != t1 - t0 {
                        cols = Array2::zeros((cin * kernel, t1 - t0));
                        gcols = Array2::zeros((cin * kernel, t1 - t0));
                    }
                    let gchunk = g.slice(s![.., t0..t1]);
                    if let Some(gw) = gw.as_mut() {
                        im2col(xv.view(), kernel, stride, t0, t1, &mut cols);
                        general_mat_mul(F::one(), &gchunk, &cols.t(), F::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        general_mat_mul(F::one(), &wv.t(), &gchunk, F::zero(), &mut gcols);
                        col2im(gcols.view(), kernel, stride, t0, t1, gx.view_mut());
                    }
                    t0 = t1;
                }
            }
            let gb = needs[2].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            vec![gx, gw, gb]
        })
    }
}
