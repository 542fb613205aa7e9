//! Kernels behind the tape ops.

use super::{gemm, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (w + 2 * pad - k) / stride + 1;
        Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            hout,
            wout,
        }
    }

    pub fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn spatial_out(&self) -> usize {
        self.hout * self.wout
    }

    pub fn ncols(&self) -> usize {
        self.batch * self.spatial_out()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds NCHW input into a `[cin*k*k, batch*hout*wout]` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ncols();
    let so = g.spatial_out();
    let mut cols = vec![T::zero(); g.kdim() * n];
    if g.is_pointwise() {
        let s = g.h * g.w;
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * s..][..s];
                cols[c * n + b * s..][..s].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * n..][..n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * so..][..so];
                    for oy in 0..g.hout {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wout {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wout + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ncols();
    let so = g.spatial_out();
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    if g.is_pointwise() {
        let s = g.h * g.w;
        for b in 0..g.batch {
            for c in 0..g.cin {
                x[(b * g.cin + c) * s..][..s].copy_from_slice(&cols[c * n + b * s..][..s]);
            }
        }
        return x;
    }
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * n..][..n];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * so..][..so];
                    for oy in 0..g.hout {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wout {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.wout + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `W * cols`, rearranged from `[cout, batch*s]` to NCHW.
pub(crate) fn conv_forward<T: Real>(w: &[T], cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ncols();
    let mut rows = vec![T::zero(); g.cout * n];
    gemm(
        false,
        false,
        g.cout,
        n,
        g.kdim(),
        T::one(),
        w,
        cols,
        T::zero(),
        &mut rows,
    );
    let so = g.spatial_out();
    let mut out = vec![T::zero(); rows.len()];
    for co in 0..g.cout {
        for b in 0..g.batch {
            out[(b * g.cout + co) * so..][..so].copy_from_slice(&rows[co * n + b * so..][..so]);
        }
    }
    out
}

/// NCHW output gradient to the `[cout, batch*s]` row layout.
pub(crate) fn conv_grad_output_to_rows<T: Real>(gout: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ncols();
    let so = g.spatial_out();
    let mut rows = vec![T::zero(); g.cout * n];
    for b in 0..g.batch {
        for co in 0..g.cout {
            rows[co * n + b * so..][..so].copy_from_slice(&gout[(b * g.cout + co) * so..][..so]);
        }
    }
    rows
}

pub(crate) struct BatchNormForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batch_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    b: usize,
    c: usize,
    s: usize,
    eps: T,
) -> BatchNormForward<T> {
    let count = T::of((b * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            mean[ci] += x[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for bi in 0..b {
        for ci in 0..c {
            let m = mean[ci];
            var[ci] += x[(bi * c + ci) * s..][..s]
                .iter()
                .map(|&a| (a - m) * (a - m))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * s;
            for i in base..base + s {
                let h = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                out[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    BatchNormForward {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    b: usize,
    c: usize,
    s: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * s;
            for i in base..base + s {
                dgamma[ci] += g[i] * xhat[i];
                dbeta[ci] += g[i];
            }
        }
    }
    let count = T::of((b * s) as f64);
    let mut dx = vec![T::zero(); g.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * s;
            let k = gamma[ci] * inv_std[ci] / count;
            for i in base..base + s {
                dx[i] = k * (count * g[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}
