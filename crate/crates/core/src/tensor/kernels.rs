//! Forward/backward kernels on raw slices. Shapes are validated by the graph layer.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let npos = g.positions();
    let mut cols = vec![T::zero(); g.patch() * npos];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npos = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the column matrix (empty for pointwise convolutions).
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let npos = g.positions();
    let cols = if g.is_pointwise() {
        Vec::new()
    } else {
        im2col(x, g)
    };
    let colref: &[T] = if g.is_pointwise() { x } else { &cols };
    let mut out = vec![T::zero(); g.c_out * npos];
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(npos).enumerate() {
            row.fill(b[co]);
        }
    }
    T::gemm(
        g.c_out,
        g.patch(),
        npos,
        T::one(),
        w,
        g.patch(),
        1,
        colref,
        npos,
        1,
        T::one(),
        &mut out,
        npos,
        1,
    );
    (out, cols)
}

pub(crate) fn conv2d_grad_weight<T: Scalar>(dy: &[T], cols: &[T], g: &ConvGeom, dw: &mut [T]) {
    let npos = g.positions();
    T::gemm(
        g.c_out,
        npos,
        g.patch(),
        T::one(),
        dy,
        npos,
        1,
        cols,
        1,
        npos,
        T::one(),
        dw,
        g.patch(),
        1,
    );
}

pub(crate) fn conv2d_grad_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npos = g.positions();
    if g.is_pointwise() {
        T::gemm(
            g.patch(),
            g.c_out,
            npos,
            T::one(),
            w,
            1,
            g.patch(),
            dy,
            npos,
            1,
            T::one(),
            dx,
            npos,
            1,
        );
        return;
    }
    let mut dcols = vec![T::zero(); g.patch() * npos];
    T::gemm(
        g.patch(),
        g.c_out,
        npos,
        T::one(),
        w,
        1,
        g.patch(),
        dy,
        npos,
        1,
        T::zero(),
        &mut dcols,
        npos,
        1,
    );
    col2im(&dcols, g, dx);
}

/// Max pooling over `[C, H, W]`; returns values and the flat input index of each maximum.
/// Ties resolve to the first element in row-major scan order of the window.
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                let mut bv = x[best];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > bv {
                            bv = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
    }
    (out, arg, ho, wo)
}

/// `[C, H, W] -> [2, H, W]`: channel mean in plane 0, channel max in plane 1.
pub(crate) fn channel_mean_max<T: Scalar>(x: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); 2 * hw];
    let mut arg = vec![0usize; hw];
    let inv = T::one() / T::lit(c as f64);
    for p in 0..hw {
        let mut sum = T::zero();
        let mut best = x[p];
        let mut bi = 0;
        for ch in 0..c {
            let v = x[ch * hw + p];
            sum += v;
            if v > best {
                best = v;
                bi = ch;
            }
        }
        out[p] = sum * inv;
        out[hw + p] = best;
        arg[p] = bi;
    }
    (out, arg)
}
