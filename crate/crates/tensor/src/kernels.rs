//! Raw compute kernels behind the differentiable primitives.

use crate::float::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded patch matrix (all output positions of all images).
    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (N,C,H,W) into a (C*kh*kw, N*Ho*Wo) patch matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * oh * ow..(n + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let dst_line = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = g.positions();
    let mut x = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * oh * ow..(n + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_line = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst_line[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the output (N,Cout,Ho,Wo) and the patch matrix for reuse in backward.
pub fn conv2d_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let k = g.patch_len();
    let p = g.positions();
    let mut out_p = vec![T::zero(); g.out_channels * p];
    T::gemm(
        g.out_channels,
        k,
        p,
        w,
        k as isize,
        1,
        &cols,
        p as isize,
        1,
        T::zero(),
        &mut out_p,
        p as isize,
        1,
    );
    (channel_major_to_batch_major(&out_p, g), cols)
}

/// Gradients with respect to input and weights.
pub fn conv2d_backward<T: Float>(
    dout: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = g.patch_len();
    let p = g.positions();
    let dout_p = batch_major_to_channel_major(dout, g);
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.out_channels * k];
        T::gemm(
            g.out_channels,
            p,
            k,
            &dout_p,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::zero(),
            &mut dw,
            k as isize,
            1,
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); k * p];
        T::gemm(
            k,
            g.out_channels,
            p,
            w,
            1,
            k as isize,
            &dout_p,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        col2im(&dcols, g)
    });
    (dx, dw)
}

fn channel_major_to_batch_major<T: Float>(out_p: &[T], g: &ConvGeometry) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let p = g.positions();
    let mut out = vec![T::zero(); out_p.len()];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            out[(n * g.out_channels + co) * l..][..l].copy_from_slice(&out_p[co * p + n * l..][..l]);
        }
    }
    out
}

fn batch_major_to_channel_major<T: Float>(dout: &[T], g: &ConvGeometry) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let p = g.positions();
    let mut out_p = vec![T::zero(); dout.len()];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            out_p[co * p + n * l..][..l].copy_from_slice(&dout[(n * g.out_channels + co) * l..][..l]);
        }
    }
    out_p
}

/// Max pooling without padding; returns values and flat argmax indices into `x`.
pub fn max_pool2d_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, oh, ow)
}
