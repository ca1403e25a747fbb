//! Raw numeric kernels on flat row-major buffers.

use crate::exec::Exec;

/// Row-major `[m×k] · [k×n]`, schoolbook order. Rows of the output are
/// independent, so the parallel policy splits on them.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    // small products are not worth a fork
    let exec = if m * k * n < 32 * 1024 {
        Exec::Sequential
    } else {
        exec
    };
    exec.for_each_chunk(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    });
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
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

    /// Length of one im2col row, `c·h·w`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Number of im2col rows, `B·H_out·W_out`.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Iterates `(row, col, input_index)` for every in-bounds patch entry.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (hh, ww) = (self.height as isize, self.width as isize);
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for c in 0..self.channels {
                        for ky in 0..self.kernel_h {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= hh {
                                continue;
                            }
                            for kx in 0..self.kernel_w {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= ww {
                                    continue;
                                }
                                let col = (c * self.kernel_h + ky) * self.kernel_w + kx;
                                let src = ((b * self.channels + c) * self.height + iy as usize)
                                    * self.width
                                    + ix as usize;
                                f(row * plen, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `B×c×H×W` into `[B·H_out·W_out, c·h·w]`; padded taps are zero.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patches() * g.patch_len()];
    g.for_each_tap(|row_off, col, src| cols[row_off + col] = x[src]);
    cols
}

/// Adjoint of [`im2col`]: scatters-adds patch entries back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    g.for_each_tap(|row_off, col, src| x[src] += cols[row_off + col]);
    x
}
