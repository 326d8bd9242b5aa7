//! im2col convolution kernels backed by a packed GEMM.

use super::Tensor;
use crate::error::{contract, Result};
use crate::par::{map_indexed, Exec};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = input.dims4(OP)?;
        let [cout, kcin, kh, kw] = kernel.dims4(OP)?;
        if kcin != cin {
            return contract(OP, format!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return contract(OP, format!("kernel extent must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return contract(OP, "stride must be >= 1");
        }
        let span = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if padded < k || (padded - k) % stride != 0 {
                return contract(
                    OP,
                    format!("extent {size} with pad {pad}, kernel {k}, stride {stride} is not integral"),
                );
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = span(h, kh)?;
        let wo = span(w, kw)?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn ck(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose source column `ox·stride + kx − pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kx).div_ceil(s).min(g.wo);
    let hi = if g.w + g.pad <= kx {
        0
    } else {
        (g.w + g.pad - kx).div_ceil(s).min(g.wo)
    };
    (lo, hi.max(lo))
}

/// Column matrix `[Cin·kh·kw, Ho·Wo]` for one batch item, built by appending
/// rows in order so the buffer is never zero-filled first.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.ck() * g.positions());
    let zeros = |cols: &mut Vec<f64>, n: usize| cols.extend(std::iter::repeat_n(0.0, n));
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        zeros(&mut cols, g.wo);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    zeros(&mut cols, lo);
                    if g.stride == 1 {
                        cols.extend_from_slice(&src[first..first + hi - lo]);
                    } else {
                        cols.extend((0..hi - lo).map(|j| src[first + j * g.stride]));
                    }
                    zeros(&mut cols, g.wo - hi);
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + seg.len()].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in seg.iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for a matrix view: (row stride, column stride).
type View<'a> = (&'a [f64], isize, isize);

/// `a · b` into a fresh `m×n` buffer.
fn gemm_new(m: usize, k: usize, n: usize, a: View, b: View) -> Vec<f64> {
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm writes every element of C without reading it,
    // so all m·n slots are initialised before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

pub(crate) fn forward(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize, exec: Exec) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    let (ck, p) = (g.ck(), g.positions());
    let in_stride = g.cin * g.h * g.w;
    let per_sample = map_indexed(exec, g.n, |n| {
        let x = &input.data()[n * in_stride..(n + 1) * in_stride];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(&g, x);
            &owned
        };
        gemm_new(g.cout, ck, p, (kernel.data(), ck as isize, 1), (cols, p as isize, 1))
    });
    let data = per_sample.concat();
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], data)
}

/// Gradients with respect to the input and the kernel.
pub(crate) fn backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    let (ck, p) = (g.ck(), g.positions());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let per_sample = map_indexed(exec, g.n, |n| {
        let x = &input.data()[n * in_stride..(n + 1) * in_stride];
        let go = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(&g, x);
            &owned
        };
        // dK = dOut · colsᵀ
        let dk = gemm_new(g.cout, p, ck, (go, p as isize, 1), (cols, 1, p as isize));
        // dcols = Kᵀ · dOut
        let dcols = gemm_new(ck, g.cout, p, (kernel.data(), 1, ck as isize), (go, p as isize, 1));
        let dx = if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; in_stride];
            col2im(&g, &dcols, &mut dx);
            dx
        };
        (dx, dk)
    });
    let mut dk_total = vec![0.0; g.cout * ck];
    let mut dx_all = Vec::with_capacity(g.n * in_stride);
    for (dx, dk) in per_sample {
        dx_all.extend_from_slice(&dx);
        for (a, b) in dk_total.iter_mut().zip(&dk) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(input.dims().to_vec(), dx_all)?,
        Tensor::new(kernel.dims().to_vec(), dk_total)?,
    ))
}

/// Cross-correlation of `input: [N, Cin, H, W]` with `kernel: [Cout, Cin, kh, kw]`
/// outside of any tape.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    forward(input, kernel, stride, pad, Exec::Sequential)?.check_finite("conv2d")
}
