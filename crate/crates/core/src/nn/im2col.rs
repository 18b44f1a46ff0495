//! Patch unfolding (`im2col`) and its adjoint (`col2im`) as differentiable custom ops.
//!
//! A convolution becomes `W (c_out x K) . cols (K x b L)` with `K = c_in * kh * kw` and
//! `L = out_h * out_w`. Keeping the batch inside the column axis makes the weight gradient a
//! single matrix product instead of a per-image product followed by a reduction.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Valid output columns `[lo, hi)` for a tap at kernel offset `k` along an axis.
    fn valid_range(&self, k: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
        let off = k * self.dilation;
        // Need 0 <= o * stride + off - pad < size.
        let lo = if off >= pad { 0 } else { (pad - off).div_ceil(self.stride) };
        let hi = if size + pad <= off {
            0
        } else {
            ((size + pad - off - 1) / self.stride + 1).min(out)
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(row, col_start, src_start, len)` for every run of in-bounds taps of one image.
    /// Consecutive columns in a run advance the source offset by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.c {
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid_range(ky, self.ph, self.h, oh);
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let (xlo, xhi) = self.valid_range(kx, self.pw, self.w, ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky * self.dilation - self.ph;
                        let ix = xlo * self.stride + kx * self.dilation - self.pw;
                        f(row, oy * ow + xlo, (c * self.h + iy) * self.w + ix, xhi - xlo);
                    }
                }
            }
        }
    }
}

fn unfold<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let bl = batch * l;
    let img = g.c * g.h * g.w;
    let mut dst = vec![T::default(); g.rows() * bl];
    for b in 0..batch {
        let s = &src[b * img..(b + 1) * img];
        g.for_each_run(|row, col, off, len| {
            let start = row * bl + b * l + col;
            let out = &mut dst[start..start + len];
            if g.stride == 1 {
                out.copy_from_slice(&s[off..off + len]);
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = s[off + j * g.stride];
                }
            }
        });
    }
    dst
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let bl = batch * l;
    let img = g.c * g.h * g.w;
    let mut dst = vec![T::default(); batch * img];
    for b in 0..batch {
        let d = &mut dst[b * img..(b + 1) * img];
        g.for_each_run(|row, col, off, len| {
            let start = row * bl + b * l + col;
            for (j, &v) in src[start..start + len].iter().enumerate() {
                d[off + j * g.stride] += v;
            }
        });
    }
    dst
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

/// `b x c x h x w -> (c kh kw) x (b out_h out_w)`.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub geometry: Geometry,
    pub batch: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, batch) = (&self.geometry, self.batch);
        if layout.dims() != [batch, g.c, g.h, g.w] {
            candle_core::bail!("im2col: input {:?} does not match {g:?}", layout.dims());
        }
        let shape = Shape::from((g.rows(), batch * g.out_h() * g.out_w()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, batch, g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(*self))?))
    }
}

/// Adjoint of [`Im2Col`]: scatter-adds columns back onto the image grid.
pub struct Col2Im(pub Im2Col);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, batch) = (&self.0.geometry, self.0.batch);
        if layout.dims() != [g.rows(), batch * g.out_h() * g.out_w()] {
            candle_core::bail!("col2im: input {:?} does not match {g:?}", layout.dims());
        }
        let shape = Shape::from((batch, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, batch, g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(self.0)?))
    }
}

/// Cross-correlation of `x` (`b x c x h x w`) with `weight` (`o x c x kh x kw`), plus an
/// optional per-channel `bias`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        candle_core::bail!("conv2d: input has {c} channels, kernel expects {ci}");
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        dilation,
        ph: pad.0,
        pw: pad.1,
    };
    if h + 2 * g.ph < dilation * (kh - 1) + 1 || w + 2 * g.pw < dilation * (kw - 1) + 1 {
        candle_core::bail!("conv2d: kernel larger than padded input");
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = if kh == 1 && kw == 1 && stride == 1 && g.ph == 0 && g.pw == 0 {
        x.transpose(0, 1)?.reshape((c, b * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col { geometry: g, batch: b })?
    };
    let y = weight.reshape((o, g.rows()))?.matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((o, 1))?)?,
        None => y,
    };
    y.reshape((o, b, oh, ow))?.transpose(0, 1)?.contiguous()
}
