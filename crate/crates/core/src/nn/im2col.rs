//! Patch extraction for channels-last convolution.
//!
//! `im2col` turns a `(B, H, W, C)` tensor into `(B, Ho, Wo, K*K*C)` patches with
//! column order `(ky, kx, c)`, so a convolution is a single matmul against a
//! `(K*K*C, Cout)` weight. Its adjoint `col2im` scatters patch gradients back.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

struct Im2Col(PatchGeometry);

struct Col2Im {
    geom: PatchGeometry,
    height: usize,
    width: usize,
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

fn im2col_slice<T: WithDType>(
    src: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
    g: PatchGeometry,
) -> (Vec<T>, usize, usize) {
    let ho = g.output_extent(h);
    let wo = g.output_extent(w);
    let cols = g.kernel * g.kernel * c;
    let mut dst = vec![T::zero(); b * ho * wo * cols];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * cols;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * g.kernel + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    (dst, ho, wo)
}

fn col2im_slice<T: WithDType>(
    src: &[T],
    (b, ho, wo, _): (usize, usize, usize, usize),
    (h, w, c): (usize, usize, usize),
    g: PatchGeometry,
) -> Vec<T> {
    let cols = g.kernel * g.kernel * c;
    let mut dst = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * cols;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * g.kernel + kx) * c;
                        for (o, &v) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let g = self.0;
        let out_shape = |ho, wo| Shape::from((dims.0, ho, wo, g.kernel * g.kernel * dims.3));
        match storage {
            CpuStorage::F32(v) => {
                let (d, ho, wo) = im2col_slice(contiguous(v, layout)?, dims, g);
                Ok((CpuStorage::F32(d), out_shape(ho, wo)))
            }
            CpuStorage::F64(v) => {
                let (d, ho, wo) = im2col_slice(contiguous(v, layout)?, dims, g);
                Ok((CpuStorage::F64(d), out_shape(ho, wo)))
            }
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, h, w, _) = arg.dims4()?;
        let op = Col2Im {
            geom: self.0,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let c = dims.3 / (self.geom.kernel * self.geom.kernel);
        let hw = (self.height, self.width, c);
        let shape = Shape::from((dims.0, self.height, self.width, c));
        match storage {
            CpuStorage::F32(v) => Ok((
                CpuStorage::F32(col2im_slice(contiguous(v, layout)?, dims, hw, self.geom)),
                shape,
            )),
            CpuStorage::F64(v) => Ok((
                CpuStorage::F64(col2im_slice(contiguous(v, layout)?, dims, hw, self.geom)),
                shape,
            )),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        }
    }
}

/// Extracts convolution patches from a channels-last `(B, H, W, C)` tensor.
pub fn im2col(x: &Tensor, geom: PatchGeometry) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col(geom))
}
