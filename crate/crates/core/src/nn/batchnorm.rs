//! Fused masked batch normalisation.
//!
//! Statistics and gradients only involve rows whose mask is non-zero; masked
//! rows produce zero output and receive zero gradient.

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor, WithDType};

pub(crate) struct MaskedNorm {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
    /// One weight per row (0 or 1).
    pub mask: Vec<f64>,
    /// Whether `mean`/`invstd` were computed from this batch (and so depend on `x`).
    pub batch_stats: bool,
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("masked norm needs contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

fn to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()
}

impl MaskedNorm {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let c = self.mean.len();
        let mut out = vec![T::zero(); x.len()];
        for (r, (row, dst)) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            if self.mask[r] == 0.0 {
                continue;
            }
            for j in 0..c {
                let xhat = (row[j].to_f64() - self.mean[j]) * self.invstd[j];
                dst[j] = T::from_f64(self.mask[r] * (gamma[j].to_f64() * xhat + beta[j].to_f64()));
            }
        }
        out
    }
}

impl CustomOp3 for MaskedNorm {
    fn name(&self) -> &'static str {
        "masked-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward(slice::<f32>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward(slice::<f64>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)),
            _ => candle_core::bail!("masked norm supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = self.mean.len();
        let xs = to_f64(x)?;
        let gs = to_f64(grad)?;
        let gm = to_f64(gamma)?;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (r, (row, g)) in xs.chunks_exact(c).zip(gs.chunks_exact(c)).enumerate() {
            let m = self.mask[r];
            if m == 0.0 {
                continue;
            }
            for j in 0..c {
                let xhat = (row[j] - self.mean[j]) * self.invstd[j];
                dbeta[j] += m * g[j];
                dgamma[j] += m * g[j] * xhat;
            }
        }
        let n: f64 = self.mask.iter().sum::<f64>().max(1.0);
        let mut dx = vec![0.0; xs.len()];
        for (r, ((row, g), d)) in xs.chunks_exact(c).zip(gs.chunks_exact(c)).zip(dx.chunks_exact_mut(c)).enumerate() {
            let m = self.mask[r];
            if m == 0.0 {
                continue;
            }
            for j in 0..c {
                let scale = m * gm[j] * self.invstd[j];
                d[j] = if self.batch_stats {
                    let xhat = (row[j] - self.mean[j]) * self.invstd[j];
                    scale * (g[j] - dbeta[j] / n - xhat * dgamma[j] / n)
                } else {
                    scale * g[j]
                };
            }
        }
        let dev = x.device();
        let dt = x.dtype();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}

/// Per-channel mean and biased variance over rows with non-zero mask.
pub(crate) fn masked_moments(x: &[f64], mask: &[f64], c: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let n: f64 = mask.iter().sum::<f64>().max(1.0);
    let mut mean = vec![0.0; c];
    for (row, &m) in x.chunks_exact(c).zip(mask) {
        if m != 0.0 {
            for j in 0..c {
                mean[j] += m * row[j];
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; c];
    for (row, &m) in x.chunks_exact(c).zip(mask) {
        if m != 0.0 {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += m * d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var, n)
}

pub(crate) fn rows_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    to_f64(t)
}
