use candle_core::{Tensor, Var};

use super::batchnorm::{masked_moments, rows_f64, MaskedNorm};
use super::{dropout_mask, im2col, sigmoid, Mode, PatchGeometry, Scope};
use crate::error::Result;

/// Dense layer with weight stored `(in, out)`; applies to the last axis.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = scope.uniform("weight", (input, output), bound)?;
        let bias = if bias {
            Some(scope.uniform("bias", output, bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(self.weight.as_tensor())?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

/// Channels-last 2-D convolution realised as patch extraction plus matmul.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: PatchGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = scope.uniform("weight", (fan_in, out_channels), bound)?;
        let bias = if bias {
            Some(scope.uniform("bias", out_channels, bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: PatchGeometry {
                kernel,
                stride,
                padding: kernel / 2,
            },
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let g = self.geom;
        let patches = if g.kernel == 1 && g.stride == 1 {
            x.clone()
        } else {
            im2col(x, g)?
        };
        let (ho, wo) = (g.output_extent(h), g.output_extent(w));
        let cols = patches.dim(3)?;
        let y = patches
            .reshape((b * ho * wo, cols))?
            .matmul(self.weight.as_tensor())?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(bias.as_tensor())?,
            None => y,
        };
        Ok(y.reshape((b, ho, wo, self.out_channels))?)
    }

    /// Multiply-accumulate count for an output grid of `ho * wo` cells.
    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        (ho * wo * self.geom.kernel * self.geom.kernel * self.in_channels * self.out_channels) as u64
    }
}

/// Batch normalisation whose statistics only cover valid (unpadded) cells.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", channels, 1.0)?,
            beta: scope.constant("beta", channels, 0.0)?,
            running_mean: scope.buffer("running_mean", channels, 0.0)?,
            running_var: scope.buffer("running_var", channels, 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// `x` is `(B, H, W, C)`, `mask` is `(B, H, W, 1)`; output is re-masked.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x2 = x.reshape((b * h * w, c))?.contiguous()?;
        let mask = rows_f64(mask)?;
        let (mean, var) = if mode.is_train() {
            let (mean, var, n) = masked_moments(&rows_f64(&x2)?, &mask, c);
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (Tensor::from_slice(&mean, c, dev)?.to_dtype(x.dtype())? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (Tensor::from_slice(&var, c, dev)?.to_dtype(x.dtype())? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (rows_f64(self.running_mean.as_tensor())?, rows_f64(self.running_var.as_tensor())?)
        };
        let op = MaskedNorm {
            invstd: var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
            mean,
            mask,
            batch_stats: mode.is_train(),
        };
        let y = x2.apply_op3(self.gamma.as_tensor(), self.beta.as_tensor(), op)?;
        Ok(y.reshape((b, h, w, c))?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    pub weight: Var,
}

impl Embedding {
    pub fn new(scope: &mut Scope<'_>, classes: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.normal("weight", (classes, dim), 1.0)?,
        })
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.weight.device())?;
        Ok(self.weight.as_tensor().index_select(&idx, 0)?)
    }
}

/// GRU cell with gate order (reset, update, new).
#[derive(Clone)]
pub struct GruCell {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    hidden: usize,
}

impl GruCell {
    pub fn new(scope: &mut Scope<'_>, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: scope.uniform("w_ih", (input, 3 * hidden), bound)?,
            w_hh: scope.uniform("w_hh", (hidden, 3 * hidden), bound)?,
            b_ih: scope.uniform("b_ih", 3 * hidden, bound)?,
            b_hh: scope.uniform("b_hh", 3 * hidden, bound)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.hidden;
        let gi = x.matmul(self.w_ih.as_tensor())?.broadcast_add(self.b_ih.as_tensor())?;
        let gh = h.matmul(self.w_hh.as_tensor())?.broadcast_add(self.b_hh.as_tensor())?;
        let r = sigmoid(&(gi.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let z = sigmoid(&(gi.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gi.narrow(1, 2 * n, n)? + (r * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        Ok((&cand + (z * (h - &cand)?)?)?)
    }

    pub fn macs(&self, input: usize) -> u64 {
        (3 * self.hidden * (input + self.hidden)) as u64
    }
}

#[derive(Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        match mode {
            Mode::Train(rng) if self.p > 0.0 => {
                let mask = dropout_mask(rng, x.shape(), self.p, x)?;
                Ok((x * mask)?)
            }
            _ => Ok(x.clone()),
        }
    }
}
