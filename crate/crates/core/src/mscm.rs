//! Multi-scale counting module.
//!
//! Each branch runs a `k x k` convolution, squeeze-excitation channel
//! attention, a `1 x 1` projection to one map per symbol class and a sigmoid.
//! Sum-pooling a map gives that branch's count vector; the fused vector fed to
//! the decoder is the mean over branches.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, BatchNorm, Conv2d, Linear, Mode, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub kernel: usize,
    pub intermediate: usize,
    pub reduction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MscmConfig {
    pub branches: Vec<BranchConfig>,
}

impl MscmConfig {
    pub fn with_width(intermediate: usize) -> Self {
        Self {
            branches: [3, 5]
                .into_iter()
                .map(|kernel| BranchConfig {
                    kernel,
                    intermediate,
                    reduction: 16,
                })
                .collect(),
        }
    }

    pub fn full() -> Self {
        Self::with_width(512)
    }

    pub fn desk() -> Self {
        Self::with_width(128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("counting module needs at least one branch".into()));
        }
        for b in &self.branches {
            if b.kernel % 2 == 0 || b.intermediate == 0 || b.reduction == 0 || b.intermediate < b.reduction {
                return Err(Error::Config(format!("invalid counting branch {b:?}")));
            }
        }
        Ok(())
    }
}

/// Squeeze-excitation gate: `S = H * sigmoid(W2 relu(W1 GAP(H) + b1) + b2)`.
#[derive(Clone)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Linear::new(&mut scope.pp("squeeze"), channels, channels / reduction, true)?,
            excite: Linear::new(&mut scope.pp("excite"), channels / reduction, channels, true)?,
        })
    }

    /// Per-channel gate in (0, 1), shape `(B, C')`. Pooling covers valid cells only.
    pub fn gate(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, hh, ww, c) = h.dims4()?;
        let flat = h.reshape((b, hh * ww, c))?;
        let m = mask.reshape((b, hh * ww, 1))?;
        let pooled = flat.broadcast_mul(&m)?.sum(1)?.broadcast_div(&m.sum(1)?)?;
        let q = self.squeeze.forward(&pooled)?.relu()?;
        sigmoid(&self.excite.forward(&q)?)
    }

    pub fn forward(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let gate = self.gate(h, mask)?;
        Ok(h.broadcast_mul(&gate.unsqueeze(1)?.unsqueeze(1)?)?)
    }
}

/// Initial logit of every counting-map cell (sigmoid about 0.018).
pub const HEAD_BIAS_INIT: f64 = -4.0;

#[derive(Clone)]
pub struct CountingBranch {
    pub kernel: usize,
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub attention: ChannelAttention,
    pub head: Conv2d,
}

impl CountingBranch {
    pub fn new(scope: &mut Scope<'_>, features: usize, classes: usize, cfg: &BranchConfig) -> Result<Self> {
        let head = Conv2d::new(&mut scope.pp("head"), cfg.intermediate, classes, 1, 1, true)?;
        if let Some(b) = &head.bias {
            // Start with sparse maps so early steps do not drive every cell into saturation.
            b.set(&Tensor::full(HEAD_BIAS_INIT, b.shape(), b.device())?.to_dtype(b.dtype())?)?;
        }
        Ok(Self {
            kernel: cfg.kernel,
            conv: Conv2d::new(&mut scope.pp("conv"), features, cfg.intermediate, cfg.kernel, 1, false)?,
            bn: BatchNorm::new(&mut scope.pp("bn"), cfg.intermediate)?,
            attention: ChannelAttention::new(&mut scope.pp("attention"), cfg.intermediate, cfg.reduction)?,
            head,
        })
    }

    /// Counting map `(B, H, W, C)` with entries in (0, 1) and zeros on padding.
    pub fn counting_map(&self, f: &FeatureMap, mode: &Mode<'_>) -> Result<Tensor> {
        let h = self.conv.forward(&f.values)?;
        let h = self.bn.forward(&h, &f.mask, mode)?.relu()?;
        let s = self.attention.forward(&h, &f.mask)?;
        let m = sigmoid(&self.head.forward(&s)?)?;
        Ok(m.broadcast_mul(&f.mask)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let att = self.attention.squeeze.weight.elem_count() + self.attention.excite.weight.elem_count();
        self.conv.macs(h, w) + self.head.macs(h, w) + att as u64
    }
}

/// `V_i = sum_{p,q} M_{pq,i}` over a `(B, H, W, C)` map, giving `(B, C)`.
pub fn sum_pool(map: &Tensor) -> Result<Tensor> {
    Ok(map.sum(2)?.sum(1)?)
}

/// Element-wise mean of branch count vectors, in branch order.
pub fn fuse_branch_vectors(vectors: &[Tensor]) -> Result<Tensor> {
    let first = vectors.first().ok_or(Error::Empty("branch vectors"))?;
    let mut acc = first.clone();
    for v in &vectors[1..] {
        acc = (acc + v)?;
    }
    Ok((acc / vectors.len() as f64)?)
}

pub struct MscmOutput {
    /// Fused count vector `(B, C)`.
    pub fused: Tensor,
    pub branch_vectors: Vec<Tensor>,
    pub maps: Vec<Tensor>,
}

pub struct Mscm {
    pub branches: Vec<CountingBranch>,
}

impl Mscm {
    pub fn new(scope: &mut Scope<'_>, features: usize, classes: usize, cfg: &MscmConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| CountingBranch::new(&mut scope.pp(format!("branch{i}")), features, classes, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, f: &FeatureMap, mode: &Mode<'_>) -> Result<MscmOutput> {
        let mut maps = Vec::with_capacity(self.branches.len());
        let mut vectors = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let map = branch.counting_map(f, mode)?;
            vectors.push(sum_pool(&map)?);
            maps.push(map);
        }
        Ok(MscmOutput {
            fused: fuse_branch_vectors(&vectors)?,
            branch_vectors: vectors,
            maps,
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.macs(h, w)).sum()
    }
}

/// Mean absolute difference helper used by tests and reports.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}
