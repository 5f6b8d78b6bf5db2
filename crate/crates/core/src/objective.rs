//! Joint objective: symbol cross-entropy plus smooth-L1 count regression,
//! summed without weighting.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;
use crate::vocab::TokenSequence;

/// Transition point between the quadratic and linear pieces, in counts.
pub const SMOOTH_L1_BETA: f64 = 1.0;

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

/// Mean smooth-L1 over classes.
pub fn counting_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("count vector"));
    }
    let sum: f64 = predicted.iter().zip(target).map(|(p, t)| smooth_l1(p - t)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Mean negative log-likelihood of the target symbols over decoding steps.
/// `rows[t]` is the distribution predicting `target[t + 1]`.
pub fn cls_loss(rows: &[Vec<f64>], target: &TokenSequence) -> Result<f64> {
    let ids = target.ids();
    if rows.len() != ids.len() - 1 {
        return Err(Error::LengthMismatch {
            expected: ids.len() - 1,
            actual: rows.len(),
        });
    }
    let mut total = 0.0;
    for (row, &id) in rows.iter().zip(&ids[1..]) {
        let p = *row.get(id).ok_or(Error::InvalidId { id, size: row.len() })?;
        total -= p.ln();
    }
    Ok(total / rows.len() as f64)
}

/// Smooth-L1 on tensors, mean over classes then batch.
pub fn counting_loss_tensor(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = (predicted - target)?;
    let a = d.abs()?;
    let quad = (d.sqr()? * (0.5 / SMOOTH_L1_BETA))?;
    let lin = (&a - 0.5 * SMOOTH_L1_BETA)?;
    let small = a.lt(SMOOTH_L1_BETA)?;
    Ok(small.where_cond(&quad, &lin)?.mean_all()?)
}

/// Cross-entropy from logits `(B, L-1, C)` against padded targets `(B, L)`.
/// Steps after each sample's own `eos` are excluded; the loss is the mean over
/// valid steps per sample, then the mean over the batch.
pub fn cls_loss_tensor(logits: &Tensor, targets: &[Vec<usize>], lengths: &[usize]) -> Result<Tensor> {
    let (b, steps, _) = logits.dims3()?;
    if targets.len() != b || lengths.len() != b {
        return Err(Error::LengthMismatch { expected: b, actual: targets.len() });
    }
    let logp = log_softmax_last(logits)?;
    let mut idx = Vec::with_capacity(b * steps);
    let mut weights = Vec::with_capacity(b * steps);
    for (t, &len) in targets.iter().zip(lengths) {
        if t.len() != steps + 1 || len < 2 || len > t.len() {
            return Err(Error::Shape("target padding does not match logits".into()));
        }
        let valid = (len - 1) as f64;
        for s in 0..steps {
            idx.push(t[s + 1] as u32);
            weights.push(if s + 1 < len { 1.0 / valid } else { 0.0 });
        }
    }
    let dev = logits.device();
    let idx = Tensor::from_vec(idx, (b, steps, 1), dev)?;
    let w = Tensor::from_vec(weights, (b, steps), dev)?.to_dtype(logits.dtype())?;
    let picked = logp.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?;
    Ok(((picked * w)?.sum_all()? * (-1.0 / b as f64))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub counting: f64,
    /// One smooth-L1 term per counting branch; their sum is `counting`.
    pub branches: Vec<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.counting.is_finite()
    }
}

/// `L = L_cls + sum of branch counting terms`, as a differentiable scalar
/// together with its scalar breakdown.
pub fn total_loss(cls: &Tensor, branch_terms: &[Tensor]) -> Result<(Tensor, LossBreakdown)> {
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut total = cls.clone();
    let mut branches = Vec::with_capacity(branch_terms.len());
    for term in branch_terms {
        total = (total + term)?;
        branches.push(scalar(term)?);
    }
    let cls_v = scalar(cls)?;
    let counting: f64 = branches.iter().sum();
    Ok((
        total,
        LossBreakdown {
            total: cls_v + counting,
            cls: cls_v,
            counting,
            branches,
        },
    ))
}
