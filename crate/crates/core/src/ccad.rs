//! Counting-combined attentional decoder.
//!
//! A GRU consumes the embedding of the previous symbol. Coverage attention
//! over the transformed feature map (plus a fixed 2-D sinusoidal encoding)
//! yields a context vector, and the symbol classifier combines context,
//! hidden state, embedding and the global counting vector.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{masked_softmax_last, softmax_last, Conv2d, Dropout, Embedding, GruCell, Linear, Mode, Scope};
use crate::vocab::{EOS_ID, SOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub attention: usize,
    pub context: usize,
    pub coverage_kernel: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn full() -> Self {
        Self {
            hidden: 256,
            embedding: 256,
            attention: 512,
            context: 256,
            coverage_kernel: 11,
            dropout: 0.5,
            max_len: 200,
        }
    }

    pub fn desk() -> Self {
        Self {
            hidden: 128,
            embedding: 64,
            attention: 128,
            context: 128,
            coverage_kernel: 11,
            dropout: 0.2,
            max_len: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.attention.is_multiple_of(4) {
            return Err(Error::Config("attention width must be divisible by 4".into()));
        }
        if self.coverage_kernel.is_multiple_of(2) || self.hidden == 0 || self.embedding == 0 || self.context == 0 {
            return Err(Error::Config("invalid decoder geometry".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Fixed `(H*W, d)` sinusoidal encoding, row-major over the grid. The first
/// `d/2` channels encode the column index and the last `d/2` the row index,
/// each as interleaved `sin`/`cos` of `pos / 10000^(4i/d)`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for i in 0..quarter {
                let freq = 10000f64.powf(4.0 * i as f64 / d as f64);
                let (xs, ys) = (x as f64 / freq, y as f64 / freq);
                row[2 * i] = xs.sin();
                row[2 * i + 1] = xs.cos();
                row[half + 2 * i] = ys.sin();
                row[half + 2 * i + 1] = ys.cos();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    /// `(B, hidden)`
    pub hidden: Tensor,
    /// `(B, H*W)` running sum of past attention weights.
    pub coverage: Tensor,
    pub step: usize,
}

/// Per-image tensors reused by every decoding step.
pub struct DecoderInputs {
    pub height: usize,
    pub width: usize,
    /// `(B, N, D)`
    pub features: Tensor,
    /// `(B, N, A)`: transformed features plus positional encoding.
    pub keys: Tensor,
    /// `(B, N)`
    pub mask: Tensor,
    /// `(B, C)` counting vector, when the classifier uses one.
    pub counts: Option<Tensor>,
}

impl DecoderInputs {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.features.dim(0)?)
    }
}

pub struct StepOutput {
    /// `(B, C)` unnormalised scores.
    pub logits: Tensor,
    /// `(B, N)`
    pub alpha: Tensor,
    pub state: DecoderState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Starts with `sos`; ends with `eos` unless truncated.
    pub ids: Vec<usize>,
    pub truncated: bool,
    /// One `H*W` attention map per emitted symbol, row-major.
    pub alphas: Vec<Vec<f32>>,
}

pub struct Decoder {
    config: DecoderConfig,
    classes: usize,
    use_positional: bool,
    pub init: Linear,
    pub embedding: Embedding,
    pub gru: GruCell,
    pub feature_proj: Linear,
    pub coverage_conv: Conv2d,
    pub hidden_proj: Linear,
    pub energy: Linear,
    pub context_proj: Linear,
    pub context_weight: Linear,
    pub count_weight: Option<Linear>,
    pub state_weight: Linear,
    pub embed_weight: Linear,
    pub classifier: Linear,
    dropout: Dropout,
}

impl Decoder {
    pub fn new(
        scope: &mut Scope<'_>,
        config: &DecoderConfig,
        features: usize,
        classes: usize,
        use_positional: bool,
        use_counts: bool,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Self {
            config: c.clone(),
            classes,
            use_positional,
            init: Linear::new(&mut scope.pp("init"), features, c.hidden, true)?,
            embedding: Embedding::new(&mut scope.pp("embedding"), classes, c.embedding)?,
            gru: GruCell::new(&mut scope.pp("gru"), c.embedding, c.hidden)?,
            feature_proj: Linear::new(&mut scope.pp("feature_proj"), features, c.attention, true)?,
            coverage_conv: Conv2d::new(&mut scope.pp("coverage_conv"), 1, c.attention, c.coverage_kernel, 1, false)?,
            hidden_proj: Linear::new(&mut scope.pp("hidden_proj"), c.hidden, c.attention, false)?,
            energy: Linear::new(&mut scope.pp("energy"), c.attention, 1, true)?,
            context_proj: Linear::new(&mut scope.pp("context_proj"), features, c.context, false)?,
            context_weight: Linear::new(&mut scope.pp("context_weight"), c.context, c.hidden, true)?,
            count_weight: if use_counts {
                Some(Linear::new(&mut scope.pp("count_weight"), classes, c.hidden, true)?)
            } else {
                None
            },
            state_weight: Linear::new(&mut scope.pp("state_weight"), c.hidden, c.hidden, true)?,
            embed_weight: Linear::new(&mut scope.pp("embed_weight"), c.embedding, c.hidden, true)?,
            classifier: Linear::new(&mut scope.pp("classifier"), c.hidden, classes, true)?,
            dropout: Dropout { p: c.dropout },
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn uses_counts(&self) -> bool {
        self.count_weight.is_some()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prepare(&self, f: &FeatureMap, counts: Option<&Tensor>) -> Result<DecoderInputs> {
        let (b, h, w, _) = f.dims()?;
        if self.uses_counts() && counts.is_none() {
            return Err(Error::Config("decoder expects a counting vector".into()));
        }
        let features = f.flat()?;
        let mut keys = self.feature_proj.forward(&features)?;
        if self.use_positional {
            let pe = positional_encoding(h, w, self.config.attention)?;
            let pe = Tensor::from_vec(pe, (1, h * w, self.config.attention), features.device())?
                .to_dtype(features.dtype())?;
            keys = keys.broadcast_add(&pe)?;
        }
        let counts = match counts {
            Some(v) if self.uses_counts() => {
                if v.dims() != [b, self.classes] {
                    return Err(Error::Shape(format!("counting vector {:?} for batch {b}", v.dims())));
                }
                Some(v.clone())
            }
            _ => None,
        };
        Ok(DecoderInputs {
            height: h,
            width: w,
            features,
            keys,
            mask: f.flat_mask()?,
            counts,
        })
    }

    pub fn initial_state(&self, inputs: &DecoderInputs) -> Result<DecoderState> {
        let m = inputs.mask.unsqueeze(D::Minus1)?;
        let mean = inputs.features.broadcast_mul(&m)?.sum(1)?.broadcast_div(&m.sum(1)?)?;
        let hidden = self.init.forward(&mean)?.tanh()?;
        Ok(DecoderState {
            hidden,
            coverage: inputs.mask.zeros_like()?,
            step: 0,
        })
    }

    /// Attention energies `e = w^T tanh(T + P + W_a A + W_h h) + b`, `(B, N)`.
    pub fn energies(&self, inputs: &DecoderInputs, hidden: &Tensor, coverage: &Tensor) -> Result<Tensor> {
        let b = coverage.dim(0)?;
        let cov = coverage.reshape((b, inputs.height, inputs.width, 1))?;
        let cov = self
            .coverage_conv
            .forward(&cov)?
            .reshape((b, inputs.height * inputs.width, self.config.attention))?;
        let query = self.hidden_proj.forward(hidden)?.unsqueeze(1)?;
        let act = inputs.keys.add(&cov)?.broadcast_add(&query)?.tanh()?;
        Ok(self.energy.forward(&act)?.squeeze(D::Minus1)?)
    }

    /// Attention weights over valid cells, `(B, N)`.
    pub fn attention_step(&self, inputs: &DecoderInputs, hidden: &Tensor, coverage: &Tensor) -> Result<Tensor> {
        let e = self.energies(inputs, hidden, coverage)?;
        masked_softmax_last(&e, &inputs.mask)
    }

    /// Attention-weighted sum of the feature map, `(B, D)`, before projection.
    pub fn attended_features(&self, inputs: &DecoderInputs, alpha: &Tensor) -> Result<Tensor> {
        Ok(alpha.unsqueeze(1)?.matmul(&inputs.features)?.squeeze(1)?)
    }

    /// Context vector `(B, context)`.
    pub fn context_vector(&self, inputs: &DecoderInputs, alpha: &Tensor) -> Result<Tensor> {
        self.context_proj.forward(&self.attended_features(inputs, alpha)?)
    }

    pub fn decode_step(
        &self,
        inputs: &DecoderInputs,
        state: &DecoderState,
        prev: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<StepOutput> {
        if let Some(&bad) = prev.iter().find(|&&id| id >= self.classes) {
            return Err(Error::InvalidId { id: bad, size: self.classes });
        }
        let embed = self.embedding.forward(prev)?;
        let hidden = self.gru.forward(&embed, &state.hidden)?;
        let alpha = self.attention_step(inputs, &hidden, &state.coverage)?;
        let context = self.context_vector(inputs, &alpha)?;
        let mut out = self.context_weight.forward(&context)?;
        out = (out + self.state_weight.forward(&hidden)?)?;
        out = (out + self.embed_weight.forward(&embed)?)?;
        if let (Some(wv), Some(v)) = (&self.count_weight, &inputs.counts) {
            out = (out + wv.forward(v)?)?;
        }
        let out = self.dropout.forward(&out, mode)?;
        let logits = self.classifier.forward(&out)?;
        let coverage = (&state.coverage + &alpha)?;
        Ok(StepOutput {
            logits,
            alpha,
            state: DecoderState {
                hidden,
                coverage,
                step: state.step + 1,
            },
        })
    }

    /// Teacher-forced logits `(B, L-1, C)` for targets padded to length `L`.
    pub fn teacher_forced_logits(
        &self,
        inputs: &DecoderInputs,
        targets: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let len = targets.first().map(Vec::len).ok_or(Error::Empty("targets"))?;
        if len < 2 || targets.iter().any(|t| t.len() != len) {
            return Err(Error::Shape("targets must share a length of at least 2".into()));
        }
        let mut state = self.initial_state(inputs)?;
        let mut rows = Vec::with_capacity(len - 1);
        for t in 1..len {
            let prev: Vec<usize> = targets.iter().map(|s| s[t - 1]).collect();
            let step = self.decode_step(inputs, &state, &prev, mode)?;
            rows.push(step.logits);
            state = step.state;
        }
        Ok(Tensor::stack(&rows, 1)?)
    }

    /// Probability rows `(B, L-1, C)` under teacher forcing.
    pub fn teacher_forced_probs(
        &self,
        inputs: &DecoderInputs,
        targets: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        softmax_last(&self.teacher_forced_logits(inputs, targets, mode)?)
    }

    /// Argmax decoding from `sos` until `eos` or `max_len` symbols (incl. `sos`).
    pub fn greedy_decode(&self, inputs: &DecoderInputs, max_len: usize) -> Result<Vec<Decoded>> {
        let b = inputs.batch()?;
        let mut out: Vec<Decoded> = (0..b)
            .map(|_| Decoded {
                ids: vec![SOS_ID],
                truncated: false,
                alphas: Vec::new(),
            })
            .collect();
        let mut done = vec![false; b];
        let mut state = self.initial_state(inputs)?;
        let mut prev = vec![SOS_ID; b];
        let mut mode = Mode::Eval;
        while out.iter().zip(&done).any(|(d, &f)| !f && d.ids.len() < max_len) {
            let step = self.decode_step(inputs, &state, &prev, &mut mode)?;
            let best = argmax_rows(&step.logits)?;
            let alpha: Vec<Vec<f32>> = step.alpha.to_dtype(DType::F32)?.to_vec2()?;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                out[i].ids.push(best[i]);
                out[i].alphas.push(alpha[i].clone());
                if best[i] == EOS_ID {
                    done[i] = true;
                } else if out[i].ids.len() >= max_len {
                    out[i].truncated = true;
                    done[i] = true;
                }
            }
            prev = best;
            state = step.state;
        }
        for d in out.iter_mut() {
            if !d.truncated && d.ids.last() != Some(&EOS_ID) {
                d.truncated = true;
            }
        }
        Ok(out)
    }

    /// Analytic multiply-accumulate count: one-off projections plus `steps`
    /// decoding steps over an `h x w` grid.
    pub fn macs(&self, h: usize, w: usize, features: usize, steps: usize) -> u64 {
        let n = (h * w) as u64;
        let c = &self.config;
        let setup = n * (features * c.attention) as u64 + (features * c.hidden) as u64;
        let mut step = self.gru.macs(c.embedding)
            + self.coverage_conv.macs(h, w)
            + (c.hidden * c.attention) as u64
            + n * c.attention as u64
            + n * features as u64
            + (features * c.context) as u64
            + (c.context * c.hidden + c.hidden * c.hidden + c.embedding * c.hidden) as u64
            + (c.hidden * self.classes) as u64;
        if self.uses_counts() {
            step += (self.classes * c.hidden) as u64;
        }
        setup + steps as u64 * step
    }
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|i| i as usize)
        .collect())
}

/// Convenience for tests and tools: a `(B, N)` all-valid mask.
pub fn full_mask(b: usize, n: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::ones((b, n), dtype, &Device::Cpu)?)
}
