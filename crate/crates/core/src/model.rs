//! The full network: encoder, optional counting module and counting-aware decoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccad::{Decoded, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap, DOWNSAMPLE};
use crate::mscm::{Mscm, MscmConfig, MscmOutput};
use crate::nn::{Mode, ParamStore};
use crate::objective::{cls_loss_tensor, counting_loss_tensor, total_loss, LossBreakdown};
use crate::synth::Batch;
use crate::vocab::SymbolVocabulary;
use crate::{Error, Result};

/// Component switches; they change which parameters exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub positional_encoding: bool,
    /// Train the counting module with its own loss.
    pub joint_optimization: bool,
    /// Feed a counting vector into the symbol classifier.
    pub counting_vector: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self { positional_encoding: false, joint_optimization: false, counting_vector: false };
    pub const FULL: Self = Self { positional_encoding: true, joint_optimization: true, counting_vector: true };

    /// The four cumulative rows of the component study, in order.
    pub fn ladder() -> [(&'static str, Self); 4] {
        [
            ("baseline", Self::BASELINE),
            ("+positional_encoding", Self { positional_encoding: true, ..Self::BASELINE }),
            ("+joint_optimization", Self { positional_encoding: true, joint_optimization: true, counting_vector: false }),
            ("+counting_vector", Self::FULL),
        ]
    }

    pub fn has_counting_module(&self) -> bool {
        self.joint_optimization || self.counting_vector
    }
}

/// Source of the counting vector consumed by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountFeed {
    /// The counting module's fused prediction.
    #[default]
    Off,
    /// Ground-truth counts.
    Exact,
    /// Ground truth where each visible class moves by +-1 (clamped at 0) with probability `p`.
    Perturbed(f64),
}

impl CountFeed {
    pub fn validate(&self) -> Result<()> {
        match self {
            CountFeed::Perturbed(p) if !(0.0..=1.0).contains(p) => {
                Err(Error::Config(format!("perturbation probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CountFeed::Off => "off".into(),
            CountFeed::Exact => "exact".into(),
            CountFeed::Perturbed(p) => format!("perturbed({p})"),
        }
    }
}

/// Adds or subtracts 1 with probability `p` at every class present in `counts`
/// and not in `frozen`. Absent classes stay at 0, so the disturbance scales with
/// the formula rather than the vocabulary.
pub fn perturb_counts(counts: &[f64], p: f64, frozen: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            // Draw for every class so the stream does not depend on which are eligible.
            let hit = rng.random_bool(p);
            let up = rng.random_bool(0.5);
            if !hit || c <= 0.0 || frozen.contains(&i) {
                c
            } else if up {
                c + 1.0
            } else {
                (c - 1.0).max(0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mscm: MscmConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            mscm: MscmConfig::full(),
            decoder: DecoderConfig::full(),
            ablation: AblationFlags::FULL,
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            mscm: MscmConfig::desk(),
            decoder: DecoderConfig::desk(),
            ablation: AblationFlags::FULL,
        }
    }

    pub fn with_ablation(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mscm.validate()?;
        self.decoder.validate()
    }
}

/// Parameter totals by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub mscm: usize,
    pub decoder: usize,
    pub total: usize,
}

/// Per-sample inference result.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub decoded: Decoded,
    /// Fused counting-module output, when the module exists.
    pub counts: Option<Vec<f64>>,
}

pub struct CanModel {
    pub config: ModelConfig,
    pub classes: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mscm: Option<Mscm>,
    pub decoder: Decoder,
}

/// Image, mask and count tensors of a padded batch.
pub struct BatchTensors {
    pub images: Tensor,
    pub mask: Tensor,
    pub counts: Tensor,
}

impl BatchTensors {
    pub fn new(batch: &Batch, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let shape = (batch.batch, batch.height, batch.width, 1);
        Ok(Self {
            images: Tensor::from_slice(&batch.images, shape, &dev)?.to_dtype(dtype)?,
            mask: Tensor::from_slice(&batch.mask, shape, &dev)?.to_dtype(dtype)?,
            counts: Tensor::from_slice(&batch.counts, (batch.batch, batch.classes), &dev)?.to_dtype(dtype)?,
        })
    }
}

impl CanModel {
    pub fn new(config: &ModelConfig, classes: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 3 {
            return Err(Error::Config("vocabulary needs at least one symbol besides sos and eos".into()));
        }
        let mut store = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut store.root().pp("encoder"), &config.encoder)?;
        let features = config.encoder.out_channels;
        let mscm = if config.ablation.has_counting_module() {
            Some(Mscm::new(&mut store.root().pp("mscm"), features, classes, &config.mscm)?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &mut store.root().pp("decoder"),
            &config.decoder,
            features,
            classes,
            config.ablation.positional_encoding,
            config.ablation.counting_vector,
        )?;
        Ok(Self { config: config.clone(), classes, store, encoder, mscm, decoder })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            encoder: self.store.num_trainable_under("encoder."),
            mscm: self.store.num_trainable_under("mscm."),
            decoder: self.store.num_trainable_under("decoder."),
            total: self.store.num_trainable(),
        }
    }

    /// Multiply-accumulates for one `h x w` image (padded up to multiples of 16)
    /// decoded for `steps` symbols.
    pub fn macs(&self, h: usize, w: usize, steps: usize) -> u64 {
        let (h, w) = (h.div_ceil(DOWNSAMPLE) * DOWNSAMPLE, w.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
        let (fh, fw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let counting = self.mscm.as_ref().map_or(0, |m| m.macs(fh, fw));
        self.encoder.macs(h, w) + counting + self.decoder.macs(fh, fw, self.config.encoder.out_channels, steps)
    }

    pub fn features(&self, t: &BatchTensors, mode: &Mode<'_>) -> Result<FeatureMap> {
        self.encoder.encode(&t.images, &t.mask, mode)
    }

    pub fn counting(&self, f: &FeatureMap, mode: &Mode<'_>) -> Result<Option<MscmOutput>> {
        self.mscm.as_ref().map(|m| m.forward(f, mode)).transpose()
    }

    /// The counting vector handed to the decoder under `feed`, or `None` when
    /// the decoder has no counting input.
    pub fn decoder_counts(
        &self,
        predicted: Option<&MscmOutput>,
        batch: &Batch,
        feed: CountFeed,
        vocab_invisible: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Tensor>> {
        if !self.config.ablation.counting_vector {
            return Ok(None);
        }
        let gt = |rows: Vec<f64>| -> Result<Option<Tensor>> {
            Ok(Some(Tensor::from_vec(rows, (batch.batch, batch.classes), &Device::Cpu)?.to_dtype(self.dtype())?))
        };
        match feed {
            CountFeed::Off => {
                let v = predicted.ok_or_else(|| Error::Config("counting vector requested without a counting module".into()))?;
                Ok(Some(if self.config.ablation.joint_optimization { v.fused.clone() } else { v.fused.detach() }))
            }
            CountFeed::Exact => gt(batch.counts.clone()),
            CountFeed::Perturbed(p) => {
                let rows = batch
                    .counts
                    .chunks(batch.classes)
                    .flat_map(|row| perturb_counts(row, p, vocab_invisible, rng))
                    .collect();
                gt(rows)
            }
        }
    }

    /// Teacher-forced joint loss on one batch.
    pub fn loss(
        &self,
        batch: &Batch,
        feed: CountFeed,
        invisible: &[usize],
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<(Tensor, LossBreakdown)> {
        let t = BatchTensors::new(batch, self.dtype())?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let feed_seed: u64 = rng.random();
        let mut mode = if train { Mode::Train(&mut dropout_rng) } else { Mode::Eval };
        let f = self.features(&t, &mode)?;
        let counting = self.counting(&f, &mode)?;
        let mut feed_rng = ChaCha8Rng::seed_from_u64(feed_seed);
        let v = self.decoder_counts(counting.as_ref(), batch, feed, invisible, &mut feed_rng)?;
        let inputs = self.decoder.prepare(&f, v.as_ref())?;
        let logits = self.decoder.teacher_forced_logits(&inputs, &batch.targets, &mut mode)?;
        let cls = cls_loss_tensor(&logits, &batch.targets, &batch.lengths)?;
        let terms = match (&counting, self.config.ablation.joint_optimization) {
            (Some(out), true) => out
                .branch_vectors
                .iter()
                .map(|v| counting_loss_tensor(v, &t.counts))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        total_loss(&cls, &terms)
    }

    /// Greedy decoding of a batch. Perturbed feeds draw from `rng`.
    pub fn predict(
        &self,
        batch: &Batch,
        feed: CountFeed,
        invisible: &[usize],
        rng: &mut ChaCha8Rng,
        max_len: Option<usize>,
    ) -> Result<Vec<Prediction>> {
        let t = BatchTensors::new(batch, self.dtype())?;
        let mode = Mode::Eval;
        let f = self.features(&t, &mode)?;
        let counting = self.counting(&f, &mode)?;
        let v = self.decoder_counts(counting.as_ref(), batch, feed, invisible, rng)?;
        let inputs = self.decoder.prepare(&f, v.as_ref())?;
        let decoded = self.decoder.greedy_decode(&inputs, max_len.unwrap_or(self.config.decoder.max_len))?;
        let counts: Option<Vec<Vec<f64>>> = counting
            .map(|c| c.fused.to_dtype(DType::F64)?.to_vec2::<f64>())
            .transpose()?;
        Ok(decoded
            .into_iter()
            .enumerate()
            .map(|(i, decoded)| Prediction { decoded, counts: counts.as_ref().map(|c| c[i].clone()) })
            .collect())
    }

    /// Writes all weights and running statistics with config and vocabulary metadata.
    pub fn save(&self, path: impl AsRef<Path>, vocab: &SymbolVocabulary, extra: &HashMap<String, String>) -> Result<()> {
        if vocab.len() != self.classes {
            return Err(Error::LengthMismatch { expected: self.classes, actual: vocab.len() });
        }
        let mut meta = extra.clone();
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("vocab_hash".into(), vocab.hash());
        meta.insert("vocab".into(), vocab.to_file_string());
        meta.insert("dtype".into(), format!("{:?}", self.dtype()));
        let mut blobs = Vec::new();
        for (name, var) in self.store.all() {
            let t = var.as_tensor();
            let (dtype, bytes) = match t.dtype() {
                DType::F64 => (
                    safetensors::Dtype::F64,
                    t.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
                ),
                _ => (
                    safetensors::Dtype::F32,
                    t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
            };
            blobs.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views = blobs
            .iter()
            .map(|(n, d, s, b)| Ok((n.as_str(), safetensors::tensor::TensorView::new(*d, s.clone(), b).map_err(ckpt)?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, Some(meta), path.as_ref()).map_err(ckpt)
    }

    /// Rebuilds a model from a checkpoint written by [`CanModel::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint)> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(ckpt)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(ckpt)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing metadata {k:?}")));
        let config: ModelConfig = serde_json::from_str(&field("config")?)?;
        let vocab = SymbolVocabulary::parse(&field("vocab")?)?;
        let dtype = if field("dtype")? == "F64" { DType::F64 } else { DType::F32 };
        let model = Self::new(&config, vocab.len(), dtype, 0)?;
        for (name, var) in model.store.all() {
            let view = st.tensor(name).map_err(ckpt)?;
            if view.shape() != var.dims() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            let data = view.data();
            let t = match view.dtype() {
                safetensors::Dtype::F64 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for {name}"))),
            };
            var.set(&t.to_dtype(dtype)?)?;
        }
        if st.names().len() != model.store.all().count() {
            return Err(Error::Checkpoint("checkpoint has unexpected tensors".into()));
        }
        let vocab_hash = field("vocab_hash")?;
        if vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint("stored vocabulary does not match its hash".into()));
        }
        Ok((model, Checkpoint { vocab, vocab_hash, metadata: meta }))
    }
}

/// Metadata recovered with a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vocab: SymbolVocabulary,
    pub vocab_hash: String,
    pub metadata: HashMap<String, String>,
}

fn ckpt(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}
