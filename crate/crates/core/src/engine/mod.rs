//! Training, evaluation, checkpointing and the experiment harnesses.

mod ablation;
pub mod optim;

pub use ablation::{ablation_suite, count_feed_study, AblationRow, AblationTable, FeedRow, FeedStudy};
pub use optim::{clip_scale, grad_norm, Optimizer, OptimizerConfig};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{counting_metrics, edit_distance, rates_from_distances, EvalReport, RunMetadata, SampleRecord};
use crate::model::{CanModel, CountFeed, ModelConfig, ParamCounts};
use crate::objective::LossBreakdown;
use crate::synth::{augment, pad_batch, AugmentConfig, FormulaSample};
use crate::vocab::{strip_framing, SymbolVocabulary};
use crate::{Error, Result};

/// Learning-rate multiplier: linear from 0 to 1 across the first epoch, then
/// cosine decay reaching 0 at the final step.
pub fn lr_at(step: usize, steps_per_epoch: usize, total_epochs: usize) -> Result<f64> {
    let total = steps_per_epoch * total_epochs;
    if step >= total {
        return Err(Error::ScheduleRange { step, total });
    }
    if step <= steps_per_epoch {
        return Ok(step as f64 / steps_per_epoch as f64);
    }
    let span = (total - 1 - steps_per_epoch).max(1) as f64;
    let progress = (step - steps_per_epoch) as f64 / span;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Peak step size; the schedule scales it from 0 up to this and back to 0.
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub validation_fraction: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub count_feed: CountFeed,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 60,
            lr: OptimizerConfig::ADAM.default_lr(),
            optimizer: OptimizerConfig::ADAM,
            grad_clip: 100.0,
            seed: 0,
            augment: false,
            augmentation: AugmentConfig::default(),
            validation_fraction: 0.1,
            eval_every: 5,
            count_feed: CountFeed::Off,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes, epochs and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.count_feed.validate()
    }
}

/// Deterministic train/validation split of a corpus.
pub fn split_corpus(corpus: &[FormulaSample], fraction: f64, seed: u64) -> (Vec<FormulaSample>, Vec<FormulaSample>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_val = ((corpus.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(corpus.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| corpus[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(val))
}

/// Hex SHA-256 of any serialisable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Short content hash of sample ids, labels and pixels.
pub fn dataset_id(samples: &[FormulaSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update([0]);
        h.update(s.markup.as_bytes());
        h.update([0]);
        for v in &s.image.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seconds: f64,
    pub mean_loss: f64,
    pub mean_cls: f64,
    pub mean_counting: f64,
    pub validation: Option<EvalSummary>,
}

/// Headline numbers of an [`EvalReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub exprate: f64,
    pub leq1: f64,
    pub leq2: f64,
    pub mae_ave: Option<f64>,
    pub mse_ave: Option<f64>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self { exprate: r.exprate, leq1: r.leq1, leq2: r.leq2, mae_ave: r.mae_ave, mse_ave: r.mse_ave }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: Option<EvalSummary>,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    pub params: ParamCounts,
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

fn snapshot(vars: &[(String, Var)]) -> Result<Vec<Tensor>> {
    Ok(vars.iter().map(|(_, v)| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>()?)
}

fn restore(vars: &[(String, Var)], values: &[Tensor]) -> Result<()> {
    for ((_, v), t) in vars.iter().zip(values) {
        v.set(t)?;
    }
    Ok(())
}

/// Batches of similar width: shuffle, sort windows of several batches by
/// width, cut into batches, then shuffle the batch order.
fn epoch_batches(samples: &[FormulaSample], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(rng);
    let mut batches = Vec::new();
    for window in idx.chunks(batch * 4) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| (samples[i].image.width, samples[i].image.height, i));
        batches.extend(w.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains `model` in place on `train`, selecting the weights with the best
/// validation ExpRate (the final weights when `validation` is empty).
pub fn train(
    config: &TrainConfig,
    model: &mut CanModel,
    vocab: &SymbolVocabulary,
    train: &[FormulaSample],
    validation: &[FormulaSample],
    out: &RunOutput,
) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if vocab.len() != model.classes {
        return Err(Error::VocabMismatch { checkpoint: format!("{} classes", model.classes), dataset: format!("{} classes", vocab.len()) });
    }
    let started = Instant::now();
    let hash = config_hash(&(&model.config, config))?;
    let invisible = vocab.invisible_ids();
    let vars: Vec<Var> = model.store.params().iter().map(|(_, v)| v.clone()).collect();
    let all_vars: Vec<(String, Var)> = model.store.all().cloned().collect();
    let mut opt = Optimizer::new(config.optimizer, &vars)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = match &out.dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(fs::File::create(d.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(steps_per_epoch * config.epochs);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>, EvalSummary)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let batches = epoch_batches(train, config.batch_size, &mut rng);
        let (mut loss_sum, mut cls_sum, mut count_sum) = (0.0, 0.0, 0.0);
        for b in &batches {
            let augmented: Vec<FormulaSample>;
            let refs: Vec<&FormulaSample> = if config.augment {
                augmented = b
                    .iter()
                    .map(|&i| {
                        let mut s = train[i].clone();
                        s.image = augment(&s.image, &config.augmentation, rng.random());
                        s
                    })
                    .collect();
                augmented.iter().collect()
            } else {
                b.iter().map(|&i| &train[i]).collect()
            };
            let batch = pad_batch(&refs)?;
            let (loss, breakdown) = model.loss(&batch, config.count_feed, &invisible, &mut rng, true)?;
            if !breakdown.is_finite() {
                return Err(Error::NonFiniteLoss { step, cls: breakdown.cls, counting: breakdown.counting });
            }
            let grads = loss.backward()?;
            let norm = grad_norm(&grads, &vars)?;
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { step, cls: breakdown.cls, counting: breakdown.counting });
            }
            let lr = config.lr * lr_at(step, steps_per_epoch, config.epochs)?;
            opt.step(&grads, lr, clip_scale(norm, config.grad_clip))?;
            loss_sum += breakdown.total;
            cls_sum += breakdown.cls;
            count_sum += breakdown.counting;
            let record = StepRecord { step, epoch, lr, grad_norm: norm, loss: breakdown };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&serde_json::json!({ "kind": "step", "record": &record }))?)?;
            }
            steps.push(record);
            step += 1;
        }
        let validate = !validation.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let summary = if validate {
            let report = evaluate(model, vocab, validation, &EvalOptions::from_train(config), RunMetadata::default())?;
            let s = EvalSummary::from(&report);
            if best.as_ref().is_none_or(|(e, ..)| s.exprate > *e) {
                best = Some((s.exprate, epoch, snapshot(&all_vars)?, s));
            }
            Some(s)
        } else {
            None
        };
        let nb = batches.len() as f64;
        let rec = EpochRecord {
            epoch,
            seconds: t0.elapsed().as_secs_f64(),
            mean_loss: loss_sum / nb,
            mean_cls: cls_sum / nb,
            mean_counting: count_sum / nb,
            validation: summary,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, counting {:.4}) validation {:?} ({:.1}s)",
            rec.mean_loss,
            rec.mean_cls,
            rec.mean_counting,
            rec.validation.map(|v| v.exprate),
            rec.seconds
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&serde_json::json!({ "kind": "epoch", "record": &rec }))?)?;
            f.flush()?;
        }
        epochs.push(rec);
    }
    let (best_epoch, best_validation) = match best {
        Some((_, epoch, weights, s)) => {
            restore(&all_vars, &weights)?;
            (epoch, Some(s))
        }
        None => (config.epochs, None),
    };
    let checkpoint = match &out.dir {
        Some(d) => {
            let path = d.join("best.safetensors");
            let mut meta = HashMap::new();
            meta.insert("config_hash".into(), hash.clone());
            meta.insert("count_feed".into(), serde_json::to_string(&config.count_feed)?);
            meta.insert("epoch".into(), best_epoch.to_string());
            model.save(&path, vocab, &meta)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunRecord {
        config_hash: hash,
        steps,
        epochs,
        best_epoch,
        best_validation,
        checkpoint,
        wall_seconds: started.elapsed().as_secs_f64(),
        params: model.param_counts(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub count_feed: CountFeed,
    pub batch_size: usize,
    /// Seed for perturbed count feeds.
    pub seed: u64,
    pub max_len: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { count_feed: CountFeed::Off, batch_size: 16, seed: 0, max_len: None }
    }
}

impl EvalOptions {
    pub fn from_train(c: &TrainConfig) -> Self {
        Self { count_feed: c.count_feed, batch_size: c.eval_batch_size, seed: c.seed, max_len: None }
    }
}

/// Greedy-decodes every sample and scores it; deterministic for fixed weights.
pub fn evaluate(
    model: &CanModel,
    vocab: &SymbolVocabulary,
    samples: &[FormulaSample],
    options: &EvalOptions,
    metadata: RunMetadata,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let invisible = vocab.invisible_ids();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| (samples[i].image.width, samples[i].image.height, i));
    let mut records: Vec<Option<SampleRecord>> = vec![None; samples.len()];
    let mut count_pairs: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; samples.len()];
    for (bi, chunk) in order.chunks(options.batch_size.max(1)).enumerate() {
        let refs: Vec<&FormulaSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let batch = pad_batch(&refs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0xe7a1);
        rng.set_stream(bi as u64);
        let preds = model.predict(&batch, options.count_feed, &invisible, &mut rng, options.max_len)?;
        for (&i, p) in chunk.iter().zip(preds) {
            let s = &samples[i];
            let target = s.tokens.ids();
            let count_error = match &p.counts {
                Some(c) => c.iter().zip(s.counts.as_slice()).map(|(a, b)| a - b).collect(),
                None => Vec::new(),
            };
            if let Some(c) = p.counts {
                count_pairs[i] = Some((c, s.counts.0.clone()));
            }
            records[i] = Some(SampleRecord {
                id: s.id.clone(),
                predicted: vocab.join_ids(strip_framing(&p.decoded.ids))?,
                target: s.markup.clone(),
                edit_distance: edit_distance(&p.decoded.ids, target),
                truncated: p.decoded.truncated,
                count_error,
            });
        }
    }
    let per_sample: Vec<SampleRecord> = records.into_iter().map(|r| r.expect("every sample decoded")).collect();
    let distances: Vec<usize> = per_sample.iter().map(|r| r.edit_distance).collect();
    let (exprate, leq1, leq2) = rates_from_distances(&distances)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = count_pairs.into_iter().flatten().collect();
    let (mae_ave, mse_ave) = if pairs.len() == samples.len() {
        let (a, m) = counting_metrics(&pairs)?;
        (Some(a), Some(m))
    } else {
        (None, None)
    };
    Ok(EvalReport { exprate, leq1, leq2, mae_ave, mse_ave, per_sample, metadata })
}

/// Short content hash of a checkpoint file.
pub fn checkpoint_id(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?))[..16].to_string())
}

/// Loads a checkpoint and evaluates it, refusing a dataset built on another vocabulary.
pub fn evaluate_checkpoint(
    path: impl AsRef<Path>,
    dataset_vocab: &SymbolVocabulary,
    samples: &[FormulaSample],
    options: Option<EvalOptions>,
) -> Result<EvalReport> {
    let path = path.as_ref();
    let (model, ckpt) = CanModel::load(path)?;
    if ckpt.vocab_hash != dataset_vocab.hash() {
        return Err(Error::VocabMismatch { checkpoint: ckpt.vocab_hash, dataset: dataset_vocab.hash() });
    }
    let options = match options {
        Some(o) => o,
        None => {
            let feed = match ckpt.metadata.get("count_feed") {
                Some(f) => serde_json::from_str(f)?,
                None => CountFeed::Off,
            };
            EvalOptions { count_feed: feed, ..EvalOptions::default() }
        }
    };
    let metadata = RunMetadata {
        config_hash: ckpt.metadata.get("config_hash").cloned().unwrap_or_else(|| config_hash(&model.config).unwrap_or_default()),
        checkpoint_id: checkpoint_id(path)?,
        dataset_id: dataset_id(samples),
    };
    evaluate(&model, dataset_vocab, samples, &options, metadata)
}

/// Parameter count and multiply-accumulates for one `1 x 1 x h x w` input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: ParamCounts,
    pub macs: u64,
    pub height: usize,
    pub width: usize,
    pub decode_steps: usize,
}

/// Decoding steps assumed by the complexity estimate.
pub const REFERENCE_DECODE_STEPS: usize = 50;

pub fn complexity_report(config: &ModelConfig, classes: usize, height: usize, width: usize) -> Result<Complexity> {
    let model = CanModel::new(config, classes, candle_core::DType::F32, 0)?;
    Ok(Complexity {
        params: model.param_counts(),
        macs: model.macs(height, width, REFERENCE_DECODE_STEPS),
        height,
        width,
        decode_steps: REFERENCE_DECODE_STEPS,
    })
}
