//! Fixtures and finite-difference checks shared by the integration suites.
#![allow(dead_code)]

pub mod invariants;
pub mod oracles;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use can_hmer::ccad::{Decoder, DecoderConfig};
use can_hmer::encoder::{EncoderConfig, FeatureMap};
use can_hmer::model::{AblationFlags, CanModel, ModelConfig};
use can_hmer::mscm::{BranchConfig, MscmConfig};
use can_hmer::nn::ParamStore;
use can_hmer::synth::{desk_vocabulary, pad_batch, Batch, FormulaSample, Raster};
use can_hmer::vocab::SymbolVocabulary;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

pub fn tiny_decoder_config() -> DecoderConfig {
    DecoderConfig { hidden: 6, embedding: 4, attention: 8, context: 5, coverage_kernel: 3, dropout: 0.2, max_len: 12 }
}

pub fn tiny_branch(kernel: usize) -> BranchConfig {
    BranchConfig { kernel, intermediate: 8, reduction: 2 }
}

pub fn tiny_model_config(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stem_channels: 4,
            stem_kernel: 3,
            blocks: 3,
            layers_per_block: 1,
            growth: 2,
            bottleneck: 2,
            compression: 0.5,
            out_channels: 6,
        },
        mscm: MscmConfig { branches: vec![tiny_branch(3), tiny_branch(5)] },
        decoder: tiny_decoder_config(),
        ablation: flags,
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// `(B, H, W, 1)` mask whose second sample is valid only in its left `valid_w` columns.
pub fn ragged_mask(b: usize, h: usize, w: usize, valid_w: usize) -> Tensor {
    let mut m = vec![1f64; b * h * w];
    if b > 1 {
        for y in 0..h {
            for x in valid_w..w {
                m[(h + y) * w + x] = 0.0;
            }
        }
    }
    Tensor::from_vec(m, (b, h, w, 1), &Device::Cpu).unwrap()
}

pub fn feature_map(b: usize, h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(random_tensor(&[b, h, w, d], -1.0, 1.0, &mut rng), ragged_mask(b, h, w, w - 1)).unwrap()
}

pub fn noise_raster(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut r = Raster::zeros(h, w);
    for v in r.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    r
}

/// Two noise images of different widths with short labels, padded into one batch.
pub fn tiny_batch(vocab: &SymbolVocabulary, seed: u64) -> (Vec<FormulaSample>, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = vec![
        FormulaSample::new("a", noise_raster(32, 48, &mut rng), "x ^ { 2 } + 1", vocab).unwrap(),
        FormulaSample::new("b", noise_raster(32, 32, &mut rng), "a = b", vocab).unwrap(),
    ];
    let batch = pad_batch(&samples.iter().collect::<Vec<_>>()).unwrap();
    (samples, batch)
}

pub fn tiny_model(flags: AblationFlags, seed: u64) -> (SymbolVocabulary, CanModel) {
    let vocab = desk_vocabulary();
    let model = CanModel::new(&tiny_model_config(flags), vocab.len(), DType::F64, seed).unwrap();
    (vocab, model)
}

pub fn tiny_decoder(features: usize, classes: usize, use_counts: bool) -> (ParamStore, Decoder) {
    let mut s = ParamStore::new(DType::F64, 5);
    let d = Decoder::new(&mut s.root().pp("decoder"), &tiny_decoder_config(), features, classes, true, use_counts).unwrap();
    (s, d)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= TOLERANCE
    }
}

/// Compares the backward pass of `loss` against central differences at up to
/// `per_var` random entries of each variable.
pub fn check_gradients(name: &str, vars: &[(String, Var)], per_var: usize, seed: u64, loss: impl Fn() -> Tensor) -> GradReport {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { name: name.into(), checked: 0, max_rel_err: 0.0, worst: String::new() };
    for (vname, var) in vars {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let n = base.len();
        let picks: Vec<usize> = if n <= per_var { (0..n).collect() } else { (0..per_var).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss())
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
            let e = rel_err(analytic[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{vname}[{i}]: analytic {:.6e} numeric {numeric:.6e}", analytic[i]);
            }
        }
    }
    report
}

use can_hmer::mscm::{sum_pool, ChannelAttention, CountingBranch};
use can_hmer::nn::Mode;
use can_hmer::objective::{cls_loss_tensor, counting_loss_tensor};

fn weighted_sum(t: &Tensor, w: &Tensor) -> Tensor {
    t.mul(w).unwrap().sum_all().unwrap()
}

pub fn channel_attention_check() -> GradReport {
    let mut s = ParamStore::new(DType::F64, 11);
    let att = ChannelAttention::new(&mut s.root().pp("attention"), 8, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Var::from_tensor(&random_tensor(&[2, 3, 4, 8], -1.0, 1.0, &mut rng)).unwrap();
    let w = random_tensor(&[2, 3, 4, 8], -1.0, 1.0, &mut rng);
    let mask = ragged_mask(2, 3, 4, 2);
    let mut vars = s.params().to_vec();
    vars.push(("input".into(), input.clone()));
    check_gradients("channel attention", &vars, 12, 1, || weighted_sum(&att.forward(input.as_tensor(), &mask).unwrap(), &w))
}

/// Counting branch in training mode (batch statistics over valid cells),
/// scored by smooth-L1 between its pooled count vector and a target.
pub fn counting_branch_check() -> GradReport {
    let mut s = ParamStore::new(DType::F64, 12);
    let branch = CountingBranch::new(&mut s.root().pp("branch"), 6, 5, &tiny_branch(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = Var::from_tensor(&random_tensor(&[2, 3, 4, 6], -1.0, 1.0, &mut rng)).unwrap();
    let target = random_tensor(&[2, 5], 0.0, 3.0, &mut rng);
    let mask = ragged_mask(2, 3, 4, 3);
    let mut vars = s.params().to_vec();
    vars.push(("input".into(), input.clone()));
    check_gradients("counting branch", &vars, 10, 2, || {
        let f = FeatureMap::new(input.as_tensor().clone(), mask.clone()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let map = branch.counting_map(&f, &Mode::Train(&mut r)).unwrap();
        counting_loss_tensor(&sum_pool(&map).unwrap(), &target).unwrap()
    })
}

/// Smooth-L1 around residuals of magnitude `d`, both signs.
pub fn smooth_l1_check(d: f64) -> GradReport {
    let target = Tensor::new(&[[1.0f64, 2.0, 3.0, 0.5]], &Device::Cpu).unwrap();
    let pred = Var::new(&[[1.0 + d, 2.0 - d, 3.0 + 0.5 * d, 0.5 - 0.5 * d]], &Device::Cpu).unwrap();
    check_gradients(&format!("smooth-L1 |d|={d}"), &[("pred".into(), pred.clone())], 4, 0, || {
        counting_loss_tensor(pred.as_tensor(), &target).unwrap()
    })
}

/// Teacher-forced cross-entropy through the decoder, one report per parameter group.
pub fn decoder_checks() -> Vec<GradReport> {
    let vocab = desk_vocabulary();
    let c = vocab.len();
    let (store, dec) = tiny_decoder(6, c, true);
    let f = feature_map(2, 2, 3, 6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let counts = Var::from_tensor(&random_tensor(&[2, c], 0.0, 2.0, &mut rng)).unwrap();
    let t1 = vocab.tokenize("x ^ { 2 } + 1").unwrap().ids().to_vec();
    let mut t2 = vocab.tokenize("a = b").unwrap().ids().to_vec();
    let lengths = vec![t1.len(), t2.len()];
    t2.resize(t1.len(), can_hmer::vocab::EOS_ID);
    let targets = vec![t1, t2];
    let loss = || {
        let inputs = dec.prepare(&f, Some(counts.as_tensor())).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let logits = dec.teacher_forced_logits(&inputs, &targets, &mut Mode::Train(&mut r)).unwrap();
        cls_loss_tensor(&logits, &targets, &lengths).unwrap()
    };
    let groups = [
        "init", "embedding", "gru", "feature_proj", "coverage_conv", "hidden_proj", "energy", "context_proj",
        "context_weight", "count_weight", "state_weight", "embed_weight", "classifier",
    ];
    let mut out: Vec<GradReport> = groups
        .iter()
        .map(|g| {
            let prefix = format!("decoder.{g}.");
            let vars: Vec<(String, Var)> = store.params().iter().filter(|(n, _)| n.starts_with(&prefix)).cloned().collect();
            assert!(!vars.is_empty(), "no parameters under {prefix}");
            check_gradients(&format!("decoder {g}"), &vars, 6, 3, loss)
        })
        .collect();
    out.push(check_gradients("decoder count input", &[("counts".into(), counts.clone())], 6, 4, loss));
    out
}

/// The full joint objective of a tiny model in training mode, across every parameter tensor.
pub fn end_to_end_check() -> GradReport {
    let (vocab, model) = tiny_model(AblationFlags::FULL, 21);
    let (_, batch) = tiny_batch(&vocab, 22);
    let invisible = vocab.invisible_ids();
    check_gradients("full model", model.store.params(), 2, 5, || {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        model.loss(&batch, can_hmer::model::CountFeed::Off, &invisible, &mut r, true).unwrap().0
    })
}

/// Every gradient check, for reporting.
pub fn gradient_suite() -> Vec<GradReport> {
    let mut v = vec![channel_attention_check(), counting_branch_check()];
    v.extend([0.5, 1.0, 2.0].map(smooth_l1_check));
    v.extend(decoder_checks());
    v.push(end_to_end_check());
    v
}
