//! Property checks over the model components. Each returns `Err` with a
//! description of the first violation.

use std::collections::HashMap;

use candle_core::{DType, Device, IndexOp, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use can_hmer::ccad::DecoderState;
use can_hmer::encoder::{Encoder, FeatureMap};
use can_hmer::engine::{evaluate, EvalOptions};
use can_hmer::metrics::RunMetadata;
use can_hmer::model::{perturb_counts, AblationFlags, BatchTensors, CanModel};
use can_hmer::mscm::{fuse_branch_vectors, sum_pool, Mscm, MscmConfig};
use can_hmer::nn::{Mode, ParamStore};
use can_hmer::synth::{desk_vocabulary, pad_batch, FormulaSample};
use can_hmer::vocab::TokenSequence;

use super::*;

pub type Check = std::result::Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

/// Random masks with at least one valid cell per sample.
fn mask_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<bool>, u64)> {
    (1usize..3, 1usize..4, 1usize..6).prop_flat_map(|(b, h, w)| {
        (Just(b), Just(h), Just(w), proptest::collection::vec(any::<bool>(), b * h * w), any::<u64>())
    })
}

/// Attention weights are non-negative, sum to one over valid cells and are exactly zero on padding.
pub fn attention_normalization(cases: u32) -> Check {
    let (_s, dec) = tiny_decoder(6, 9, false);
    runner(cases)
        .run(&mask_strategy(), |(b, h, w, mut valid, seed)| {
            for i in 0..b {
                valid[i * h * w] = true;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let mask = Tensor::from_vec(mask, (b, h, w, 1), &Device::Cpu).unwrap();
            let f = FeatureMap::new(random_tensor(&[b, h, w, 6], -3.0, 3.0, &mut rng), mask).unwrap();
            let inputs = dec.prepare(&f, None).unwrap();
            let hidden = random_tensor(&[b, 6], -2.0, 2.0, &mut rng);
            let coverage = random_tensor(&[b, h * w], 0.0, 3.0, &mut rng).mul(&inputs.mask).unwrap();
            let alpha = flat(&dec.attention_step(&inputs, &hidden, &coverage).unwrap());
            for i in 0..b {
                let row = &alpha[i * h * w..(i + 1) * h * w];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(fail(format!("attention row sums to {sum}")));
                }
                for (j, &a) in row.iter().enumerate() {
                    if a < 0.0 || (!valid[i * h * w + j] && a != 0.0) {
                        return Err(fail(format!("weight {a} at cell {j} (valid {})", valid[i * h * w + j])));
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Coverage after `t` steps equals the sum of the `t` attention maps; masked cells stay at zero.
pub fn coverage_telescoping(cases: u32) -> Check {
    let vocab = desk_vocabulary();
    let (_s, dec) = tiny_decoder(6, vocab.len(), false);
    runner(cases)
        .run(&(any::<u64>(), 1usize..12), |(seed, steps)| {
            let f = feature_map(2, 2, 4, 6, seed);
            let inputs = dec.prepare(&f, None).unwrap();
            let mut state: DecoderState = dec.initial_state(&inputs).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = vec![0.0; 16];
            let valid = flat(&inputs.mask);
            for _ in 0..steps {
                let prev: Vec<usize> = (0..2).map(|_| rng.random_range(0..vocab.len())).collect();
                let out = dec.decode_step(&inputs, &state, &prev, &mut Mode::Eval).unwrap();
                let alpha = flat(&out.alpha);
                for (t, a) in total.iter_mut().zip(&alpha) {
                    *t += a;
                }
                for (a, m) in alpha.iter().zip(&valid) {
                    if *m == 0.0 && *a != 0.0 {
                        return Err(fail(format!("attention {a} on a masked cell")));
                    }
                }
                state = out.state;
            }
            let cov = flat(&state.coverage);
            let worst = cov.iter().zip(&total).map(|(c, t)| (c - t).abs()).fold(0.0, f64::max);
            if worst > 1e-6 {
                return Err(fail(format!("coverage differs from summed attention by {worst}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn naive_pool(map: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    out[i * c + k] += map[((i * h + y) * w + x) * c + k];
                }
            }
        }
    }
    out
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> Option<f64> {
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max);
    (worst > tol).then_some(worst)
}

/// Sum-pooling equals an explicit loop, both on random maps and on each branch of the module.
pub fn sum_pool_exactness(cases: u32) -> Check {
    let mut store = ParamStore::new(DType::F64, 31);
    let mscm = Mscm::new(&mut store.root().pp("mscm"), 6, 5, &MscmConfig { branches: vec![tiny_branch(3), tiny_branch(5)] }).unwrap();
    runner(cases)
        .run(&(1usize..3, 1usize..5, 1usize..7, 1usize..6, any::<u64>()), |(b, h, w, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_tensor(&[b, h, w, c], 0.0, 1.0, &mut rng);
            if let Some(e) = rel_close(&flat(&sum_pool(&map).unwrap()), &naive_pool(&flat(&map), b, h, w, c), 1e-6) {
                return Err(fail(format!("sum_pool off by {e} (relative)")));
            }
            let f = feature_map(b, h, w.max(2), 6, seed);
            let out = mscm.forward(&f, &Mode::Eval).unwrap();
            for (m, v) in out.maps.iter().zip(&out.branch_vectors) {
                let (b, h, w, c) = m.dims4().unwrap();
                if let Some(e) = rel_close(&flat(v), &naive_pool(&flat(m), b, h, w, c), 1e-6) {
                    return Err(fail(format!("branch vector off by {e} (relative)")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The fused counting vector is the element-wise mean of the branch vectors.
pub fn fusion_is_mean(cases: u32) -> Check {
    let mut store = ParamStore::new(DType::F64, 32);
    let mscm = Mscm::new(&mut store.root().pp("mscm"), 6, 7, &MscmConfig { branches: vec![tiny_branch(3), tiny_branch(5)] }).unwrap();
    runner(cases)
        .run(&any::<u64>(), |seed| {
            let out = mscm.forward(&feature_map(2, 3, 4, 6, seed), &Mode::Eval).unwrap();
            let (a, b) = (flat(&out.branch_vectors[0]), flat(&out.branch_vectors[1]));
            let fused = flat(&out.fused);
            for i in 0..fused.len() {
                if (fused[i] - 0.5 * (a[i] + b[i])).abs() > 1e-6 {
                    return Err(fail(format!("fused {} vs mean {}", fused[i], 0.5 * (a[i] + b[i]))));
                }
            }
            let again = flat(&fuse_branch_vectors(&out.branch_vectors).unwrap());
            if again != fused {
                return Err(fail("fusion is not reproducible".into()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Ground-truth counts agree with a histogram over token strings that skips
/// structural tokens; their total is the interior length minus invisible tokens.
pub fn counting_ground_truth_oracle(cases: u32) -> Check {
    let vocab = desk_vocabulary();
    let skip = ["^", "_", "{", "}"];
    runner(cases)
        .run(&proptest::collection::vec(2usize..vocab.len(), 0..40), |interior| {
            let seq = TokenSequence::from_interior(&interior).unwrap();
            let got = vocab.counting_ground_truth(&seq).unwrap();
            let mut hist: HashMap<&str, f64> = HashMap::new();
            for &id in &interior {
                let tok = vocab.token(id).unwrap();
                if !skip.contains(&tok) {
                    *hist.entry(tok).or_default() += 1.0;
                }
            }
            for (id, tok) in vocab.tokens().iter().enumerate() {
                let want = hist.get(tok.as_str()).copied().unwrap_or(0.0);
                if got.as_slice()[id] != want {
                    return Err(fail(format!("class {tok}: {} vs {want}", got.as_slice()[id])));
                }
            }
            let invisible = interior.iter().filter(|&&i| vocab.is_invisible(i)).count();
            if got.total() != (seq.len() - 2 - invisible) as f64 {
                return Err(fail("count total does not match sequence length".into()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Padding a sample further (by batching it with a wider one) moves no fused
/// count by more than 1e-4.
pub fn mask_enlargement(cases: u32) -> Check {
    let (vocab, model) = tiny_model(AblationFlags::FULL, 41);
    runner(cases)
        .run(&(any::<u64>(), 1usize..4, 0usize..3), |(seed, extra_w, extra_h)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small = FormulaSample::new("s", noise_raster(32, 32, &mut rng), "x + 1", &vocab).unwrap();
            let big = FormulaSample::new("b", noise_raster(32 + 16 * extra_h, 32 + 16 * extra_w, &mut rng), "y", &vocab).unwrap();
            let counts = |samples: &[&FormulaSample]| {
                let batch = pad_batch(samples).unwrap();
                let t = BatchTensors::new(&batch, DType::F64).unwrap();
                let f = model.features(&t, &Mode::Eval).unwrap();
                flat(&model.counting(&f, &Mode::Eval).unwrap().unwrap().fused.i(0).unwrap())
            };
            let alone = counts(&[&small]);
            let padded = counts(&[&small, &big]);
            let worst = alone.iter().zip(&padded).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if worst > 1e-4 {
                return Err(fail(format!("padding moved a count by {worst}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Teacher-forced probability rows are non-negative and sum to one.
pub fn probability_rows_simplex(cases: u32) -> Check {
    let (vocab, model) = tiny_model(AblationFlags::FULL, 42);
    runner(cases)
        .run(&any::<u64>(), |seed| {
            let (_, batch) = tiny_batch(&vocab, seed);
            let t = BatchTensors::new(&batch, DType::F64).unwrap();
            let f = model.features(&t, &Mode::Eval).unwrap();
            let v = model.counting(&f, &Mode::Eval).unwrap().unwrap().fused;
            let inputs = model.decoder.prepare(&f, Some(&v)).unwrap();
            let probs = model.decoder.teacher_forced_probs(&inputs, &batch.targets, &mut Mode::Eval).unwrap();
            let c = vocab.len();
            for row in flat(&probs).chunks(c) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                    return Err(fail(format!("row sums to {s}")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn strip_metadata(mut r: can_hmer::metrics::EvalReport) -> can_hmer::metrics::EvalReport {
    r.metadata = RunMetadata::default();
    r
}

/// Saving, loading and re-evaluating a model reproduces its report exactly.
pub fn checkpoint_round_trip() -> Check {
    let vocab = desk_vocabulary();
    for (flags, dtype) in [(AblationFlags::FULL, DType::F32), (AblationFlags::BASELINE, DType::F64)] {
        let model = CanModel::new(&tiny_model_config(flags), vocab.len(), dtype, 43).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<FormulaSample> = (0..5)
            .map(|i| FormulaSample::new(format!("s{i}"), noise_raster(32, 32 + 16 * (i % 3), &mut rng), "x + 1", &vocab).unwrap())
            .collect();
        let opts = EvalOptions { batch_size: 2, ..EvalOptions::default() };
        let before = evaluate(&model, &vocab, &samples, &opts, RunMetadata::default()).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("m.safetensors");
        model.save(&path, &vocab, &HashMap::new()).map_err(|e| e.to_string())?;
        let (loaded, ckpt) = CanModel::load(&path).map_err(|e| e.to_string())?;
        if ckpt.vocab != vocab || loaded.dtype() != dtype || loaded.config != model.config {
            return Err("checkpoint did not restore vocabulary, dtype and config".into());
        }
        let after = evaluate(&loaded, &vocab, &samples, &opts, RunMetadata::default()).map_err(|e| e.to_string())?;
        if strip_metadata(before.clone()) != strip_metadata(after) {
            return Err(format!("{flags:?}: report changed across a checkpoint round trip"));
        }
        let again = evaluate(&model, &vocab, &samples, &opts, RunMetadata::default()).map_err(|e| e.to_string())?;
        if again != before {
            return Err("evaluation is not deterministic".into());
        }
    }
    Ok(())
}

/// Shifting the input 16 px right shifts interior feature columns by one cell.
pub fn translation_covariance() -> Check {
    let cfg = tiny_model_config(AblationFlags::BASELINE).encoder;
    let mut store = ParamStore::new(DType::F64, 44);
    let enc = Encoder::new(&mut store.root().pp("encoder"), &cfg).map_err(|e| e.to_string())?;
    let (h, w) = (32, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut shifted = vec![0.0; h * w];
    for y in 0..h {
        for x in 16..w {
            shifted[y * w + x] = base[y * w + x - 16];
        }
    }
    let run = |img: Vec<f64>| {
        let t = Tensor::from_vec(img, (1, h, w, 1), &Device::Cpu).unwrap();
        enc.encode(&t, &t.ones_like().unwrap(), &Mode::Eval).unwrap().values
    };
    let (a, b) = (run(base), run(shifted));
    let cols = w / 16;
    let mut worst = 0.0f64;
    for x in 6..cols - 6 {
        let d = (a.i((.., .., x, ..)).unwrap() - b.i((.., .., x + 1, ..)).unwrap()).unwrap();
        worst = worst.max(flat(&d.abs().unwrap()).into_iter().fold(0.0, f64::max));
    }
    if worst >= 1e-4 {
        return Err(format!("interior columns differ by {worst}"));
    }
    Ok(())
}

/// With a counting weight the classifier responds to the counting vector;
/// with that weight zeroed it ignores it entirely.
pub fn counting_conditioning(cases: u32) -> Check {
    let vocab = desk_vocabulary();
    let c = vocab.len();
    let (_s, dec) = tiny_decoder(6, c, true);
    let f = feature_map(2, 2, 3, 6, 50);
    let probs = |v: &Tensor| {
        let inputs = dec.prepare(&f, Some(v)).unwrap();
        let step = dec.decode_step(&inputs, &dec.initial_state(&inputs).unwrap(), &[0, 0], &mut Mode::Eval).unwrap();
        flat(&step.logits)
    };
    let argmax = |row: &[f64]| row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
    let base = Tensor::zeros((2, c), DType::F64, &Device::Cpu).unwrap();
    let reference = probs(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut changed = false;
    for _ in 0..cases {
        let v = random_tensor(&[2, c], 0.0, 30.0, &mut rng);
        let p = probs(&v);
        if (0..2).any(|i| argmax(&p[i * c..(i + 1) * c]) != argmax(&reference[i * c..(i + 1) * c])) {
            changed = true;
            break;
        }
    }
    if !changed {
        return Err("no counting vector changed a prediction".into());
    }
    let wv = dec.count_weight.as_ref().ok_or("decoder has no counting weight")?;
    wv.weight.set(&wv.weight.as_tensor().zeros_like().unwrap()).unwrap();
    if let Some(b) = &wv.bias {
        b.set(&b.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let reference = probs(&base);
    for _ in 0..cases {
        let v = random_tensor(&[2, c], 0.0, 30.0, &mut rng);
        if probs(&v) != reference {
            return Err("a zero counting weight still let the counting vector through".into());
        }
    }
    Ok(())
}

/// Without the counting-vector input, predictions do not depend on the counting module.
pub fn joint_only_ignores_counts() -> Check {
    let flags = AblationFlags { positional_encoding: true, joint_optimization: true, counting_vector: false };
    let (vocab, model) = tiny_model(flags, 45);
    if model.decoder.count_weight.is_some() || model.mscm.is_none() {
        return Err("expected a counting module without a counting weight".into());
    }
    let (_, batch) = tiny_batch(&vocab, 46);
    let run = |m: &CanModel| {
        let t = BatchTensors::new(&batch, DType::F64).unwrap();
        let f = m.features(&t, &Mode::Eval).unwrap();
        let inputs = m.decoder.prepare(&f, None).unwrap();
        flat(&m.decoder.teacher_forced_probs(&inputs, &batch.targets, &mut Mode::Eval).unwrap())
    };
    let before = run(&model);
    for (name, var) in model.store.params() {
        if name.starts_with("mscm.") {
            var.set(&(var.as_tensor() * 7.0).unwrap()).unwrap();
        }
    }
    if run(&model) != before {
        return Err("predictions moved with the counting module".into());
    }
    Ok(())
}

/// Larger perturbation probabilities move fed counts further from the truth on
/// average, and only symbols that are present get disturbed.
pub fn perturbation_monotone() -> Check {
    let vocab = desk_vocabulary();
    let invisible = vocab.invisible_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let truth: Vec<Vec<f64>> = (0..400)
        .map(|_| (0..vocab.len()).map(|i| if invisible.contains(&i) { 0.0 } else { rng.random_range(0..4) as f64 }).collect())
        .collect();
    let mut last = -1.0;
    for p in [0.0, 0.1, 0.3, 0.6, 1.0] {
        let mut r = ChaCha8Rng::seed_from_u64(61);
        let mut total = 0.0;
        for t in &truth {
            let fed = perturb_counts(t, p, &invisible, &mut r);
            if fed.iter().zip(t).any(|(a, b)| *b == 0.0 && *a != 0.0) {
                return Err(format!("absent class disturbed at p={p}"));
            }
            total += fed.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
        }
        let mae = total / truth.len() as f64;
        if mae <= last {
            return Err(format!("MAE {mae} at p={p} does not exceed {last}"));
        }
        last = mae;
    }
    Ok(())
}
