//! Training loop, evaluation and experiment harness contracts.

mod common;

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use can_hmer::engine::*;
use can_hmer::metrics::RunMetadata;
use can_hmer::model::{AblationFlags, CanModel, CountFeed};
use can_hmer::synth::{desk_vocabulary, generate_corpus, pad_batch, FormulaSample, SynthGrammarConfig};
use can_hmer::vocab::SymbolVocabulary;
use can_hmer::Error;
use common::tiny_model_config;

fn small_corpus(n: usize, seed: u64) -> (SymbolVocabulary, Vec<FormulaSample>) {
    let vocab = desk_vocabulary();
    let cfg = SynthGrammarConfig { max_len: 6, ..SynthGrammarConfig::desk() };
    let corpus = generate_corpus(&cfg, &vocab, n, seed).unwrap();
    (vocab, corpus)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, validation_fraction: 0.0, eval_every: 1, ..TrainConfig::default() }
}

fn tiny(flags: AblationFlags, classes: usize) -> CanModel {
    CanModel::new(&tiny_model_config(flags), classes, DType::F32, 3).unwrap()
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let (vocab, corpus) = small_corpus(24, 1);
    let run = || {
        let mut m = tiny(AblationFlags::FULL, vocab.len());
        train(&TrainConfig { augment: true, ..quick(2) }, &mut m, &vocab, &corpus, &[], &RunOutput::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.steps.len() >= 10);
    for (x, y) in a.steps.iter().zip(&b.steps).take(10) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.grad_norm, y.grad_norm);
    }
}

#[test]
fn run_record_has_one_finite_entry_per_step() {
    let (vocab, corpus) = small_corpus(18, 2);
    let (tr, val) = split_corpus(&corpus, 0.2, 0);
    let mut m = tiny(AblationFlags::FULL, vocab.len());
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { validation_fraction: 0.2, ..quick(3) };
    let rec = train(&cfg, &mut m, &vocab, &tr, &val, &RunOutput { dir: Some(dir.path().to_path_buf()) }).unwrap();
    assert_eq!(rec.steps.len(), tr.len().div_ceil(4) * 3);
    assert_eq!(rec.epochs.len(), 3);
    assert!(rec.steps.iter().all(|s| s.loss.is_finite() && s.grad_norm.is_finite() && s.lr.is_finite()));
    assert!(rec.epochs.iter().all(|e| e.validation.is_some()));
    assert!(rec.checkpoint.as_ref().unwrap().exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), rec.steps.len() + rec.epochs.len());
    // lr follows the schedule
    let spe = tr.len().div_ceil(4);
    for s in &rec.steps {
        assert_eq!(s.lr, cfg.lr * lr_at(s.step, spe, 3).unwrap());
    }
}

#[test]
fn without_joint_optimization_the_counting_module_is_untouched() {
    let (vocab, corpus) = small_corpus(12, 3);
    let flags = AblationFlags { positional_encoding: true, joint_optimization: false, counting_vector: true };
    let mut m = tiny(flags, vocab.len());
    let before: Vec<(String, Vec<f32>)> = m
        .store
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("mscm."))
        .map(|(n, v)| (n.clone(), v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect();
    assert!(!before.is_empty());
    let rec = train(&quick(2), &mut m, &vocab, &corpus, &[], &RunOutput::default()).unwrap();
    assert!(rec.steps.iter().all(|s| s.loss.counting == 0.0 && s.loss.branches.is_empty()));
    for (name, values) in before {
        let after: Vec<f32> = m.store.get(&name).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(after, values, "{name} moved");
    }
}

#[test]
fn exact_feed_passes_ground_truth_to_the_decoder() {
    let (vocab, corpus) = small_corpus(4, 4);
    let m = tiny(AblationFlags::FULL, vocab.len());
    let batch = pad_batch(&corpus.iter().collect::<Vec<_>>()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = m.decoder_counts(None, &batch, CountFeed::Exact, &vocab.invisible_ids(), &mut rng).unwrap().unwrap();
    let got: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
    let want: Vec<f32> = batch.counts.iter().map(|&c| c as f32).collect();
    assert_eq!(got, want);
    let p = m.decoder_counts(None, &batch, CountFeed::Perturbed(1.0), &vocab.invisible_ids(), &mut rng).unwrap().unwrap();
    let p: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
    assert_ne!(p, want);
    for (i, (a, b)) in p.iter().zip(&want).enumerate() {
        if vocab.is_invisible(i % vocab.len()) {
            assert_eq!(a, b);
        } else {
            assert!((a - b).abs() <= 1.0 && *a >= 0.0);
        }
    }
    // training under the exact feed runs end to end
    let mut m = tiny(AblationFlags::FULL, vocab.len());
    let cfg = TrainConfig { count_feed: CountFeed::Exact, ..quick(1) };
    train(&cfg, &mut m, &vocab, &corpus, &[], &RunOutput::default()).unwrap();
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (vocab, corpus) = small_corpus(8, 5);
    let mut m = tiny(AblationFlags::FULL, vocab.len());
    let w = &m.decoder.classifier.weight;
    w.set(&Tensor::full(f32::NAN, w.shape(), w.device()).unwrap()).unwrap();
    let err = train(&quick(1), &mut m, &vocab, &corpus, &[], &RunOutput::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    assert_eq!(err.category(), "nan-loss");
}

#[test]
fn mismatched_vocabularies_are_refused() {
    let (vocab, corpus) = small_corpus(6, 6);
    let mut reordered: Vec<String> = vec!["sos".into(), "eos".into()];
    reordered.extend(vocab.tokens()[2..].iter().rev().cloned());
    let other = SymbolVocabulary::from_tokens(reordered).unwrap();
    assert_ne!(other.hash(), vocab.hash());

    let m = tiny(AblationFlags::FULL, vocab.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    m.save(&path, &vocab, &HashMap::new()).unwrap();
    let err = evaluate_checkpoint(&path, &other, &corpus, None).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { .. }));
    assert_eq!(err.category(), "vocab-mismatch");

    let small = SymbolVocabulary::from_tokens(["sos", "eos", "x"]).unwrap();
    let mut m = tiny(AblationFlags::FULL, vocab.len());
    assert!(matches!(train(&quick(1), &mut m, &small, &corpus, &[], &RunOutput::default()), Err(Error::VocabMismatch { .. })));
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty_sets() {
    let (vocab, corpus) = small_corpus(6, 7);
    let m = tiny(AblationFlags::FULL, vocab.len());
    let a = evaluate(&m, &vocab, &corpus, &EvalOptions::default(), RunMetadata::default()).unwrap();
    let b = evaluate(&m, &vocab, &corpus, &EvalOptions::default(), RunMetadata::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_sample.len(), 6);
    assert!(a.mae_ave.is_some());
    assert!(matches!(evaluate(&m, &vocab, &[], &EvalOptions::default(), RunMetadata::default()), Err(Error::Empty(_))));
    let base = tiny(AblationFlags::BASELINE, vocab.len());
    let r = evaluate(&base, &vocab, &corpus, &EvalOptions::default(), RunMetadata::default()).unwrap();
    assert!(r.mae_ave.is_none() && r.per_sample.iter().all(|s| s.count_error.is_empty()));
}

#[test]
fn overfits_twenty_samples_exactly() {
    let vocab = desk_vocabulary();
    let corpus = generate_corpus(&SynthGrammarConfig::desk(), &vocab, 20, 11).unwrap();
    let mut model = CanModel::new(&can_hmer::model::ModelConfig::desk(), vocab.len(), DType::F32, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 60, validation_fraction: 0.0, ..TrainConfig::default() };
    let rec = train(&cfg, &mut model, &vocab, &corpus, &[], &RunOutput { dir: Some(dir.path().to_path_buf()) }).unwrap();
    let report = evaluate_checkpoint(rec.checkpoint.unwrap(), &vocab, &corpus, None).unwrap();
    assert_eq!(report.exprate, 100.0, "{}", report.summary());
    assert_eq!(report.metadata.dataset_id, dataset_id(&corpus));
    assert_eq!(report.metadata.config_hash, rec.config_hash);
}

#[test]
fn ablation_suite_trains_four_rows_in_order() {
    let (vocab, corpus) = small_corpus(10, 8);
    let (_, test) = small_corpus(4, 9);
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_model_config(AblationFlags::FULL);
    let table = ablation_suite(&base, &quick(1), &vocab, &corpus, &test, &[0], &RunOutput { dir: Some(dir.path().to_path_buf()) }).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["baseline", "+positional_encoding", "+joint_optimization", "+counting_vector"]);
    assert_eq!(table.rows[0].params.mscm, 0);
    assert_eq!(table.rows[0].params.total, tiny(AblationFlags::BASELINE, vocab.len()).param_counts().total);
    assert_eq!(table.rows[0].params, table.rows[1].params);
    assert!(table.rows[2].params.mscm > 0);
    assert!(table.rows[3].params.decoder > table.rows[2].params.decoder);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(table.to_text().lines().count() == 5);
    for row in &table.rows {
        let run = &row.runs[0];
        let report = evaluate_checkpoint(run.checkpoint.as_ref().unwrap(), &vocab, &test, None).unwrap();
        assert_eq!(can_hmer::engine::EvalSummary::from(&report), run.held_out, "{}", row.name);
    }
}

#[test]
fn count_feed_study_reports_each_feed() {
    let (vocab, corpus) = small_corpus(8, 10);
    let (_, test) = small_corpus(3, 12);
    let feeds = [CountFeed::Exact, CountFeed::Perturbed(0.3), CountFeed::Off];
    let study = count_feed_study(&tiny_model_config(AblationFlags::FULL), &quick(1), &vocab, &corpus, &test, &feeds, &[0], &RunOutput::default()).unwrap();
    assert_eq!(study.rows.iter().map(|r| r.feed).collect::<Vec<_>>(), feeds);
    assert_eq!(study.to_text().lines().count(), 4);
}

#[test]
fn complexity_grows_with_the_architecture() {
    let desk = complexity_report(&can_hmer::model::ModelConfig::desk(), 111, 120, 800).unwrap();
    let full = complexity_report(&can_hmer::model::ModelConfig::full(), 111, 120, 800).unwrap();
    assert!(desk.params.total < full.params.total);
    assert!(desk.macs < full.macs);
    assert_eq!(full.decode_steps, REFERENCE_DECODE_STEPS);
}

proptest! {
    #[test]
    fn schedule_shape(spe in 1usize..40, epochs in 2usize..30) {
        let total = spe * epochs;
        prop_assert_eq!(lr_at(0, spe, epochs).unwrap(), 0.0);
        prop_assert!((lr_at(spe, spe, epochs).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(lr_at(total - 1, spe, epochs).unwrap().abs() < 1e-9);
        prop_assert!(lr_at(total, spe, epochs).is_err());
        let mut prev = 0.0;
        for s in 0..total {
            let v = lr_at(s, spe, epochs).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if s <= spe { prop_assert!(v >= prev); } else { prop_assert!(v <= prev); }
            prev = v;
        }
    }
}
