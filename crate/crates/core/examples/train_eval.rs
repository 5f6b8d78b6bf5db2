//! Trains the desk model with a validation split, keeps the best checkpoint and
//! evaluates it on a held-out set drawn with a different seed.
//!
//! `cargo run --release --example train_eval -- [samples=200] [epochs=20] [out=target/train_eval]`

use can_hmer::engine::{evaluate_checkpoint, split_corpus, train, RunOutput, TrainConfig};
use can_hmer::model::{CanModel, ModelConfig};
use can_hmer::synth::{desk_vocabulary, generate_corpus, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = std::path::PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "target/train_eval".into()));

    let vocab = desk_vocabulary();
    let synth = SynthGrammarConfig::desk();
    let corpus = generate_corpus(&synth, &vocab, n, 7)?;
    let held_out = generate_corpus(&synth, &vocab, n / 2, 8)?;
    let cfg = TrainConfig { epochs, eval_every: 2, ..TrainConfig::default() };
    let (tr, val) = split_corpus(&corpus, cfg.validation_fraction, cfg.seed);

    let mut model = CanModel::new(&ModelConfig::desk(), vocab.len(), candle_core::DType::F32, cfg.seed)?;
    let record = train(&cfg, &mut model, &vocab, &tr, &val, &RunOutput { dir: Some(out.clone()) })?;
    println!(
        "{} steps in {:.0}s, best epoch {} (validation {:?})",
        record.steps.len(),
        record.wall_seconds,
        record.best_epoch,
        record.best_validation.map(|v| v.exprate)
    );

    let ckpt = record.checkpoint.expect("checkpoint written to out dir");
    let report = evaluate_checkpoint(&ckpt, &vocab, &held_out, None)?;
    report.write_json(out.join("held_out.json"))?;
    report.write_csv(out.join("held_out.csv"))?;
    println!("held out: {}", report.summary());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}
