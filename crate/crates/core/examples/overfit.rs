//! Overfits the desk model on a small synthetic corpus and reports training-set metrics.
//!
//! `cargo run --example overfit -- [samples] [epochs] [adam|adadelta]`

use can_hmer::engine::{evaluate, train, EvalOptions, OptimizerConfig, RunOutput, TrainConfig};
use can_hmer::metrics::RunMetadata;
use can_hmer::model::{CanModel, ModelConfig};
use can_hmer::synth::{desk_vocabulary, generate_corpus, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let optimizer = match args.get(2).map(String::as_str) {
        Some("adadelta") => OptimizerConfig::ADADELTA,
        _ => OptimizerConfig::ADAM,
    };

    let vocab = desk_vocabulary();
    let corpus = generate_corpus(&SynthGrammarConfig::desk(), &vocab, n, 7)?;
    let cfg = TrainConfig { epochs, optimizer, lr: optimizer.default_lr(), validation_fraction: 0.0, ..TrainConfig::default() };
    let mut model = CanModel::new(&ModelConfig::desk(), vocab.len(), candle_core::DType::F32, 0)?;
    let record = train(&cfg, &mut model, &vocab, &corpus, &[], &RunOutput::default())?;
    let report = evaluate(&model, &vocab, &corpus, &EvalOptions::default(), RunMetadata::default())?;
    println!("{} steps in {:.0}s", record.steps.len(), record.wall_seconds);
    println!("training set: {}", report.summary());
    Ok(())
}
