//! Trains the four-row component ladder (baseline, then positional encoding,
//! joint counting loss, counting vector) and prints the held-out table.
//!
//! `cargo run --release --example ablation -- [samples=300] [epochs=10] [seeds=1]`

use can_hmer::engine::{ablation_suite, RunOutput, TrainConfig};
use can_hmer::model::ModelConfig;
use can_hmer::synth::{desk_vocabulary, generate_corpus, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(300);
    let epochs = args.get(1).copied().unwrap_or(10);
    let seeds: Vec<u64> = (0..args.get(2).copied().unwrap_or(1) as u64).collect();

    let vocab = desk_vocabulary();
    let synth = SynthGrammarConfig { max_len: 10, ..SynthGrammarConfig::desk() };
    let corpus = generate_corpus(&synth, &vocab, n, 7)?;
    let held_out = generate_corpus(&synth, &vocab, n / 2, 8)?;
    let train = TrainConfig { epochs, eval_every: 1, ..TrainConfig::default() };
    let out = RunOutput { dir: Some("target/ablation".into()) };
    let table = ablation_suite(&ModelConfig::desk(), &train, &vocab, &corpus, &held_out, &seeds, &out)?;
    print!("{}", table.to_text());
    Ok(())
}
