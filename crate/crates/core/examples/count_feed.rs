//! Trains the full model under different counting-vector sources (ground
//! truth, perturbed ground truth, predicted) and compares held-out ExpRate.
//!
//! `cargo run --release --example count_feed -- [samples=300] [epochs=10]`

use can_hmer::engine::{count_feed_study, RunOutput, TrainConfig};
use can_hmer::model::{CountFeed, ModelConfig};
use can_hmer::synth::{desk_vocabulary, generate_corpus, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(300);
    let epochs = args.get(1).copied().unwrap_or(10);

    let vocab = desk_vocabulary();
    let synth = SynthGrammarConfig { max_len: 10, ..SynthGrammarConfig::desk() };
    let corpus = generate_corpus(&synth, &vocab, n, 7)?;
    let held_out = generate_corpus(&synth, &vocab, n / 2, 8)?;
    let train = TrainConfig { epochs, eval_every: 1, ..TrainConfig::default() };
    let feeds = [CountFeed::Exact, CountFeed::Perturbed(0.1), CountFeed::Perturbed(0.3), CountFeed::Off];
    let out = RunOutput { dir: Some("target/count_feed".into()) };
    let study = count_feed_study(&ModelConfig::desk(), &train, &vocab, &corpus, &held_out, &feeds, &[0], &out)?;
    print!("{}", study.to_text());
    Ok(())
}
