//! Loads a checkpoint and greedily decodes a few fresh synthetic formulas,
//! printing the predicted markup and counts next to the truth.
//!
//! `cargo run --release --example predict -- [checkpoint=target/train_eval/best.safetensors]`

use can_hmer::model::{CanModel, CountFeed};
use can_hmer::synth::{generate_corpus, pad_batch, SynthGrammarConfig};
use can_hmer::vocab::strip_framing;
use rand::SeedableRng;

fn main() -> can_hmer::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/train_eval/best.safetensors".into());
    let (model, ckpt) = CanModel::load(&path)?;
    let vocab = &ckpt.vocab;
    let samples = generate_corpus(&SynthGrammarConfig::desk(), vocab, 6, 99)?;
    let batch = pad_batch(&samples.iter().collect::<Vec<_>>())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let preds = model.predict(&batch, CountFeed::Off, &vocab.invisible_ids(), &mut rng, None)?;
    for (s, p) in samples.iter().zip(preds) {
        let text = vocab.join_ids(strip_framing(&p.decoded.ids))?;
        let mark = if text == s.markup { "ok " } else { "   " };
        println!("{mark}{:<28} <- {}", text, s.markup);
        if let Some(counts) = p.counts {
            let shown: Vec<String> = (0..vocab.len())
                .filter(|&c| !vocab.is_invisible(c) && (counts[c] >= 0.5 || s.counts.as_slice()[c] > 0.0))
                .map(|c| format!("{}:{:.1}/{}", vocab.token(c).unwrap_or("?"), counts[c], s.counts.as_slice()[c]))
                .collect();
            println!("     counts {}", shown.join(" "));
        }
    }
    Ok(())
}
