//! Writes counting-map and attention heatmaps for one synthetic formula.
//!
//! `cargo run --release --example visualize -- [checkpoint] [out_dir=target/visualize]`

use can_hmer::model::{CanModel, CountFeed};
use can_hmer::synth::{generate_corpus, SynthGrammarConfig};
use can_hmer::viz::{export_attention_maps, export_counting_maps};

fn main() -> can_hmer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().cloned().unwrap_or_else(|| "target/train_eval/best.safetensors".into());
    let out = args.get(1).cloned().unwrap_or_else(|| "target/visualize".into());
    let (model, ckpt) = CanModel::load(&path)?;
    let sample = generate_corpus(&SynthGrammarConfig::desk(), &ckpt.vocab, 1, 42)?.remove(0);
    println!("{}", sample.markup);
    std::fs::create_dir_all(&out)?;
    sample.image.save_png(std::path::Path::new(&out).join("input.png"))?;
    let counting = export_counting_maps(&model, &ckpt.vocab, &sample, &out, None)?;
    let attention = export_attention_maps(&model, &ckpt.vocab, &sample, &out, CountFeed::Off)?;
    for p in counting.iter().chain(&attention) {
        println!("{}", p.display());
    }
    Ok(())
}
