//! Renders a small synthetic corpus and writes it as an image + manifest dataset.

use can_hmer::synth::{generate_corpus, write_dataset, desk_vocabulary, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synth_corpus".into());
    let vocab = desk_vocabulary();
    let samples = generate_corpus(&SynthGrammarConfig::desk(), &vocab, 12, 7)?;
    for s in &samples {
        println!("{}  {}x{}  {}", s.id, s.image.height, s.image.width, s.markup);
    }
    write_dataset(&out, &samples, &vocab)?;
    println!("wrote {} samples to {out}", samples.len());
    Ok(())
}
