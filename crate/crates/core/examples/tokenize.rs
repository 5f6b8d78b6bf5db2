//! Tokenizes markup, derives the counting target and shows which symbols are never counted.

use can_hmer::vocab::SymbolVocabulary;
use can_hmer::synth::desk_vocabulary;

fn main() -> can_hmer::Result<()> {
    let vocab = desk_vocabulary();
    println!("{} classes, hash {}", vocab.len(), vocab.hash());
    let invisible: Vec<&str> = vocab.invisible_ids().iter().map(|&i| vocab.token(i)).collect::<can_hmer::Result<_>>()?;
    println!("never counted: {invisible:?}");

    let markup = std::env::args().nth(1).unwrap_or_else(|| "x ^ { 2 } + x ^ { 3 } = y".into());
    let seq = vocab.tokenize(&markup)?;
    println!("ids     {:?}", seq.ids());
    println!("round   {}", vocab.detokenize(&seq)?);
    let counts = vocab.counting_ground_truth(&seq)?;
    for (id, &c) in counts.as_slice().iter().enumerate().filter(|(_, c)| **c > 0.0) {
        println!("count   {:>4} x{c}", vocab.token(id)?);
    }

    match vocab.tokenize("x + \\gamma") {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    let custom = SymbolVocabulary::from_tokens(["sos", "eos", "a", "b", "+"])?;
    println!("custom vocabulary of {} has hash {}", custom.len(), &custom.hash()[..12]);
    Ok(())
}
