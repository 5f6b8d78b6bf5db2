//! Runs the counting module of an untrained model on a small batch and
//! compares the fused counting vector with the ground truth.

use can_hmer::model::{BatchTensors, CanModel, ModelConfig};
use can_hmer::nn::Mode;
use can_hmer::synth::{desk_vocabulary, generate_corpus, pad_batch, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    let vocab = desk_vocabulary();
    let corpus = generate_corpus(&SynthGrammarConfig::desk(), &vocab, 2, 5)?;
    let model = CanModel::new(&ModelConfig::desk(), vocab.len(), candle_core::DType::F32, 0)?;
    let batch = pad_batch(&corpus.iter().collect::<Vec<_>>())?;
    let t = BatchTensors::new(&batch, model.dtype())?;
    let f = model.features(&t, &Mode::Eval)?;
    let out = model.counting(&f, &Mode::Eval)?.expect("desk model counts");
    println!("features {:?}", f.dims()?);
    for (i, m) in out.maps.iter().enumerate() {
        println!("branch {i}: counting map {:?}", m.dims());
    }
    let fused = out.fused.to_vec2::<f32>()?;
    for (s, row) in corpus.iter().zip(&fused) {
        println!("{}  {}", s.id, s.markup);
        for (c, &gt) in s.counts.as_slice().iter().enumerate().filter(|(c, g)| **g > 0.0 && !vocab.is_invisible(*c)) {
            println!("  {:>4}  target {gt}  predicted {:.2}", vocab.token(c)?, row[c]);
        }
    }
    Ok(())
}
