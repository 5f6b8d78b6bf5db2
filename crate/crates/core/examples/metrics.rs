//! Expression-level and counting metrics on hand-made predictions.

use can_hmer::metrics::{counting_metrics, edit_distance, expression_metrics};
use can_hmer::synth::desk_vocabulary;

fn main() -> can_hmer::Result<()> {
    let vocab = desk_vocabulary();
    let pairs = [
        ("x ^ { 2 } + 1", "x ^ { 2 } + 1"),
        ("x ^ { 2 } - 1", "x ^ { 2 } + 1"),
        ("x _ { 2 } - 1", "x ^ { 2 } + 1"),
        ("a = b", "a + b = c"),
    ];
    let mut ids = Vec::new();
    for (pred, target) in pairs {
        let p = vocab.tokenize(pred)?.interior().to_vec();
        let t = vocab.tokenize(target)?.interior().to_vec();
        println!("{:>3}  {pred:<16} vs {target}", edit_distance(&p, &t));
        ids.push((p, t));
    }
    let (exprate, leq1, leq2) = expression_metrics(&ids)?;
    println!("ExpRate {exprate:.1}  <=1 {leq1:.1}  <=2 {leq2:.1}");

    let counts = [(vec![1.2, 0.0, 2.0], vec![1.0, 0.0, 2.0]), (vec![0.5, 3.0, 1.0], vec![1.0, 2.0, 1.0])];
    let (mae, mse) = counting_metrics(&counts)?;
    println!("MAE {mae:.4}  MSE {mse:.4}");
    Ok(())
}
