//! Prints the warmup-then-cosine learning-rate multiplier over a short run.

use can_hmer::engine::lr_at;

fn main() -> can_hmer::Result<()> {
    let (steps_per_epoch, epochs) = (10, 6);
    for step in (0..steps_per_epoch * epochs).step_by(3) {
        let m = lr_at(step, steps_per_epoch, epochs)?;
        println!("step {step:>3}  {m:.3}  {}", "#".repeat((m * 40.0).round() as usize));
    }
    Ok(())
}
