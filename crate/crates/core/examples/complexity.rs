//! Parameter and multiply-accumulate counts for the full-scale and desk configurations.

use can_hmer::model::{AblationFlags, CanModel, ModelConfig};

fn main() -> can_hmer::Result<()> {
    for (name, cfg) in [("full", ModelConfig::full()), ("desk", ModelConfig::desk())] {
        for (row, flags) in [("baseline", AblationFlags::BASELINE), ("can", AblationFlags::FULL)] {
            let m = CanModel::new(&cfg.clone().with_ablation(flags), 111, candle_core::DType::F32, 0)?;
            let p = m.param_counts();
            println!(
                "{name:5} {row:9} params {:>10} (enc {} / mscm {} / dec {})  MACs@120x800: {:.2}G per 50 steps, setup-only {:.2}G",
                p.total, p.encoder, p.mscm, p.decoder,
                m.macs(120, 800, 50) as f64 / 1e9,
                m.macs(120, 800, 0) as f64 / 1e9,
            );
        }
    }
    Ok(())
}
