//! Resolves a run configuration from a preset plus dotted overrides, as the
//! `can` binary does, and prints it with its hash.
//!
//! `cargo run --example config -- train.epochs=5 model.ablation.counting_vector=false`

use can_hmer::cli::{resolve_config, Preset};
use can_hmer::engine::config_hash;

fn main() -> can_hmer::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = resolve_config(Preset::Desk, None, &overrides)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    println!("config hash {}", config_hash(&cfg)?);
    match resolve_config(Preset::Desk, None, &["train.epoch=5".to_string()]) {
        Ok(_) => println!("typo accepted"),
        Err(e) => println!("typo rejected: {e}"),
    }
    Ok(())
}
