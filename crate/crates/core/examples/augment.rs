//! Renders one formula and writes a strip of seeded augmentations next to the clean image.
//!
//! `cargo run --example augment -- [out_dir]`

use can_hmer::synth::augment::{augment, AugmentConfig};
use can_hmer::synth::{render_sample, sample_markup, SynthGrammarConfig};

fn main() -> can_hmer::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/augment".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = SynthGrammarConfig::desk();
    let markup = sample_markup(&cfg, 3, 0)?;
    let clean = render_sample(&cfg, &markup, 3, 0)?.image;
    println!("{markup}  ({}x{})", clean.height, clean.width);
    clean.save_png(out.join("clean.png"))?;
    let aug = AugmentConfig::default();
    for seed in 0..6 {
        let img = augment(&clean, &aug, seed);
        img.save_png(out.join(format!("aug{seed}.png")))?;
    }
    // Same seed, same pixels.
    assert_eq!(augment(&clean, &aug, 4).data, augment(&clean, &aug, 4).data);
    println!("wrote 7 images to {}", out.display());
    Ok(())
}
