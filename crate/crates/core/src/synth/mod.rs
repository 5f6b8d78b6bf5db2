//! Synthetic formula corpus: grammar sampling, rendering, augmentation and dataset I/O.

pub mod augment;
pub mod dataset;
pub mod glyphs;
pub mod layout;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use dataset::{load_dataset, pad_batch, write_dataset, Batch};
pub use layout::{render, GlyphBox, GlyphJitter, RenderGeometry, Rendering};

use crate::vocab::{CountVector, SymbolVocabulary, TokenSequence, INVISIBLE_TOKENS};
use crate::{Error, Result};

/// Row-major grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn from_luma(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn to_luma(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches extent")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FormulaSample {
    pub id: String,
    pub image: Raster,
    pub markup: String,
    pub tokens: TokenSequence,
    pub counts: CountVector,
}

impl FormulaSample {
    /// Builds a sample, deriving tokens and counts from the markup.
    pub fn new(id: impl Into<String>, image: Raster, markup: &str, vocab: &SymbolVocabulary) -> Result<Self> {
        if image.height == 0 || image.width == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let tokens = vocab.tokenize(markup)?;
        let counts = vocab.counting_ground_truth(&tokens)?;
        Ok(Self { id: id.into(), image, markup: markup.split_whitespace().collect::<Vec<_>>().join(" "), tokens, counts })
    }
}

const STRUCTURAL: [&str; 4] = ["^", "_", "\\frac", "\\sqrt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthGrammarConfig {
    /// Visible atoms plus any of `^ _ \frac \sqrt` that may appear.
    pub symbols: Vec<String>,
    pub min_len: usize,
    /// Upper bound on markup tokens, braces included.
    pub max_len: usize,
    /// Maximum nesting of scripts, fractions and radicals.
    pub max_depth: usize,
    /// Chance that an item becomes a structure when depth allows it.
    pub structure_prob: f64,
    pub jitter: GlyphJitter,
    pub canvas_height: usize,
    pub em_px: f64,
    pub stroke_radius_em: f64,
}

impl Default for SynthGrammarConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SynthGrammarConfig {
    pub fn desk() -> Self {
        Self {
            symbols: desk_symbols().into_iter().filter(|s| !["sos", "eos", "{", "}"].contains(s)).map(String::from).collect(),
            min_len: 3,
            max_len: 14,
            max_depth: 2,
            structure_prob: 0.3,
            jitter: GlyphJitter::default(),
            canvas_height: 64,
            em_px: 28.0,
            stroke_radius_em: 0.05,
        }
    }

    pub fn full() -> Self {
        Self { canvas_height: 128, em_px: 56.0, max_len: 40, max_depth: 3, ..Self::desk() }
    }

    pub fn geometry(&self) -> RenderGeometry {
        RenderGeometry {
            canvas_height: self.canvas_height,
            em_px: self.em_px,
            margin_px: 3.0,
            stroke_radius_em: self.stroke_radius_em,
        }
    }

    fn atoms(&self) -> Vec<&str> {
        self.symbols.iter().map(String::as_str).filter(|s| glyphs::glyph(s).is_some()).collect()
    }

    fn allows(&self, token: &str) -> bool {
        self.symbols.iter().any(|s| s == token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_height == 0 || self.em_px <= 0.0 {
            return Err(Error::Config("canvas height and glyph size must be positive".into()));
        }
        if self.atoms().is_empty() {
            return Err(Error::Config("symbol set has no renderable atoms".into()));
        }
        for s in &self.symbols {
            let structural = STRUCTURAL.contains(&s.as_str());
            if INVISIBLE_TOKENS.contains(&s.as_str()) && !structural {
                return Err(Error::Config(format!("symbol set may not contain {s:?}")));
            }
            if !structural && glyphs::glyph(s).is_none() {
                return Err(Error::Config(format!("no glyph for symbol {s:?}")));
            }
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.structure_prob) {
            return Err(Error::Config("structure_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Desk-scale token list in class-id order.
pub fn desk_symbols() -> Vec<&'static str> {
    let mut t = vec!["sos", "eos", "^", "_", "{", "}"];
    t.extend(glyphs::GLYPH_TOKENS.iter().copied());
    t.extend(["\\frac", "\\sqrt"]);
    t
}

pub fn desk_vocabulary() -> SymbolVocabulary {
    SymbolVocabulary::from_tokens(desk_symbols()).expect("built-in vocabulary is valid")
}

struct Grammar<'a> {
    cfg: &'a SynthGrammarConfig,
    atoms: Vec<&'a str>,
    rng: ChaCha8Rng,
}

impl Grammar<'_> {
    fn atom(&mut self) -> String {
        self.atoms[self.rng.random_range(0..self.atoms.len())].to_string()
    }

    fn group(&mut self, depth: usize, budget: usize) -> Vec<String> {
        let mut out = vec!["{".to_string()];
        let target = self.rng.random_range(1..=budget.clamp(1, 3));
        out.extend(self.row(depth, target, budget));
        out.push("}".into());
        out
    }

    /// Emits items until `target` tokens are reached without exceeding `budget`.
    fn row(&mut self, depth: usize, target: usize, budget: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        while out.len() < target.max(1) && out.len() < budget {
            let room = budget - out.len();
            let mut options = Vec::new();
            if depth < self.cfg.max_depth {
                if room >= 5 && self.cfg.allows("^") {
                    options.push("^");
                }
                if room >= 5 && self.cfg.allows("_") {
                    options.push("_");
                }
                if room >= 7 && self.cfg.allows("\\frac") {
                    options.push("\\frac");
                }
                if room >= 4 && self.cfg.allows("\\sqrt") {
                    options.push("\\sqrt");
                }
            }
            if options.is_empty() || !self.rng.random_bool(self.cfg.structure_prob) {
                out.push(self.atom());
                continue;
            }
            match options[self.rng.random_range(0..options.len())] {
                s @ ("^" | "_") => {
                    out.push(self.atom());
                    out.push(s.into());
                    out.extend(self.group(depth + 1, room - 4));
                    let other = if s == "^" { "_" } else { "^" };
                    let left = budget - out.len();
                    if left >= 4 && self.cfg.allows(other) && self.rng.random_bool(0.25) {
                        out.push(other.into());
                        out.extend(self.group(depth + 1, left - 3));
                    }
                }
                "\\frac" => {
                    out.push("\\frac".into());
                    let half = (room - 5) / 2;
                    out.extend(self.group(depth + 1, half.max(1)));
                    let left = budget - out.len() - 2;
                    out.extend(self.group(depth + 1, left.min(half.max(1)).max(1)));
                }
                _ => {
                    out.push("\\sqrt".into());
                    out.extend(self.group(depth + 1, room - 3));
                }
            }
        }
        out
    }
}

/// Samples one markup string; the stream for `index` is independent of every other index.
pub fn sample_markup(cfg: &SynthGrammarConfig, seed: u64, index: u64) -> Result<String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let target = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut g = Grammar { cfg, atoms: cfg.atoms(), rng };
    let tokens = g.row(0, target, cfg.max_len);
    Ok(tokens.join(" "))
}

/// Renders markup with the config's geometry and a jitter stream derived from `(seed, index)`.
pub fn render_sample(cfg: &SynthGrammarConfig, markup: &str, seed: u64, index: u64) -> Result<Rendering> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(index);
    render(markup, &cfg.geometry(), cfg.jitter, &mut rng)
}

/// Generates `n` rendered formulas; identical `(cfg, n, seed)` give identical corpora.
pub fn generate_corpus(cfg: &SynthGrammarConfig, vocab: &SymbolVocabulary, n: usize, seed: u64) -> Result<Vec<FormulaSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    (0..n as u64)
        .map(|i| {
            let markup = sample_markup(cfg, seed, i)?;
            let r = render_sample(cfg, &markup, seed, i)?;
            FormulaSample::new(format!("f{i:05}"), r.image, &markup, vocab)
        })
        .collect()
}
