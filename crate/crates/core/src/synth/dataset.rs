//! Manifest-based dataset I/O and batch padding.

use std::fs;
use std::path::Path;

use super::{FormulaSample, Raster};
use crate::encoder::DOWNSAMPLE;
use crate::vocab::{SymbolVocabulary, EOS_ID};
use crate::{Error, Result};

/// Loads `<image-relative-path>\t<tokens>` lines; pixel values are scaled to [0, 1] as stored.
pub fn load_dataset(manifest: impl AsRef<Path>, image_root: impl AsRef<Path>, vocab: &SymbolVocabulary) -> Result<Vec<FormulaSample>> {
    let manifest = manifest.as_ref();
    if !manifest.exists() {
        return Err(Error::MissingFile(manifest.to_path_buf()));
    }
    let text = fs::read_to_string(manifest)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: Error| Error::Manifest { path: manifest.to_path_buf(), line: i + 1, source: Box::new(e) };
        let (rel, markup) = line
            .split_once('\t')
            .ok_or_else(|| wrap(Error::MalformedSequence("expected <path>\\t<tokens>".into())))?;
        let path = image_root.as_ref().join(rel);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let image = Raster::from_luma(&image::open(&path).map_err(|e| wrap(e.into()))?.to_luma8());
        let id = Path::new(rel).file_stem().map_or_else(|| rel.to_string(), |s| s.to_string_lossy().into_owned());
        out.push(FormulaSample::new(id, image, markup, vocab).map_err(wrap)?);
    }
    Ok(out)
}

/// Writes `images/<id>.png`, `manifest.tsv` and `vocab.txt` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[FormulaSample], vocab: &SymbolVocabulary) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::new();
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save_png(dir.join(&rel))?;
        manifest.push_str(&format!("{rel}\t{}\n", s.markup));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    vocab.save(dir.join("vocab.txt"))
}

/// Zero-padded images, validity mask, eos-padded targets and count targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// `(B, H, W)` row-major.
    pub images: Vec<f32>,
    pub mask: Vec<f32>,
    /// Every row has the length of the longest target.
    pub targets: Vec<Vec<usize>>,
    /// True target lengths, sos and eos included.
    pub lengths: Vec<usize>,
    pub classes: usize,
    /// `(B, C)` row-major.
    pub counts: Vec<f64>,
}

/// Pads a batch to a common extent, both sides rounded up to a multiple of 16.
pub fn pad_batch(samples: &[&FormulaSample]) -> Result<Batch> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let classes = first.counts.len();
    let round = |v: usize| v.div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    let height = round(samples.iter().map(|s| s.image.height).max().unwrap_or(0));
    let width = round(samples.iter().map(|s| s.image.width).max().unwrap_or(0));
    let max_len = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    let b = samples.len();
    let mut images = vec![0.0f32; b * height * width];
    let mut mask = vec![0.0f32; b * height * width];
    let mut targets = Vec::with_capacity(b);
    let mut counts = Vec::with_capacity(b * classes);
    for (i, s) in samples.iter().enumerate() {
        if s.counts.len() != classes {
            return Err(Error::LengthMismatch { expected: classes, actual: s.counts.len() });
        }
        for y in 0..s.image.height {
            let dst = i * height * width + y * width;
            images[dst..dst + s.image.width].copy_from_slice(&s.image.data[y * s.image.width..(y + 1) * s.image.width]);
            mask[dst..dst + s.image.width].fill(1.0);
        }
        let mut t = s.tokens.ids().to_vec();
        t.resize(max_len, EOS_ID);
        targets.push(t);
        counts.extend_from_slice(s.counts.as_slice());
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        batch: b,
        height,
        width,
        images,
        mask,
        targets,
        lengths: samples.iter().map(|s| s.tokens.len()).collect(),
        classes,
        counts,
    })
}
