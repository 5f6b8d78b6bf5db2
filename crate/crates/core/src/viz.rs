//! Heatmap export for counting maps and decoder attention.
//!
//! Maps live on the coarse feature grid; they are upsampled with
//! nearest-neighbour so each cell stays a visible block.

use std::path::{Path, PathBuf};

use candle_core::{DType, IndexOp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{BatchTensors, CanModel, CountFeed};
use crate::nn::Mode;
use crate::synth::{pad_batch, FormulaSample, Raster};
use crate::vocab::{SymbolVocabulary, EOS_ID};
use crate::{Error, Result};

/// Nearest-neighbour upsampling of a row-major `h x w` grid to `out_h x out_w`,
/// with values divided by `scale` and clamped to [0, 1].
pub fn upsample_nearest(grid: &[f32], h: usize, w: usize, out_h: usize, out_w: usize, scale: f32) -> Result<Raster> {
    if grid.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape(format!("grid of {} values is not {h}x{w}", grid.len())));
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut r = Raster::zeros(out_h, out_w);
    for y in 0..out_h {
        let gy = (y * h / out_h).min(h - 1);
        for x in 0..out_w {
            let gx = (x * w / out_w).min(w - 1);
            r.data[y * out_w + x] = (grid[gy * w + gx] / scale).clamp(0.0, 1.0);
        }
    }
    Ok(r)
}

/// File-system-safe name for a token: `\sum` becomes `sum`, `+` becomes `plus`.
pub fn sanitize_token(token: &str) -> String {
    let named = match token {
        "+" => Some("plus"),
        "-" => Some("minus"),
        "=" => Some("eq"),
        "(" => Some("lparen"),
        ")" => Some("rparen"),
        "{" => Some("lbrace"),
        "}" => Some("rbrace"),
        "^" => Some("sup"),
        "_" => Some("sub"),
        _ => None,
    };
    if let Some(n) = named {
        return n.to_string();
    }
    let body = token.trim_start_matches('\\');
    body.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_string() } else { format!("u{:x}", c as u32) })
        .collect()
}

fn sanitize_id(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes one heatmap per counting branch for each class in `classes`, or for
/// the sample's ground-truth visible classes when `classes` is `None`.
/// Files are named `<sample>_<token>_k<kernel>.png`.
pub fn export_counting_maps(
    model: &CanModel,
    vocab: &SymbolVocabulary,
    sample: &FormulaSample,
    dir: impl AsRef<Path>,
    classes: Option<&[usize]>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let batch = pad_batch(&[sample])?;
    let t = BatchTensors::new(&batch, model.dtype())?;
    let f = model.features(&t, &Mode::Eval)?;
    let out = model
        .counting(&f, &Mode::Eval)?
        .ok_or_else(|| Error::Config("model has no counting module".into()))?;
    let invisible = vocab.invisible_ids();
    let chosen: Vec<usize> = match classes {
        Some(c) => c.to_vec(),
        None => (0..vocab.len())
            .filter(|&c| sample.counts.as_slice()[c] > 0.0 && !invisible.contains(&c))
            .collect(),
    };
    let (_, gh, gw, _) = f.dims()?;
    let mut paths = Vec::new();
    for (branch, map) in model.mscm.as_ref().map(|m| &m.branches).into_iter().flatten().zip(&out.maps) {
        let map = map.i(0)?.to_dtype(DType::F32)?;
        for &c in &chosen {
            if c >= vocab.len() {
                return Err(Error::InvalidId { id: c, size: vocab.len() });
            }
            let grid: Vec<f32> = map.i((.., .., c))?.flatten_all()?.to_vec1()?;
            let raster = upsample_nearest(&grid, gh, gw, batch.height, batch.width, 1.0)?;
            let path = dir.join(format!(
                "{}_{}_k{}.png",
                sanitize_id(&sample.id),
                sanitize_token(vocab.token(c)?),
                branch.kernel
            ));
            crop(&raster, sample.image.height, sample.image.width).save_png(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Greedy-decodes `sample` and writes one attention heatmap per emitted
/// symbol as `<sample>_step<t>_<token>.png`, each scaled to its own peak.
pub fn export_attention_maps(
    model: &CanModel,
    vocab: &SymbolVocabulary,
    sample: &FormulaSample,
    dir: impl AsRef<Path>,
    feed: CountFeed,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let batch = pad_batch(&[sample])?;
    let t = BatchTensors::new(&batch, model.dtype())?;
    let f = model.features(&t, &Mode::Eval)?;
    let (_, gh, gw, _) = f.dims()?;
    let counting = model.counting(&f, &Mode::Eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = model.decoder_counts(counting.as_ref(), &batch, feed, &vocab.invisible_ids(), &mut rng)?;
    let inputs = model.decoder.prepare(&f, v.as_ref())?;
    let decoded = model.decoder.greedy_decode(&inputs, model.config.decoder.max_len)?.remove(0);
    let mut paths = Vec::new();
    for (step, (alpha, &id)) in decoded.alphas.iter().zip(&decoded.ids[1..]).enumerate() {
        let peak = alpha.iter().cloned().fold(0.0f32, f32::max);
        let raster = upsample_nearest(alpha, gh, gw, batch.height, batch.width, peak)?;
        let name = if id == EOS_ID { "eos".to_string() } else { sanitize_token(vocab.token(id)?) };
        let path = dir.join(format!("{}_step{}_{}.png", sanitize_id(&sample.id), step + 1, name));
        crop(&raster, sample.image.height, sample.image.width).save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn crop(r: &Raster, h: usize, w: usize) -> Raster {
    if r.height == h && r.width == w {
        return r.clone();
    }
    let mut out = Raster::zeros(h, w);
    for y in 0..h.min(r.height) {
        for x in 0..w.min(r.width) {
            out.data[y * w + x] = r.data[y * r.width + x];
        }
    }
    out
}
