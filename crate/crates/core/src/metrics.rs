//! Expression recognition rates and averaged counting errors.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::strip_framing;

/// Token-level Levenshtein distance with unit costs, ignoring `sos`/`eos`
/// framing on either side. Structural tokens count as symbols.
pub fn edit_distance(pred: &[usize], target: &[usize]) -> usize {
    let a = strip_framing(pred);
    let b = strip_framing(target);
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(ExpRate, <=1, <=2)` in percent.
pub fn rates_from_distances(distances: &[usize]) -> Result<(f64, f64, f64)> {
    if distances.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n = distances.len() as f64;
    let pct = |k: usize| 100.0 * distances.iter().filter(|&&d| d <= k).count() as f64 / n;
    Ok((pct(0), pct(1), pct(2)))
}

pub fn expression_metrics<P: AsRef<[usize]>, T: AsRef<[usize]>>(pairs: &[(P, T)]) -> Result<(f64, f64, f64)> {
    let d: Vec<usize> = pairs
        .iter()
        .map(|(p, t)| edit_distance(p.as_ref(), t.as_ref()))
        .collect();
    rates_from_distances(&d)
}

/// Per-image `(MAE, MSE)`; MSE is the root of the mean squared error.
pub fn image_counting_errors(predicted: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("count vector"));
    }
    let c = predicted.len() as f64;
    let (abs, sq) = predicted
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(a, s), (p, t)| {
            let d = (p - t).abs();
            (a + d, s + d * d)
        });
    Ok((abs / c, (sq / c).sqrt()))
}

/// `(MAE_Ave, MSE_Ave)` over images.
pub fn counting_metrics<P: AsRef<[f64]>, T: AsRef<[f64]>>(per_image: &[(P, T)]) -> Result<(f64, f64)> {
    if per_image.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut mae = 0.0;
    let mut mse = 0.0;
    for (p, t) in per_image {
        let (a, s) = image_counting_errors(p.as_ref(), t.as_ref())?;
        mae += a;
        mse += s;
    }
    let n = per_image.len() as f64;
    Ok((mae / n, mse / n))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub predicted: String,
    pub target: String,
    pub edit_distance: usize,
    pub truncated: bool,
    /// Predicted minus ground-truth count per class; empty without a counting module.
    pub count_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exprate: f64,
    pub leq1: f64,
    pub leq2: f64,
    pub mae_ave: Option<f64>,
    pub mse_ave: Option<f64>,
    pub per_sample: Vec<SampleRecord>,
    pub metadata: RunMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,edit_distance,truncated,count_abs_error,predicted,target")?;
        for r in &self.per_sample {
            let abs: f64 = r.count_error.iter().map(|e| e.abs()).sum();
            writeln!(
                f,
                "{},{},{},{:.6},{},{}",
                csv_field(&r.id),
                r.edit_distance,
                r.truncated,
                abs,
                csv_field(&r.predicted),
                csv_field(&r.target)
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let counting = match (self.mae_ave, self.mse_ave) {
            (Some(a), Some(s)) => format!(" MAE_Ave {a:.4} MSE_Ave {s:.4}"),
            _ => String::new(),
        };
        format!(
            "ExpRate {:.2} <=1 {:.2} <=2 {:.2}{} ({} samples)",
            self.exprate,
            self.leq1,
            self.leq2,
            counting,
            self.per_sample.len()
        )
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
