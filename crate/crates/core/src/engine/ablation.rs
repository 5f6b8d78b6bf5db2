//! Component ablation ladder and the counting-feed study.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{config_hash, dataset_id, evaluate, split_corpus, train, EvalOptions, EvalSummary, RunOutput, TrainConfig};
use crate::metrics::{csv_field, RunMetadata};
use crate::model::{AblationFlags, CanModel, CountFeed, ModelConfig, ParamCounts};
use crate::synth::FormulaSample;
use crate::vocab::SymbolVocabulary;
use crate::Result;

/// One trained configuration evaluated on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub held_out: EvalSummary,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn run_one(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &SymbolVocabulary,
    corpus: &[FormulaSample],
    held_out: &[FormulaSample],
    seed: u64,
    dir: Option<PathBuf>,
) -> Result<(SeedResult, ParamCounts)> {
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let (tr, val) = split_corpus(corpus, cfg.validation_fraction, seed);
    let mut model = CanModel::new(model_cfg, vocab.len(), DType::F32, seed)?;
    let record = train(&cfg, &mut model, vocab, &tr, &val, &RunOutput { dir: dir.clone() })?;
    let meta = RunMetadata {
        config_hash: record.config_hash.clone(),
        checkpoint_id: match &record.checkpoint {
            Some(p) => super::checkpoint_id(p)?,
            None => "in-memory".into(),
        },
        dataset_id: dataset_id(held_out),
    };
    let report = evaluate(&model, vocab, held_out, &EvalOptions::from_train(&cfg), meta)?;
    if let Some(d) = &dir {
        report.write_json(d.join("held_out_report.json"))?;
        fs::write(d.join("run_record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok((
        SeedResult {
            seed,
            held_out: EvalSummary::from(&report),
            best_epoch: record.best_epoch,
            checkpoint: record.checkpoint,
            wall_seconds: record.wall_seconds,
        },
        record.params,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub params: ParamCounts,
    pub runs: Vec<SeedResult>,
    pub exprate: f64,
    pub leq1: f64,
    pub leq2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,positional_encoding,joint_optimization,counting_vector,params,seeds,exprate,leq1,leq2,config_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{:.4},{:.4},{}",
                csv_field(&r.name),
                r.flags.positional_encoding,
                r.flags.joint_optimization,
                r.flags.counting_vector,
                r.params.total,
                r.runs.len(),
                r.exprate,
                r.leq1,
                r.leq2,
                self.config_hash
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>3} {:>3} {:>3} {:>10} {:>8} {:>8} {:>8}\n", "row", "PE", "JO", "CV", "params", "ExpRate", "<=1", "<=2");
        let tick = |b: bool| if b { "x" } else { "-" };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>3} {:>3} {:>3} {:>10} {:>8.2} {:>8.2} {:>8.2}",
                r.name,
                tick(r.flags.positional_encoding),
                tick(r.flags.joint_optimization),
                tick(r.flags.counting_vector),
                r.params.total,
                r.exprate,
                r.leq1,
                r.leq2
            );
        }
        s
    }
}

/// Trains the four cumulative component rows for every seed and scores each
/// on `held_out`. Each run selects its checkpoint on a validation split of
/// `corpus`. Writes `ablation.csv` and `ablation.txt` when `out` has a directory.
pub fn ablation_suite(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &SymbolVocabulary,
    corpus: &[FormulaSample],
    held_out: &[FormulaSample],
    seeds: &[u64],
    out: &RunOutput,
) -> Result<AblationTable> {
    let config_hash = config_hash(&(base, train_cfg, seeds))?;
    let mut rows = Vec::with_capacity(4);
    for (name, flags) in AblationFlags::ladder() {
        let cfg = base.clone().with_ablation(flags);
        let mut runs = Vec::with_capacity(seeds.len());
        let mut params = None;
        for &seed in seeds {
            let dir = out.dir.as_ref().map(|d| d.join(format!("{}_seed{seed}", name.trim_start_matches('+'))));
            let (r, p) = run_one(&cfg, train_cfg, vocab, corpus, held_out, seed, dir)?;
            log::info!("{name} seed {seed}: ExpRate {:.2}", r.held_out.exprate);
            runs.push(r);
            params = Some(p);
        }
        let params = match params {
            Some(p) => p,
            None => CanModel::new(&cfg, vocab.len(), DType::F32, 0)?.param_counts(),
        };
        rows.push(AblationRow {
            name: name.to_string(),
            flags,
            params,
            exprate: mean(runs.iter().map(|r| r.held_out.exprate)),
            leq1: mean(runs.iter().map(|r| r.held_out.leq1)),
            leq2: mean(runs.iter().map(|r| r.held_out.leq2)),
            runs,
        });
    }
    let table = AblationTable { config_hash, rows };
    if let Some(d) = &out.dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("ablation.csv"), table.to_csv())?;
        fs::write(d.join("ablation.txt"), table.to_text())?;
        fs::write(d.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedRow {
    pub feed: CountFeed,
    pub runs: Vec<SeedResult>,
    pub exprate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedStudy {
    pub config_hash: String,
    pub rows: Vec<FeedRow>,
}

impl FeedStudy {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>8}\n", "count feed", "ExpRate");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>8.2}", r.feed.label(), r.exprate);
        }
        s
    }
}

/// Trains one full model per counting-vector source, feeding the same source
/// during training and held-out evaluation.
pub fn count_feed_study(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &SymbolVocabulary,
    corpus: &[FormulaSample],
    held_out: &[FormulaSample],
    feeds: &[CountFeed],
    seeds: &[u64],
    out: &RunOutput,
) -> Result<FeedStudy> {
    let config_hash = config_hash(&(model_cfg, train_cfg, feeds, seeds))?;
    let mut rows = Vec::with_capacity(feeds.len());
    for &feed in feeds {
        feed.validate()?;
        let cfg = TrainConfig { count_feed: feed, ..train_cfg.clone() };
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let dir = out.dir.as_ref().map(|d| d.join(format!("feed_{}_seed{seed}", feed.label().replace(['(', ')'], ""))));
            let (r, _) = run_one(model_cfg, &cfg, vocab, corpus, held_out, seed, dir)?;
            log::info!("{} seed {seed}: ExpRate {:.2}", feed.label(), r.held_out.exprate);
            runs.push(r);
        }
        rows.push(FeedRow { feed, exprate: mean(runs.iter().map(|r| r.held_out.exprate)), runs });
    }
    let study = FeedStudy { config_hash, rows };
    if let Some(d) = &out.dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("count_feed.txt"), study.to_text())?;
        fs::write(d.join("count_feed.json"), serde_json::to_string_pretty(&study)?)?;
    }
    Ok(study)
}
