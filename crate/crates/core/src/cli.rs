//! The `can` command-line tool.
//!
//! Configuration is a strict JSON document layered over desk defaults; each
//! `--set a.b.c=value` override is applied to the merged document before it
//! is parsed, so misspelt keys are rejected rather than ignored.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{
    ablation_suite, complexity_report, config_hash, count_feed_study, dataset_id, evaluate_checkpoint, split_corpus, train,
    RunOutput, TrainConfig,
};
use crate::model::{AblationFlags, CanModel, CountFeed, ModelConfig};
use crate::synth::{desk_vocabulary, generate_corpus, load_dataset, write_dataset, FormulaSample, Raster, SynthGrammarConfig};
use crate::viz::{export_attention_maps, export_counting_maps};
use crate::vocab::SymbolVocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `manifest.tsv`, `images/` and `vocab.txt`; synthesize when absent.
    pub dataset: Option<PathBuf>,
    pub samples: usize,
    /// Size of the separately seeded synthetic held-out set.
    pub held_out: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: None, samples: 200, held_out: 100, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub count_feeds: Vec<CountFeed>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            count_feeds: vec![CountFeed::Exact, CountFeed::Perturbed(0.1), CountFeed::Perturbed(0.3), CountFeed::Off],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthGrammarConfig,
    pub data: DataConfig,
    pub experiments: ExperimentConfig,
}

impl Default for CanConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthGrammarConfig::desk(),
            data: DataConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl CanConfig {
    /// Held-out comparison protocol for the component and counting-feed
    /// studies: short formulas, a 1000-sample corpus and 15 epochs keep one
    /// desk run to a few minutes on a CPU while leaving room between rows.
    pub fn study() -> Self {
        let mut c = Self::default();
        c.synth.max_len = 10;
        c.data.samples = 1000;
        c.data.held_out = 500;
        c.train.epochs = 15;
        c.train.eval_every = 1;
        c
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key in {spec:?}")))
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Preset {
    #[default]
    Desk,
    Study,
}

impl Preset {
    pub fn config(self) -> CanConfig {
        match self {
            Preset::Desk => CanConfig::default(),
            Preset::Study => CanConfig::study(),
        }
    }
}

/// The preset, then the file at `path`, then each override in order.
pub fn resolve_config(preset: Preset, path: Option<&Path>, overrides: &[String]) -> Result<CanConfig> {
    let mut doc = serde_json::to_value(preset.config())?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
        merge(&mut doc, serde_json::from_str(&text)?);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: CanConfig = serde_json::from_value(doc)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "can", about = "Counting-aware handwritten math recognition: data, training, evaluation and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Starting configuration that the file and overrides refine.
    #[arg(long, value_enum, default_value_t = Preset::Desk, global = true)]
    pub preset: Preset,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Shorthand for the run seed (`data.seed` for synth, a single `experiments.seeds` entry for ablate, `train.seed` otherwise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with manifest and vocabulary.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model and write its best checkpoint and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides `data.dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the recognized markup for one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Write counting-map and attention-map heatmaps for one image.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the component ablation ladder, or the counting-feed study.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Compare counting-vector sources instead of components.
        #[arg(long)]
        count_feed: bool,
    },
    /// Print parameter and multiply-accumulate counts.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 120)]
        height: usize,
        #[arg(long, default_value_t = 800)]
        width: usize,
        /// Use the full-scale architecture instead of `model` from the config.
        #[arg(long)]
        full: bool,
    },
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let d = common.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&d)?;
    Ok(d)
}

/// Records the resolved config; `hash` defaults to the hash of the whole config.
fn write_provenance(dir: &Path, command: &str, cfg: &CanConfig, hash: Option<String>, extra: Value) -> Result<String> {
    let hash = match hash {
        Some(h) => h,
        None => config_hash(cfg)?,
    };
    let doc = serde_json::json!({ "command": command, "config_hash": hash, "config": cfg, "details": extra });
    fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(hash)
}

pub fn corpus(cfg: &CanConfig, data: Option<&Path>) -> Result<(SymbolVocabulary, Vec<FormulaSample>)> {
    match data.or(cfg.data.dataset.as_deref()) {
        Some(dir) => {
            let vocab = SymbolVocabulary::load(dir.join("vocab.txt"))?;
            let samples = load_dataset(dir.join("manifest.tsv"), dir, &vocab)?;
            Ok((vocab, samples))
        }
        None => {
            let vocab = desk_vocabulary();
            let samples = generate_corpus(&cfg.synth, &vocab, cfg.data.samples, cfg.data.seed)?;
            Ok((vocab, samples))
        }
    }
}

/// A held-out synthetic set drawn with a seed disjoint from the training corpus.
pub fn held_out(cfg: &CanConfig, vocab: &SymbolVocabulary) -> Result<Vec<FormulaSample>> {
    let mut samples = generate_corpus(&cfg.synth, vocab, cfg.data.held_out, cfg.data.seed.wrapping_add(1_000_003))?;
    for s in &mut samples {
        s.id = format!("h{}", &s.id[1..]);
    }
    Ok(samples)
}

fn image_sample(path: &Path, vocab: &SymbolVocabulary) -> Result<FormulaSample> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    FormulaSample::new(id, Raster::from_luma(&img), "", vocab)
}

fn count_feed_from(meta: &HashMap<String, String>) -> Result<CountFeed> {
    Ok(match meta.get("count_feed") {
        Some(f) => serde_json::from_str(f)?,
        None => CountFeed::Off,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n } => {
            let mut cfg = resolve_config(common.preset, common.config.as_deref(), &common.overrides)?;
            if let Some(n) = n {
                cfg.data.samples = n;
            }
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let dir = out_dir(&common)?;
            let vocab = desk_vocabulary();
            let samples = generate_corpus(&cfg.synth, &vocab, cfg.data.samples, cfg.data.seed)?;
            write_dataset(&dir, &samples, &vocab)?;
            let id = dataset_id(&samples);
            write_provenance(&dir, "synth", &cfg, None, serde_json::json!({ "dataset_id": id }))?;
            println!("wrote {} samples to {} (dataset {id})", samples.len(), dir.display());
        }
        Command::Train { common, data } => {
            let mut cfg = resolve_config(common.preset, common.config.as_deref(), &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let dir = out_dir(&common)?;
            let (vocab, samples) = corpus(&cfg, data.as_deref())?;
            let (tr, val) = split_corpus(&samples, cfg.train.validation_fraction, cfg.train.seed);
            let mut model = CanModel::new(&cfg.model, vocab.len(), DType::F32, cfg.train.seed)?;
            // Same hash the checkpoint and run record carry.
            let run_hash = config_hash(&(&cfg.model, &cfg.train))?;
            let hash = write_provenance(&dir, "train", &cfg, Some(run_hash), serde_json::json!({ "dataset_id": dataset_id(&samples) }))?;
            let record = train(&cfg.train, &mut model, &vocab, &tr, &val, &RunOutput { dir: Some(dir.clone()) })?;
            fs::write(dir.join("run_record.json"), serde_json::to_string_pretty(&record)?)?;
            println!(
                "trained {} steps in {:.0}s; best epoch {} {:?}; config {hash}",
                record.steps.len(),
                record.wall_seconds,
                record.best_epoch,
                record.best_validation.map(|v| v.exprate)
            );
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = resolve_config(common.preset, common.config.as_deref(), &common.overrides)?;
            let (vocab, samples) = corpus(&cfg, data.as_deref())?;
            let report = evaluate_checkpoint(&checkpoint, &vocab, &samples, None)?;
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir)?;
                report.write_json(dir.join("report.json"))?;
                report.write_csv(dir.join("per_sample.csv"))?;
            }
            println!("{}", report.summary());
        }
        Command::Predict { common: _, checkpoint, image } => {
            let (model, ckpt) = CanModel::load(&checkpoint)?;
            let sample = image_sample(&image, &ckpt.vocab)?;
            let batch = crate::synth::pad_batch(&[&sample])?;
            let feed = match count_feed_from(&ckpt.metadata)? {
                // Ground truth is unknown for a bare image.
                CountFeed::Off => CountFeed::Off,
                _ => return Err(Error::Config("checkpoint was trained on ground-truth counts; predict needs its own".into())),
            };
            let mut rng = rand::SeedableRng::seed_from_u64(0);
            let p = model.predict(&batch, feed, &ckpt.vocab.invisible_ids(), &mut rng, None)?.remove(0);
            println!("{}", ckpt.vocab.join_ids(crate::vocab::strip_framing(&p.decoded.ids))?);
        }
        Command::Viz { common, checkpoint, image } => {
            let dir = out_dir(&common)?;
            let (model, ckpt) = CanModel::load(&checkpoint)?;
            let sample = image_sample(&image, &ckpt.vocab)?;
            let mut written = Vec::new();
            if model.mscm.is_some() {
                let visible: Vec<usize> = (0..ckpt.vocab.len()).filter(|&c| !ckpt.vocab.is_invisible(c)).collect();
                let batch = crate::synth::pad_batch(&[&sample])?;
                let mut rng = rand::SeedableRng::seed_from_u64(0);
                let pred = model.predict(&batch, CountFeed::Off, &ckpt.vocab.invisible_ids(), &mut rng, None)?.remove(0);
                let counts = pred.counts.unwrap_or_default();
                let present: Vec<usize> = visible.into_iter().filter(|&c| counts.get(c).is_some_and(|&v| v >= 0.5)).collect();
                written.extend(export_counting_maps(&model, &ckpt.vocab, &sample, &dir, Some(&present))?);
            }
            written.extend(export_attention_maps(&model, &ckpt.vocab, &sample, &dir, CountFeed::Off)?);
            println!("wrote {} heatmaps to {}", written.len(), dir.display());
        }
        Command::Ablate { common, data, count_feed } => {
            let mut cfg = resolve_config(common.preset, common.config.as_deref(), &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.experiments.seeds = vec![s];
            }
            let dir = out_dir(&common)?;
            let (vocab, samples) = corpus(&cfg, data.as_deref())?;
            let test = held_out(&cfg, &vocab)?;
            write_provenance(&dir, "ablate", &cfg, None, serde_json::json!({ "count_feed": count_feed }))?;
            let out = RunOutput { dir: Some(dir) };
            if count_feed {
                let model = cfg.model.clone().with_ablation(AblationFlags::FULL);
                let study = count_feed_study(&model, &cfg.train, &vocab, &samples, &test, &cfg.experiments.count_feeds, &cfg.experiments.seeds, &out)?;
                print!("{}", study.to_text());
            } else {
                let table = ablation_suite(&cfg.model, &cfg.train, &vocab, &samples, &test, &cfg.experiments.seeds, &out)?;
                print!("{}", table.to_text());
            }
        }
        Command::Report { common, height, width, full } => {
            let cfg = resolve_config(common.preset, common.config.as_deref(), &common.overrides)?;
            let base = if full { ModelConfig::full() } else { cfg.model.clone() };
            let classes = if full { 111 } else { desk_vocabulary().len() };
            let mut rows = Vec::new();
            for (name, flags) in [("baseline", AblationFlags::BASELINE), ("can", AblationFlags::FULL)] {
                let c = complexity_report(&base.clone().with_ablation(flags), classes, height, width)?;
                println!(
                    "{name:<9} params {:>11} (encoder {} / counting {} / decoder {})  MACs {:.2}G at 1x1x{height}x{width}, {} steps",
                    c.params.total, c.params.encoder, c.params.mscm, c.params.decoder, c.macs as f64 / 1e9, c.decode_steps
                );
                rows.push(serde_json::json!({ "row": name, "complexity": c }));
            }
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir)?;
                let hash = write_provenance(dir, "report", &cfg, None, serde_json::json!({ "full": full }))?;
                let doc = serde_json::json!({ "config_hash": hash, "classes": classes, "rows": rows });
                fs::write(dir.join("complexity.json"), serde_json::to_string_pretty(&doc)?)?;
            }
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for a vocabulary mismatch, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if matches!(e, Error::VocabMismatch { .. }) { 2 } else { 1 }
}

/// Parses the process arguments, runs, and reports failures as a single
/// `ERROR:<category>:` line.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR:{}: {}", e.category(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve_config(Preset::Desk, None, &["train.epochs=3".into(), "model.ablation.counting_vector=false".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.model.ablation.counting_vector);
        let cfg = resolve_config(Preset::Desk, None, &[r#"train.count_feed={"perturbed":0.3}"#.into()]).unwrap();
        assert_eq!(cfg.train.count_feed, CountFeed::Perturbed(0.3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve_config(Preset::Desk, None, &["train.epoch=3".into()]).is_err());
        assert!(resolve_config(Preset::Desk, None, &["nonsense=1".into()]).is_err());
        assert!(resolve_config(Preset::Desk, None, &["train.epochs".into()]).is_err());
    }

    #[test]
    fn file_layers_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"batch_size": 4}, "data": {"samples": 12}}"#).unwrap();
        let cfg = resolve_config(Preset::Desk, Some(&p), &["train.batch_size=2".into()]).unwrap();
        assert_eq!((cfg.train.batch_size, cfg.data.samples, cfg.train.epochs), (2, 12, 60));
        fs::write(&p, r#"{"train": {"batchsize": 4}}"#).unwrap();
        assert_eq!(resolve_config(Preset::Desk, Some(&p), &[]).unwrap_err().category(), "config");
    }
}
