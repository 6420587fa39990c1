//! Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
//! 2 runtime failure.
//!
//! Configuration precedence: `--set key=value` and dedicated flags override
//! the `--config` file, which overrides built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_synthetic, load_manifest, CooccurrenceSpec, Dataset, PairBoost};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, read_labels, read_predictions, write_predictions};
use crate::model::{AuNet, HeadKind};
use crate::relation::{BooleanAdjacency, Propagation};
use crate::train::{build_adjacency, predict_all, run_ablation, run_stage1, run_stage2, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "aunet", version, about = "Facial action unit detection with attention and AU relation graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for every artifact of this run (created if absent).
    #[arg(long, short = 'o')]
    pub output_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one configuration key, e.g. `--set stage1_epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Do not echo output paths or reports to stdout.
    #[arg(long, short = 'q')]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadArg {
    Graph,
    Direct,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Graph => HeadKind::Graph,
            HeadArg::Direct => HeadKind::Direct,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with planted AU co-occurrence.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long, short = 'n')]
        samples: usize,
        /// Pair boost `SOURCE:TARGET:STRENGTH`; replaces the default boosts.
        #[arg(long = "boost")]
        boosts: Vec<String>,
        /// Drop the default pair boosts.
        #[arg(long)]
        no_boosts: bool,
        /// Twelve comma-separated base occurrence rates.
        #[arg(long)]
        base_rates: Option<String>,
    },
    /// Build the thresholded AU relation graph from training labels.
    BuildAdjacency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        propagation: Option<PropagationArg>,
        #[arg(long)]
        symmetrize: bool,
        #[arg(long)]
        transpose: bool,
    },
    /// Stage 1: train the feature extractor with the direct classifier.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 2: freeze the extractor, train the graph or direct head.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adjacency file; built from the training labels when omitted.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "graph")]
        head: HeadArg,
    },
    /// Score predictions, either from files or from a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "labels", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "graph")]
        head: HeadArg,
        /// Decision threshold; overrides the configuration.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train both stage-2 arms from one stage-1 run and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; the training set is scored when omitted.
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
    /// Write the predefined and refined attention maps of one sample as
    /// grayscale PNGs.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Row of the manifest to export.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Nearest-neighbour upscaling factor.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PropagationArg {
    RowNormalized,
    Raw,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::BuildAdjacency { common, .. }
            | Command::TrainStage1 { common, .. }
            | Command::TrainStage2 { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::ExportAttention { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::BuildAdjacency { .. } => "build-adjacency",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::ExportAttention { .. } => "export-attention",
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Loads the configuration file (if any) and applies overrides.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut table = match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>().map_err(|e| Error::config(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {kv:?} is not KEY=VALUE")))?;
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::config("seed must fit in a signed 64-bit integer"))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    let cfg = RunConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a, E: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    extra: E,
}

fn write_run_manifest<E: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, extra: E) -> Result<()> {
    let m = RunManifest {
        command,
        seed: cfg.seed,
        config: cfg,
        extra,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
    cfg.save(&dir.join("config.toml"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn parse_boost(s: &str) -> Result<PairBoost> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::validation(format!("boost {s:?} is not SOURCE:TARGET:STRENGTH"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok(PairBoost {
        source: parts[0].parse().map_err(|_| bad())?,
        target: parts[1].parse().map_err(|_| bad())?,
        strength: parts[2].parse().map_err(|_| bad())?,
    })
}

fn load_adjacency(path: Option<&PathBuf>, data: &Dataset, cfg: &RunConfig) -> Result<BooleanAdjacency> {
    match path {
        Some(p) => BooleanAdjacency::load(p),
        None => build_adjacency(&data.manifest.label_rows(), cfg),
    }
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let mut cfg = resolve_config(common)?;
    let out = &common.output_dir;
    let say = |s: &dyn std::fmt::Display| {
        if !common.quiet {
            println!("{s}");
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    match cmd {
        Command::Generate {
            samples,
            boosts,
            no_boosts,
            base_rates,
            ..
        } => {
            let mut spec = CooccurrenceSpec {
                seed: cfg.seed,
                ..Default::default()
            };
            if *no_boosts {
                spec.pair_boosts.clear();
            }
            if !boosts.is_empty() {
                spec.pair_boosts = boosts.iter().map(|b| parse_boost(b)).collect::<Result<_>>()?;
            }
            if let Some(r) = base_rates {
                let v: Vec<f64> = r
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::validation(format!("base rates {r:?} are not numbers")))?;
                spec.base_rates = v
                    .try_into()
                    .map_err(|v: Vec<f64>| Error::validation(format!("expected 12 base rates, got {}", v.len())))?;
            }
            let data = generate_synthetic(&spec, *samples)?;
            let csv = data.save(out)?;
            write_json(&out.join("generation.json"), &spec)?;
            write_run_manifest(out, cmd.name(), &cfg, &spec)?;
            say(&csv.display());
        }
        Command::BuildAdjacency {
            data,
            threshold,
            propagation,
            symmetrize,
            transpose,
            ..
        } => {
            if let Some(t) = threshold {
                cfg.relation_threshold = *t;
            }
            if let Some(p) = propagation {
                cfg.propagation = match p {
                    PropagationArg::RowNormalized => Propagation::RowNormalized,
                    PropagationArg::Raw => Propagation::Raw,
                };
            }
            cfg.symmetrize |= *symmetrize;
            cfg.transpose |= *transpose;
            cfg.validate()?;
            let manifest = load_manifest(data)?;
            let adj = build_adjacency(&manifest.label_rows(), &cfg)?;
            let path = out.join("adjacency.json");
            adj.save(&path)?;
            write_run_manifest(out, cmd.name(), &cfg, data)?;
            say(&path.display());
        }
        Command::TrainStage1 { data, .. } => {
            let ds = Dataset::load(data)?;
            write_run_manifest(out, cmd.name(), &cfg, data)?;
            let s1 = run_stage1(&ds, &cfg, Some(out))?;
            if let Some(p) = s1.checkpoint_path {
                say(&p.display());
            }
        }
        Command::TrainStage2 {
            data,
            checkpoint,
            adjacency,
            head,
            ..
        } => {
            let ds = Dataset::load(data)?;
            let ck = Checkpoint::load(checkpoint)?;
            let adj = load_adjacency(adjacency.as_ref(), &ds, &cfg)?;
            adj.save(&out.join("adjacency.json"))?;
            write_run_manifest(out, cmd.name(), &cfg, (data, checkpoint))?;
            let s2 = run_stage2(&ck, &ds, &adj, &cfg, (*head).into(), Some(out))?;
            if let Some(p) = s2.checkpoint_path {
                say(&p.display());
            }
        }
        Command::Evaluate {
            pred,
            labels,
            checkpoint,
            data,
            adjacency,
            head,
            threshold,
            ..
        } => {
            if let Some(t) = threshold {
                cfg.decision_threshold = *t;
                cfg.validate()?;
            }
            let report = match (pred, labels, checkpoint, data) {
                (Some(p), Some(l), None, _) => evaluate(&read_predictions(p)?, &labels_from(l)?, cfg.decision_threshold)?,
                (None, _, Some(ck), Some(d)) => {
                    let ds = Dataset::load(d)?;
                    let model = AuNet::from_checkpoint(&cfg.model()?, &Checkpoint::load(ck)?)?;
                    let kind: HeadKind = (*head).into();
                    let g = match (kind, adjacency) {
                        (HeadKind::Graph, None) => {
                            return Err(Error::validation("evaluating the graph head needs --adjacency"));
                        }
                        (_, Some(a)) => BooleanAdjacency::load(a)?.g,
                        (HeadKind::Direct, None) => BooleanAdjacency::identity(crate::face::NUM_AUS).g,
                    };
                    let preds = predict_all(&model, kind, &ds, &g, cfg.execution())?;
                    write_predictions(&out.join("predictions.csv"), &preds)?;
                    evaluate(&preds, &ds.manifest.label_rows(), cfg.decision_threshold)?
                }
                _ => {
                    return Err(Error::validation(
                        "evaluate needs either --pred and --labels or --checkpoint and --data",
                    ))
                }
            };
            report.save(&out.join("report.json"))?;
            write_run_manifest(out, cmd.name(), &cfg, ())?;
            say(&report.to_json()?);
        }
        Command::Ablate { data, test_data, .. } => {
            let train = Dataset::load(data)?;
            let test = test_data.as_ref().map(|p| Dataset::load(p)).transpose()?;
            write_run_manifest(out, cmd.name(), &cfg, (data, test_data))?;
            let report = run_ablation(&train, test.as_ref(), &cfg, Some(out))?;
            say(&report.to_json()?);
        }
        Command::ExportAttention {
            checkpoint,
            data,
            index,
            scale,
            ..
        } => {
            let ds = Dataset::load(data)?;
            if *index >= ds.len() {
                return Err(Error::validation(format!("index {index} past the {} samples", ds.len())));
            }
            if *scale == 0 {
                return Err(Error::validation("scale must be positive"));
            }
            let model = AuNet::from_checkpoint(&cfg.model()?, &Checkpoint::load(checkpoint)?)?;
            let cache = model.attention_maps(ds.sample(*index).image)?;
            for (stage, maps) in [("predefined", &cache.predefined), ("refined", &cache.refined)] {
                for m in maps.iter() {
                    let path = out.join(format!("{stage}_au{:02}.png", m.au_index));
                    save_gray(&path, &m.map, m.w, m.h, *scale)?;
                }
            }
            write_run_manifest(out, cmd.name(), &cfg, (checkpoint, data, index))?;
            say(&out.display());
        }
    }
    Ok(())
}

/// Accepts a bare 12-column label file or a dataset manifest.
fn labels_from(path: &Path) -> Result<Vec<crate::dataset::AuLabels>> {
    match read_labels(path) {
        Ok(l) => Ok(l),
        Err(e) => load_manifest(path).map(|m| m.label_rows()).map_err(|_| e),
    }
}

fn save_gray(path: &Path, map: &[f64], w: usize, h: usize, scale: u32) -> Result<()> {
    let s = scale as usize;
    let (ow, oh) = (w * s, h * s);
    let mut px = vec![0u8; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            px[y * ow + x] = (map[(y / s) * w + x / s].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image::save_buffer_with_format(
        path,
        &px,
        ow as u32,
        oh as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
