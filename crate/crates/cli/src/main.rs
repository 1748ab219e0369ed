//! `geofm` command-line interface.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use geofm::backbone::ApmFlags;
use geofm::data::{generate_dataset, read_dataset, write_dataset};
use geofm::eval::{dataset_hash, dump_query_attention, extract_features, features_csv, knn_eval, FeatureSource};
use geofm::trainer::{build_batch, load_checkpoint, save_checkpoint, train_step, Branch, ModelState};

use config::{Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "geofm", version, about = "Multi-modal remote-sensing encoder: data, pre-training and evaluation")]
struct Cli {
    /// JSON configuration file (see config.schema.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Primary output path of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress logs on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON, or its schema with `--schema`.
    ShowConfig {
        #[arg(long)]
        schema: bool,
    },
    /// Generate a synthetic dataset file (default output: data.mmds).
    GenData {
        /// Number of samples; overrides dataset.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train from a dataset file and write a checkpoint (default output: model.ckpt).
    Pretrain {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides train.total_iters; 0 writes the initialized model.
        #[arg(long)]
        iters: Option<usize>,
        /// Named configuration preset, e.g. `apm-ablation:1/4`.
        #[arg(long)]
        preset: Option<String>,
        /// Write one JSON object per iteration to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cosine k-NN classification on frozen image-level features.
    EvalKnn {
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset providing the labelled neighbours.
        #[arg(long)]
        train: PathBuf,
        /// Dataset whose samples are classified.
        #[arg(long)]
        test: PathBuf,
        /// Neighbors (default 20, or eval.k from the config).
        #[arg(long)]
        k: Option<usize>,
        /// `teacher` or `student` weights (default: eval.branch).
        #[arg(long)]
        branch: Option<Branch>,
        /// `fused` or `backbone` features (default: eval.source).
        #[arg(long)]
        source: Option<FeatureSource>,
    },
    /// Export per-query attention maps of one sample as .npy grids and PNGs
    /// (default output directory: attn).
    DumpAttn {
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `teacher` or `student` weights (default: eval.branch).
        #[arg(long)]
        branch: Option<Branch>,
    },
    /// Write image-level features as CSV `id,label,f0..` (stdout when no --out).
    ExportFeatures {
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// `teacher` or `student` weights (default: eval.branch).
        #[arg(long)]
        branch: Option<Branch>,
        /// `fused` or `backbone` features (default: eval.source).
        #[arg(long)]
        source: Option<FeatureSource>,
    },
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<geofm::Error> for Failure {
    fn from(e: geofm::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct Log(bool);

impl Log {
    fn info(&self, msg: impl std::fmt::Display) {
        if !self.0 {
            eprintln!("{msg}");
        }
    }
}

fn apply_preset(cfg: &mut Config, preset: &str) -> Result<(), Failure> {
    match preset.split_once(':') {
        Some(("apm-ablation", name)) => {
            cfg.model.backbone.apm = ApmFlags::preset(name).map_err(|e| Failure::Usage(e.to_string()))?;
            Ok(())
        }
        _ => Err(Failure::Usage(format!("unknown preset `{preset}` (expected apm-ablation:{{1/8,1/4,1/2,none}})"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    let log = Log(cli.quiet);
    let device = Device::Cpu;
    match cli.command {
        Command::ShowConfig { schema } => {
            if schema {
                print!("{}", config::SCHEMA);
                return Ok(());
            }
            let v = serde_json::to_value(&cfg).context("serializing config")?;
            print_json(&v)
        }
        Command::GenData { count } => {
            if let Some(n) = count {
                if n == 0 {
                    return Err(Failure::Usage("--count must be at least 1".into()));
                }
                cfg.dataset.count = n;
            }
            cfg.validate()?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("data.mmds"));
            let samples = generate_dataset(&cfg.dataset)?;
            write_dataset(&samples, &out)?;
            log.info(format!("wrote {} samples to {}", samples.len(), out.display()));
            print_json(&serde_json::json!({ "path": out, "count": samples.len(), "sha256": dataset_hash(&samples) }))
        }
        Command::Pretrain { data, iters, preset, metrics, resume } => {
            if let Some(p) = &preset {
                apply_preset(&mut cfg, p)?;
            }
            // Zero iterations writes the initialized model, a baseline for evaluation.
            if let Some(n) = iters.filter(|&n| n > 0) {
                cfg.train.total_iters = n;
            }
            cfg.validate()?;
            let samples = read(&data)?;
            let mut state = match &resume {
                Some(p) => load_checkpoint(p, DType::F32, &device).with_context(|| format!("loading {}", p.display()))?,
                None => ModelState::new(cfg.model.clone(), &cfg.train, DType::F32, &device)?,
            };
            if state.config != cfg.model {
                return Err(Failure::Config("model section differs from the resumed checkpoint".into()));
            }
            let mut metrics_file = match &metrics {
                Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let out = cli.out.unwrap_or_else(|| PathBuf::from("model.ckpt"));
            let start = state.iter;
            let end = if iters == Some(0) { start } else { cfg.train.total_iters };
            for it in start..end {
                let batch = build_batch(&samples, &cfg.train, &state, it)?;
                let m = train_step(&mut state, &batch, &cfg.train)?;
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&m).context("serializing metrics")?).context("writing metrics")?;
                }
                if it % 10 == 0 || it + 1 == end {
                    log.info(format!("iter {it:>5}  loss {:.4}  mgcl {:.4}  ita {:.4}  qsacl {:.4}  lr {:.2e}", m.loss, m.mgcl, m.ita, m.qsacl, m.lr));
                }
            }
            save_checkpoint(&state, &out)?;
            log.info(format!("wrote checkpoint {}", out.display()));
            let hr = cfg.model.backbone.output_grid(geofm::Modality::Hr, 512, 512);
            print_json(&serde_json::json!({
                "checkpoint": out,
                "iters": state.iter,
                "apm": cfg.model.backbone.apm,
                "hr_grid_at_512": [hr.0, hr.1],
            }))
        }
        Command::EvalKnn { checkpoint, train, test, k, branch, source } => {
            cfg.validate()?;
            let k = k.unwrap_or(cfg.eval.k);
            if k == 0 {
                return Err(Failure::Usage("--k must be at least 1".into()));
            }
            let branch = branch.unwrap_or(cfg.eval.branch);
            let source = source.unwrap_or(cfg.eval.source);
            let state = load(&checkpoint)?;
            let (train_s, test_s) = (read(&train)?, read(&test)?);
            if k > train_s.len() {
                return Err(Failure::Usage(format!("--k {k} exceeds the {} training samples", train_s.len())));
            }
            let a = extract_features(&state, branch, &train_s, source, cfg.eval.batch_size)?;
            let b = extract_features(&state, branch, &test_s, source, cfg.eval.batch_size)?;
            let mut report = knn_eval(&a, &b, k, state.config.num_classes)?;
            report.dataset_hash = format!("{}:{}", dataset_hash(&train_s), dataset_hash(&test_s));
            log.info(format!("k-NN accuracy {:.4} (k = {k})", report.accuracy));
            let json = serde_json::to_value(&report).context("serializing report")?;
            if let Some(out) = &cli.out {
                fs::write(out, serde_json::to_string_pretty(&json).context("serializing report")?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            print_json(&json)
        }
        Command::DumpAttn { checkpoint, data, index, branch } => {
            cfg.validate()?;
            let state = load(&checkpoint)?;
            let samples = read(&data)?;
            let sample = samples
                .get(index)
                .ok_or_else(|| Failure::Usage(format!("--index {index} outside {} samples", samples.len())))?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("attn"));
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut aug = cfg.train.aug.clone();
            aug.n_local = cfg.eval.attn_local_views;
            let maps = dump_query_attention(&state, branch.unwrap_or(cfg.eval.branch), sample, &aug, cfg.train.seed)?;
            let mut views = Vec::new();
            for q in &maps {
                q.write(&out)?;
                let max_dev = q.maps.iter().map(|m| (m.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
                views.push(serde_json::json!({
                    "view": q.view, "grid": [q.grid.0, q.grid.1], "queries": q.maps.len(), "max_row_sum_error": max_dev,
                }));
            }
            log.info(format!("wrote {} views to {}", maps.len(), out.display()));
            print_json(&serde_json::json!({ "dir": out, "views": views }))
        }
        Command::ExportFeatures { checkpoint, data, branch, source } => {
            cfg.validate()?;
            let state = load(&checkpoint)?;
            let samples = read(&data)?;
            let f = extract_features(
                &state,
                branch.unwrap_or(cfg.eval.branch),
                &samples,
                source.unwrap_or(cfg.eval.source),
                cfg.eval.batch_size,
            )?;
            let csv = features_csv(&f);
            match &cli.out {
                Some(out) => {
                    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
                    log.info(format!("wrote {} rows to {}", f.len(), out.display()));
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<Vec<geofm::data::GeoSample>, Failure> {
    Ok(read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?)
}

fn load(path: &Path) -> Result<ModelState, Failure> {
    Ok(load_checkpoint(path, DType::F32, &Device::Cpu).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn print_json(v: &serde_json::Value) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).context("serializing output")?);
    Ok(())
}
