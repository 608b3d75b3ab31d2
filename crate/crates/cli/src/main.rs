//! `triplane`: data generation, training, evaluation, FLOP reports, benchmarks and plots.
//!
//! Exit codes: 1 configuration error, 2 I/O or file-format error, 3 numeric
//! failure. The reason goes to stderr as one line, `error[<kind>]: <message>`.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use triplane::bench::{append_csv, bench_forward, BenchConfig};
use triplane::config::{ModelConfig, PeMode, Task};
use triplane::flops::{compare, count_model};
use triplane::tasks::{evaluate, log_csv, train, Dataset, DatasetSpec, Schedule, TrainConfig};
use triplane::{model::Checkpoint, Error, Model};

#[derive(Parser)]
#[command(name = "triplane", version, about = "Tri-plane voxel networks: data, training, FLOPs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Complete,
    Classify,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Complete => Task::Complete,
            TaskArg::Classify => Task::Classify,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PeArg {
    None,
    Sinusoidal,
    Coordconv,
    Mlp,
    Transformer,
}

impl From<PeArg> for PeMode {
    fn from(p: PeArg) -> PeMode {
        match p {
            PeArg::None => PeMode::None,
            PeArg::Sinusoidal => PeMode::Sinusoidal,
            PeArg::Coordconv => PeMode::Coordconv,
            PeArg::Mlp => PeMode::Mlp,
            PeArg::Transformer => PeMode::Transformer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a model config file from a preset.
    Config {
        /// backbone, hybrid-1/2, hybrid-1/4 or dense3d.
        #[arg(long)]
        preset: String,
        #[arg(long, value_parser = parse_dims, default_value = "32")]
        dims: [usize; 3],
        #[arg(long, value_enum, default_value = "complete")]
        task: TaskArg,
        #[arg(long, value_enum)]
        pe: Option<PeArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory of VXG1 files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = parse_dims, default_value = "32")]
        dims: [usize; 3],
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Fraction of occupied voxels removed from completion inputs.
        #[arg(long, default_value_t = 0.4)]
        occlusion: f64,
    },
    /// Train a model; writes checkpoint.json, metrics.csv and report.json under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation set used to pick the best checkpoint.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_enum, default_value = "constant")]
        schedule: ScheduleArg,
        /// Shuffling seed; the initialization seed lives in the config.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; defaults to `<checkpoint>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage FLOP report, or a comparison table with --compare.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        /// Evaluate at these dims instead of the config's.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        /// Report path; defaults to `<config>.flops.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward-only latency and throughput.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Defaults to TRIPLANE_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        /// Run the volumetric branch beside the plane stream.
        #[arg(long)]
        concurrent: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV ledger to append to; a JSON report is written beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy-against-FLOPs scatter from training runs.
    Plot {
        /// metrics.csv files; each needs report.json in the same directory.
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric on the y axis; defaults to iou, then accuracy.
        #[arg(long)]
        metric: Option<String>,
    },
}

/// `32` or `32x32x48`.
fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [d] => Ok([d; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected D or DxDyDz, got {s:?}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::Numeric(_) | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn kind(code: u8) -> &'static str {
    match code {
        2 => "io",
        3 => "numeric",
        _ => "config",
    }
}

fn read_config(path: &Path) -> triplane::Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    ModelConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> triplane::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_at(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> triplane::Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// `a/b.json` → `a/b.<suffix>.json`.
fn beside(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn load_dataset(dir: &Path) -> triplane::Result<Dataset> {
    Dataset::load(dir).map_err(|e| match e {
        Error::Io(io) => io_at(dir, io),
        e => e,
    })
}

fn run(cmd: Cmd) -> triplane::Result<()> {
    match cmd {
        Cmd::Config {
            preset,
            dims,
            task,
            pe,
            seed,
            out,
        } => {
            let mut c = ModelConfig::preset(&preset, dims)?.with_task(task.into());
            if let Some(pe) = pe {
                c = c.with_pe(pe.into());
            }
            c.seed = seed;
            c.validate()?;
            write(&out, &(c.to_json() + "\n"))?;
            println!("{} ({}) -> {}", c.label(), c.hash(), out.display());
        }
        Cmd::GenData {
            out,
            seed,
            count,
            dims,
            task,
            occlusion,
        } => {
            let spec = DatasetSpec {
                occlusion,
                ..DatasetSpec::new(seed, count, dims, task.into())
            };
            let d = Dataset::generate(&spec)?;
            d.save(&out)?;
            let labels = d.labels();
            let hist: Vec<usize> = (0..spec.classes.len()).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
            println!("{} samples ({:?}) at {dims:?} -> {}; per class {hist:?}", d.len(), spec.task, out.display());
            write_json(&out.join("report.json"), &json!({ "command": "gen-data", "spec": spec, "class_counts": hist }))?;
        }
        Cmd::Train {
            config,
            data,
            val,
            out,
            epochs,
            lr,
            batch_size,
            max_steps,
            schedule,
            seed,
        } => {
            let cfg = read_config(&config)?;
            let tc = TrainConfig {
                lr,
                batch_size,
                epochs,
                seed,
                max_steps,
                schedule: match schedule {
                    ScheduleArg::Constant => Schedule::Constant,
                    ScheduleArg::Cosine => Schedule::Cosine,
                },
            };
            let train_set = load_dataset(&data)?;
            let val_set = val.as_deref().map(load_dataset).transpose()?;
            let flops = count_model(&cfg, cfg.dims)?;
            let outcome = train(cfg.clone(), &train_set, val_set.as_ref(), &tc)?;
            let ckpt = out.join("checkpoint.json");
            std::fs::create_dir_all(&out).map_err(|e| io_at(&out, e))?;
            outcome.model.checkpoint().save(&ckpt)?;
            write(&out.join("metrics.csv"), &log_csv(&outcome.log))?;
            let final_metrics = match &val_set {
                Some(v) => Some(evaluate(&outcome.model, v)?),
                None => None,
            };
            println!(
                "{}: {} steps, best epoch {}, {} -> {}",
                cfg.label(),
                outcome.steps,
                outcome.best_epoch,
                final_metrics
                    .as_ref()
                    .map_or("no validation set".into(), |m| m.entries().iter().map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ")),
                out.display()
            );
            write_json(
                &out.join("report.json"),
                &json!({
                    "command": "train",
                    "label": cfg.label(),
                    "config_hash": cfg.hash(),
                    "config": cfg,
                    "train": tc,
                    "flops": flops.total,
                    "params": flops.params,
                    "steps": outcome.steps,
                    "best_epoch": outcome.best_epoch,
                    "val": final_metrics,
                }),
            )?;
        }
        Cmd::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = Model::<f32>::from_checkpoint(&ck)?;
            let d = load_dataset(&data)?;
            let m = evaluate(&model, &d)?;
            for (n, v) in m.entries() {
                println!("{n:<12}{v:.6}");
            }
            let out = out.unwrap_or_else(|| beside(&checkpoint, "eval"));
            write_json(
                &out,
                &json!({
                    "command": "eval",
                    "label": model.config.label(),
                    "config_hash": model.config.hash(),
                    "samples": d.len(),
                    "metrics": m,
                }),
            )?;
        }
        Cmd::Flops {
            config,
            compare: others,
            dims,
            out,
        } => {
            let cfg = read_config(&config)?;
            let dims = dims.unwrap_or(cfg.dims);
            let report = count_model(&cfg, dims)?;
            println!("{report}");
            let mut doc = json!({ "command": "flops", "report": report });
            if !others.is_empty() {
                let mut all = vec![cfg];
                for p in &others {
                    all.push(read_config(p)?);
                }
                let c = compare(&all, dims)?;
                println!("\n{c}");
                doc["comparison"] = serde_json::to_value(&c)?;
            }
            write_json(&out.unwrap_or_else(|| beside(&config, "flops")), &doc)?;
        }
        Cmd::Bench {
            config,
            iters,
            warmup,
            threads,
            dims,
            concurrent,
            seed,
            out,
        } => {
            let cfg = read_config(&config)?;
            let bc = BenchConfig {
                warmup,
                iters,
                threads,
                concurrent,
                seed,
                ..BenchConfig::default()
            };
            let r = bench_forward(&cfg, dims.unwrap_or(cfg.dims), &bc)?;
            println!(
                "{} at {:?}: mean {:.3} ms, median {:.3} ms, p95 {:.3} ms, {:.2} volumes/s ({} threads{})",
                r.config_id,
                r.dims,
                r.mean_ms,
                r.median_ms,
                r.p95_ms,
                r.throughput,
                r.threads,
                if r.concurrent { ", concurrent streams" } else { "" }
            );
            if let Some(out) = out {
                append_csv(&out, std::slice::from_ref(&r)).map_err(|e| match e {
                    Error::Io(io) => io_at(&out, io),
                    e => e,
                })?;
                write_json(&out.with_extension("json"), &serde_json::to_value(&r)?)?;
            }
        }
        Cmd::Plot { metrics, out, metric } => {
            let runs = metrics.iter().map(|p| plot::Run::load(p, metric.as_deref())).collect::<triplane::Result<Vec<_>>>()?;
            let svg = plot::scatter(&runs);
            write(&out, &svg)?;
            println!("{} series -> {}", runs.len(), out.display());
            write_json(&out.with_extension("json"), &json!({ "command": "plot", "series": runs }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error[{}]: {}", kind(code), e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
