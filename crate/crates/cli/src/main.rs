use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fmfnet::ablation::ablation_run;
use fmfnet::bench::bench;
use fmfnet::checkpoint::Checkpoint;
use fmfnet::config::TrainConfig;
use fmfnet::gradsuite::{full_loss_check, op_suite};
use fmfnet::io::{read_dataset, read_detections, write_dataset, write_detections};
use fmfnet::pipeline::{evaluate_dataset, from_records, infer_dataset, to_records};
use fmfnet::synth::{generate_dataset, SceneSpec};
use fmfnet::train::{train, write_trace, TraceRow};
use fmfnet::types::SceneSequence;
use fmfnet::Error;

#[derive(Parser)]
#[command(name = "fmfnet", version, about = "Temporal BEV 3D detection on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences from a scene spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sequences to write; seeds count up from the scene's seed.
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
    /// Train a detector and write a checkpoint plus a loss trace.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override `key=value`, dotted keys, JSON values.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Loss trace CSV (default: the checkpoint path with `.trace.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a checkpoint over a dataset and write detections as JSON lines.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detection file against a dataset's ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train and compare two configs that differ only in FMF settings.
    Ablate {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        /// Training sequences (default: 20 synthetic sequences).
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Held-out sequences (default: 5 synthetic sequences).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Applied to both configs.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op.
    GradCheck {
        /// Also check the full training loss on a small detector.
        #[arg(long)]
        full: bool,
    },
    /// Per-stage latency, sequential and parallel.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        };
    }
    1
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> fmfnet::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn class_names(scenes: &[SceneSequence]) -> anyhow::Result<Vec<String>> {
    match scenes.first() {
        Some(s) => Ok(s.class_names.clone()),
        None => Err(Error::Data("dataset has no sequences".into()).into()),
    }
}

fn num_frames(scenes: &[SceneSequence]) -> usize {
    scenes.iter().map(|s| s.frames.len()).sum()
}

fn synthetic_split() -> fmfnet::Result<(Vec<SceneSequence>, Vec<SceneSequence>)> {
    let spec = SceneSpec {
        num_frames: 5,
        ego_speed: 2.0,
        ..Default::default()
    };
    let held_spec = SceneSpec {
        seed: 10_000,
        ..spec.clone()
    };
    Ok((generate_dataset(&spec, 20)?, generate_dataset(&held_spec, 5)?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            sequences,
        } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let spec: SceneSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            if sequences == 0 {
                return Err(Error::Usage("--sequences must be at least 1".into()).into());
            }
            let seqs = generate_dataset(&spec, sequences)?;
            write_dataset(&seqs, &out)?;
            println!(
                "wrote {} sequences, {} frames to {}",
                seqs.len(),
                num_frames(&seqs),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
            trace,
            quiet,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let scenes = read_dataset(&data)?;
            let mut report = |r: &TraceRow| {
                if !quiet && (r.step % 50 == 0) {
                    eprintln!(
                        "step {:>6}  lr {:.2e}  L_hm {:.4}  L_total {:.4}",
                        r.step, r.lr, r.heatmap, r.total
                    );
                }
            };
            let outcome = train(&cfg, &scenes, Some(&mut report))?;
            outcome.checkpoint(&cfg).save(&out)?;
            let trace_path = trace.unwrap_or_else(|| out.with_extension("trace.csv"));
            write_trace(&outcome.trace, &trace_path)?;
            let last = outcome.trace.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps, final loss {last:.4}; checkpoint {}, trace {}",
                outcome.trace.len(),
                out.display(),
                trace_path.display()
            );
        }
        Command::Infer { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut model = ck.restore()?;
            let scenes = read_dataset(&data)?;
            if class_names(&scenes)? != ck.class_names {
                return Err(Error::Data(format!(
                    "dataset classes {:?} differ from checkpoint classes {:?}",
                    scenes[0].class_names, ck.class_names
                ))
                .into());
            }
            let outputs = infer_dataset(&mut model, &scenes)?;
            let dets: Vec<_> = outputs.into_iter().map(|o| o.detections).collect();
            let records = to_records(&dets, &ck.class_names)?;
            write_detections(&records, &out)?;
            println!("{} detections over {} frames", records.len(), dets.len());
        }
        Command::Eval {
            dets,
            data,
            out,
            config,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let scenes = read_dataset(&data)?;
            let names = class_names(&scenes)?;
            let records = read_detections(&dets)?;
            let per_frame = from_records(&records, &names, num_frames(&scenes))?;
            let result = evaluate_dataset(per_frame, &scenes, &names, &cfg.decode)?;
            print!("{}", result.to_table());
            write_json(&result, &out)?;
        }
        Command::Ablate {
            config_a,
            config_b,
            train_data,
            eval_data,
            overrides,
            out,
        } => {
            let a = load_config(Some(&config_a), &overrides)?;
            let b = load_config(Some(&config_b), &overrides)?;
            let (train_set, held_out) = match (train_data, eval_data) {
                (Some(t), Some(e)) => (read_dataset(t)?, read_dataset(e)?),
                (None, None) => synthetic_split()?,
                _ => {
                    return Err(Error::Usage(
                        "give both --train-data and --eval-data, or neither".into(),
                    )
                    .into())
                }
            };
            let report = ablation_run(&a, &b, &train_set, &held_out)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write_json(&report, &p)?;
            }
        }
        Command::GradCheck { full } => {
            let mut entries = op_suite()?;
            if full {
                entries.push(full_loss_check(12)?);
            }
            for e in &entries {
                println!("{}", e.line());
            }
            let failed = entries.iter().filter(|e| !e.passed()).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", entries.len());
            }
        }
        Command::Bench {
            ckpt,
            data,
            frames,
            out,
        } => {
            let model = Checkpoint::load(&ckpt)?.restore()?;
            let scenes = read_dataset(&data)?;
            let (report, _) = bench(&model, &scenes, frames)?;
            println!("sequential");
            print!("{}", report.single.to_table());
            println!(
                "parallel ({} threads, wall {:.3} s)",
                report.threads, report.parallel_wall_seconds
            );
            print!("{}", report.parallel.to_table());
            if let Some(p) = out {
                write_json(&report, &p)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
