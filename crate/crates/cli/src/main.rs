use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hhpnet::evaluation::evaluate;
use hhpnet::io::{self, EstimateRecord};
use hhpnet::keypoints::normalize;
use hhpnet::laeo::{GateInterval, UncertaintyGate, DEFAULT_DELTA, DEFAULT_TAU};
use hhpnet::losses::LossKind;
use hhpnet::report;
use hhpnet::synthetic::{generate_dataset, with_random_drops, NoiseModel, PoseDistribution};
use hhpnet::training::{prepare, train_with, TrainConfig};
use hhpnet::ModelConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "hhpnet", version, about = "Head pose with uncertainty from five keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with its per-epoch history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value = "unc")]
        loss: LossKind,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, env = io::SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a model on a labelled dataset and write a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict a pose estimate per record as JSON lines.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every head pair of every frame, with and without the uncertainty gate.
    Laeo {
        #[arg(long)]
        frames: PathBuf,
        /// Needed when heads are given as keypoints.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, value_enum, default_value_t = Interval::Closed)]
        interval: Interval,
        /// Summary JSON; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-pair JSON lines.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Generate a synthetic labelled dataset.
    Synth {
        #[arg(long)]
        n: usize,
        /// Keypoint noise standard deviation at zero yaw, in pixels.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Extra noise per degree of |yaw|.
        #[arg(long, default_value_t = 0.04)]
        yaw_gain: f64,
        /// Fraction of samples reduced to 2-5 keypoints.
        #[arg(long, default_value_t = 0.0)]
        drop_fraction: f64,
        #[arg(long, env = io::SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with each loss on the same split and compare validation errors.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, env = io::SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        /// JSON report; the text table always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Interval {
    /// Accept mean log-variance in [0, delta].
    Closed,
    /// Accept mean log-variance up to delta.
    UpperOnly,
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => io::write_atomic(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<Vec<hhpnet::Sample>> {
    let data = io::read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{} contains no records", path.display());
    }
    Ok(data)
}

fn load_model(path: &Path) -> Result<hhpnet::ModelParams> {
    io::load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            data,
            val,
            loss,
            alpha,
            epochs,
            seed,
            lr,
            batch_size,
            out,
            history,
            quiet,
        } => {
            let train_set = prepare(&load_data(&data)?)?;
            let val_set = prepare(&load_data(&val)?)?;
            let config = TrainConfig {
                learning_rate: lr,
                batch_size,
                epochs,
                loss_kind: loss,
                seed,
                ..TrainConfig::default()
            };
            let (params, hist) =
                train_with(&ModelConfig::with_alpha(alpha), &train_set, &val_set, &config, |e| {
                    if !quiet {
                        eprintln!(
                            "epoch {:>4}  train {:>10.4}  val {:>10.4}  val MAE {:.3}",
                            e.epoch, e.train_loss, e.val_loss, e.val_mae.overall
                        );
                    }
                })?;
            io::save_model(&out, &params)?;
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.jsonl");
                p.into()
            });
            io::write_history(&history, &hist)?;
            if let Some(best) = hist.best() {
                eprintln!(
                    "best epoch {} (val MAE {:.3}); wrote {} and {}",
                    best.epoch,
                    best.val_mae.overall,
                    out.display(),
                    history.display()
                );
            }
        }
        Command::Eval { model, data, report: out } => {
            let params = load_model(&model)?;
            let evaluation = evaluate(&params, &load_data(&data)?)?;
            emit(out.as_deref(), &report::to_json(&report::eval_report(&evaluation)?)?)?;
        }
        Command::Infer { model, data, out } => {
            let params = load_model(&model)?;
            let samples = load_data(&data)?;
            let inputs = samples
                .iter()
                .map(|s| normalize(&s.keypoints).with_context(|| format!("record '{}'", s.id)))
                .collect::<Result<Vec<_>>>()?;
            let estimates = params.predict(&inputs)?;
            let lines = samples.iter().zip(estimates).map(|(s, e)| {
                let r = EstimateRecord::from(e);
                json!({ "id": s.id, "pose": r.pose, "log_var": r.log_var })
            });
            emit(out.as_deref(), &io::to_jsonl(lines)?)?;
        }
        Command::Laeo {
            frames,
            model,
            tau,
            delta,
            interval,
            report: out,
            pairs,
        } => {
            if !(delta > 0.0) {
                bail!("--delta must be positive");
            }
            let records = io::read_frames(&frames)
                .with_context(|| format!("reading {}", frames.display()))?;
            let params = model.as_deref().map(load_model).transpose()?;
            let resolved = records
                .iter()
                .map(|f| f.resolve(params.as_ref()))
                .collect::<hhpnet::Result<Vec<_>>>()?;
            let gate = UncertaintyGate {
                delta,
                interval: match interval {
                    Interval::Closed => GateInterval::Closed,
                    Interval::UpperOnly => GateInterval::UpperOnly,
                },
            };
            let (summary, lines) = report::laeo_report(&resolved, tau, gate)?;
            if let Some(p) = pairs {
                io::write_atomic(&p, &io::to_jsonl(&lines)?)?;
            }
            emit(out.as_deref(), &report::to_json(&summary)?)?;
        }
        Command::Synth {
            n,
            noise,
            yaw_gain,
            drop_fraction,
            seed,
            out,
        } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            if !(0.0..=1.0).contains(&drop_fraction) {
                bail!("--drop-fraction must lie in [0, 1]");
            }
            let noise = NoiseModel::heteroscedastic(noise, yaw_gain);
            let mut samples = generate_dataset(n, &PoseDistribution::default(), &noise, seed)?;
            if drop_fraction > 0.0 {
                samples = with_random_drops(&samples, drop_fraction, 2..=5, seed ^ 0xD0)?;
            }
            io::write_dataset(&out, &samples)?;
        }
        Command::Ablate {
            data,
            val,
            seed,
            alpha,
            epochs,
            report: out,
        } => {
            let train_set = prepare(&load_data(&data)?)?;
            let val_set = prepare(&load_data(&val)?)?;
            let config = TrainConfig {
                epochs,
                seed,
                ..TrainConfig::default()
            };
            let result = report::run_ablation(
                &ModelConfig::with_alpha(alpha),
                &train_set,
                &val_set,
                &config,
                |kind, e| {
                    if (e.epoch + 1) % 10 == 0 || e.epoch + 1 == epochs {
                        eprintln!("{:<5} epoch {:>4}  val MAE {:.3}", kind.name(), e.epoch, e.val_mae.overall);
                    }
                },
            )?;
            print!("{}", result.to_table());
            if let Some(p) = out {
                io::write_atomic(&p, &report::to_json(&result)?)?;
            }
        }
    }
    Ok(())
}
