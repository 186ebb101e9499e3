//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.
//! Progress and diagnostics go to standard error; results go to files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{run_ablation, write_csv, AblationData, AblationPlan};
use crate::config::Config;
use crate::data::{dataset_from_off_dir, dataset_read, dataset_write, synthetic_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{export_probe_ply, extract_dataset, linear_probe, run_probes, write_probe_csv, EvalConfig, Labeled};
use crate::gradcheck::{render_table, run_suite};
use crate::train::{build_model, load_model, Checkpoint, Trainer, TrainOutputs};

#[derive(Parser, Debug)]
#[command(name = "pointdisc", version, about = "Self-supervised point-cloud learning by point discrimination")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for the command's main source of randomness.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (data.clouds clouds of data.n_points points).
    GenData,
    /// Sample point clouds from a directory of OFF meshes, one class per subdirectory.
    ConvertOff {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Only read meshes from `<class>/<SUBDIR>/`, e.g. `train`.
        #[arg(long)]
        subdir: Option<String>,
    },
    /// Pretrain the encoder and consistency network.
    Pretrain {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Metrics CSV (default: the output path with a `.csv` extension).
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Fit a linear probe on frozen features.
    LinearEval {
        /// Pretrained checkpoint; omit together with `--fresh` to probe a new model.
        #[arg(long, value_name = "PATH", required_unless_present = "fresh")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        fresh: bool,
        #[arg(long, value_name = "PATH")]
        train: PathBuf,
        #[arg(long, value_name = "PATH")]
        val: PathBuf,
        #[arg(long, value_name = "PATH")]
        test: PathBuf,
    },
    /// Score uniform points against local features and measure shape fidelity.
    ShapeProbe {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Write one PLY per probe into this directory.
        #[arg(long, value_name = "DIR")]
        ply_dir: Option<PathBuf>,
    },
    /// Run an ablation sweep over `ablate.axis`.
    Ablate {
        #[arg(long, value_name = "PATH")]
        train: PathBuf,
        #[arg(long, value_name = "PATH")]
        val: PathBuf,
        #[arg(long, value_name = "PATH")]
        test: PathBuf,
    },
    /// Verify analytic gradients of every block against finite differences.
    Gradcheck {
        /// Entries checked per parameter tensor of the full model.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

/// Errors split by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the command and returns its exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `pointdisc --help` for usage");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Defaults, then `base` (a checkpoint's config), then the config file,
/// then `--set` overrides, then `--seed` into `seed_key`.
fn resolve(common: &Common, base: Option<Config>, seed_key: Option<&str>) -> CliResult<Config> {
    let mut c = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        c.apply_text(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
    }
    for s in &common.set {
        c.apply_override(s).map_err(|e| Failure::Usage(format!("--set {s}: {e}")))?;
    }
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        c.set(key, &seed.to_string())?;
    }
    Ok(c)
}

fn out_path(common: &Common) -> CliResult<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("this command needs --out PATH".into()))
}

fn read_split(path: &Path) -> Result<Dataset> {
    let ds = dataset_read(path)?;
    ds.validate()?;
    Ok(ds)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData => {
            let out = out_path(common)?;
            let c = resolve(common, None, Some("data.seed"))?;
            let split: Split = c.get("data.split").parse()?;
            let ds = synthetic_dataset(c.usize("data.clouds"), c.usize("data.n_points"), c.u64("data.seed"), split)?;
            dataset_write(&ds, out)?;
            eprintln!("wrote {} {split} clouds to {}", ds.clouds.len(), out.display());
        }
        Command::ConvertOff { input, subdir } => {
            let out = out_path(common)?;
            let c = resolve(common, None, Some("data.seed"))?;
            let split: Split = c.get("data.split").parse()?;
            let (ds, dropped) =
                dataset_from_off_dir(&input, split, subdir.as_deref(), c.usize("data.n_points"), c.u64("data.seed"))?;
            dataset_write(&ds, out)?;
            eprintln!(
                "wrote {} clouds in {} classes to {} ({dropped} degenerate faces dropped)",
                ds.clouds.len(),
                ds.class_names.len(),
                out.display()
            );
        }
        Command::Pretrain { data, metrics, resume } => {
            let out = out_path(common)?;
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let stored = ck.as_ref().map(Checkpoint::resolved_config).transpose()?;
            let c = resolve(common, stored.clone(), Some("train.seed"))?;
            let dataset = read_split(&data)?;
            let mut trainer = match (&ck, stored) {
                (Some(ck), Some(stored)) => {
                    // only the run length may change on resume
                    let changed: Vec<&str> = c.diff(&stored).into_iter().filter(|k| *k != "train.epochs").collect();
                    if !changed.is_empty() {
                        return Err(Failure::Usage(format!("resume cannot change {}", changed.join(", "))));
                    }
                    let mut t = Trainer::resume(ck, &dataset)?;
                    t.cfg.epochs = c.usize("train.epochs");
                    t.config = c;
                    t
                }
                _ => Trainer::new(&c, &dataset)?,
            };
            let outputs = TrainOutputs {
                checkpoint: Some(out.to_path_buf()),
                metrics: Some(metrics.unwrap_or_else(|| out.with_extension("csv"))),
            };
            let total = trainer.cfg.epochs;
            trainer.run(&outputs, |s| {
                eprintln!(
                    "epoch {}/{total}  loss {:.6}  lr {:.2e}  {:.1}s",
                    s.epoch, s.mean_loss, s.lr, s.wall_seconds
                );
            })?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::LinearEval {
            checkpoint,
            fresh,
            train,
            val,
            test,
        } => {
            let out = out_path(common)?;
            let (c, model) = match (&checkpoint, fresh) {
                (Some(path), _) => {
                    let (stored, _) = load_model(path)?;
                    let c = resolve(common, Some(stored), Some("eval.seed"))?;
                    let mut model = build_model(&c)?;
                    Checkpoint::load(path)?.restore(&mut model, None)?;
                    (c, model)
                }
                (None, _) => {
                    let c = resolve(common, None, Some("train.seed"))?;
                    let model = build_model(&c)?;
                    (c, model)
                }
            };
            let cfg = EvalConfig::from_config(&c)?;
            let labeled = |p: &Path| -> Result<Labeled> {
                let ds = read_split(p)?;
                Labeled::new(extract_dataset(&model, &ds)?, ds.labels())
            };
            let report = linear_probe(&labeled(&train)?, &labeled(&val)?, &labeled(&test)?, &cfg)?;
            let mut text = c.comment_block();
            text.push_str("metric,value\n");
            text.push_str(&format!("test_accuracy,{}\n", report.test_accuracy));
            text.push_str(&format!("train_accuracy,{}\n", report.train_accuracy));
            text.push_str(&format!("lambda,{}\n", report.lambda));
            for (l, a) in &report.val_accuracy {
                text.push_str(&format!("val_accuracy@{l},{a}\n"));
            }
            fs::write(out, text).map_err(|e| Error::io(out, e))?;
            eprintln!("test accuracy {:.4} at lambda {}", report.test_accuracy, report.lambda);
        }
        Command::ShapeProbe {
            checkpoint,
            data,
            ply_dir,
        } => {
            let out = out_path(common)?;
            let (stored, _) = load_model(&checkpoint)?;
            let c = resolve(common, Some(stored), Some("eval.seed"))?;
            let mut model = build_model(&c)?;
            Checkpoint::load(&checkpoint)?.restore(&mut model, None)?;
            let cfg = EvalConfig::from_config(&c)?;
            let results = run_probes(&model, &read_split(&data)?, &cfg)?;
            write_probe_csv(out, &c, &results)?;
            if let Some(dir) = ply_dir {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (i, r) in results.iter().enumerate() {
                    export_probe_ply(r, &dir.join(format!("probe_{i:03}.ply")))?;
                }
            }
            let n = results.len() as f64;
            let top = results.iter().map(|r| r.top_k_dist).sum::<f64>() / n;
            let control = results.iter().map(|r| r.control_dist).sum::<f64>() / n;
            eprintln!("mean top-k distance {top:.4}, control {control:.4}, ratio {:.3}", top / control);
        }
        Command::Ablate { train, val, test } => {
            let out = out_path(common)?;
            let c = resolve(common, None, Some("train.seed"))?;
            let plan = AblationPlan::from_config(&c)?;
            let (train, val, test) = (read_split(&train)?, read_split(&val)?, read_split(&test)?);
            let data = AblationData {
                train: &train,
                val: &val,
                test: &test,
            };
            let outcome = run_ablation(&plan, &data, |cell| match &cell.error {
                None => eprintln!(
                    "{} = {} repeat {}: accuracy {:.4}, final loss {:.6}",
                    plan.axis, cell.value, cell.repeat, cell.probe_accuracy, cell.mean_loss_final
                ),
                Some(e) => eprintln!("{} = {} repeat {}: failed: {e}", plan.axis, cell.value, cell.repeat),
            })?;
            write_csv(out, &plan, &outcome)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Gradcheck { samples } => {
            let c = resolve(common, None, None)?;
            let checks = run_suite(&c, common.seed.unwrap_or(0), samples.max(1))?;
            let table = render_table(&checks);
            eprint!("{table}");
            if let Some(out) = &common.out {
                fs::write(out, &table).map_err(|e| Error::io(out, e))?;
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.report.pass).map(|c| c.block).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}
