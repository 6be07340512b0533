//! The `paumer` command line: dataset generation and conversion, training,
//! sweeps, benchmarks and entropy reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O or file-format error, 1 anything else.

mod config;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sha2::{Digest, Sha256};

pub use config::{DatasetSpec, RunConfig};

use crate::data::{convert_png_dir, read_dataset, write_dataset, Dataset, SyntheticTaskConfig};
use crate::error::{Error, Result};
use crate::eval::{
    bench_throughput, skyline, sweep, write_entropy_csv, write_tradeoff_csv, DecodeMode, Selection, SweepOptions,
};
use crate::model::ModelParams;
use crate::pausing::PauseConfig;
use crate::training::{load_checkpoint, Baseline, BatchSource, Trainer};

#[derive(Debug, Parser)]
#[command(name = "paumer", version, about = "Entropy-based patch pausing for segmentation transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `dataset.count`.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides `dataset.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model with randomized pausing.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; batches are generated on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_baseline)]
        baseline: Option<Baseline>,
        /// Total number of steps to reach (overrides `train.steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over pause configurations.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        configs: ConfigArgs,
        /// Run config supplying the `eval` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "tradeoff.csv")]
        out: PathBuf,
        /// Also write the non-dominated rows here.
        #[arg(long)]
        skyline: Option<PathBuf>,
        /// Pause uniformly random tokens (seeded) instead of low-entropy ones.
        #[arg(long)]
        random_seed: Option<u64>,
        /// Paused tokens keep their auxiliary predictions.
        #[arg(long)]
        early_exit: bool,
    },
    /// Time the paused forward pass.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        configs: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token auxiliary entropy and correctness at chosen layers.
    ReportEntropy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated layers; every second layer by default.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value = "entropy.csv")]
        out: PathBuf,
    },
    /// Convert paired image/label PNGs into a dataset file.
    Convert {
        /// Directory holding `images/` and `labels/`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
pub struct ConfigArgs {
    /// JSON list of configurations, each a stage list or an id like "3:0.2+5:0.2".
    #[arg(long)]
    configs: Option<PathBuf>,
    /// The thirteen standard configurations.
    #[arg(long)]
    table1: bool,
    /// Configuration id; repeatable.
    #[arg(long = "pause")]
    pause: Vec<PauseConfig>,
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected entropy, random_pausing or no_pausing".into())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigEntry {
    Id(String),
    Stages(PauseConfig),
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Vec<PauseConfig>> {
        let mut out = Vec::new();
        if let Some(path) = &self.configs {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let entries: Vec<ConfigEntry> = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            for entry in entries {
                out.push(match entry {
                    ConfigEntry::Id(id) => id.parse()?,
                    ConfigEntry::Stages(c) => c,
                });
            }
        }
        if self.table1 {
            out.extend(PauseConfig::table1());
        }
        out.extend(self.pause.iter().cloned());
        Ok(out)
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::ShapeMismatch { .. } => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::InvalidLabel { .. } => 4,
        _ => 1,
    }
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, count, seed } => {
            let cfg = RunConfig::load(config)?;
            let data = Dataset::synthetic(
                &cfg.task,
                seed.unwrap_or(cfg.dataset.seed),
                count.unwrap_or(cfg.dataset.count),
            )?;
            ensure_parent(&out)?;
            write_dataset(&data, &out)?;
            print_file_summary(data.len(), &out)
        }
        Command::Train {
            config,
            data,
            baseline,
            steps,
            resume,
            out_dir,
        } => train(RunConfig::load(config)?, data, baseline, steps, resume, out_dir),
        Command::Sweep {
            checkpoint,
            data,
            configs,
            config,
            out,
            skyline: skyline_out,
            random_seed,
            early_exit,
        } => {
            let mut options = match config {
                Some(path) => RunConfig::load(path)?.eval,
                None => SweepOptions::default(),
            };
            if let Some(seed) = random_seed {
                options.eval.selection = Selection::Random { seed };
            }
            if early_exit {
                options.eval.decode = DecodeMode::EarlyExit;
            }
            let configs = configs.resolve()?;
            let params = load_params(&checkpoint)?;
            let data = load_data(&data, &params)?;
            let echo = serde_json::json!({
                "checkpoint": checkpoint,
                "configs": configs.iter().map(PauseConfig::id).collect::<Vec<_>>(),
                "options": options,
            });
            println!("{echo}");
            let points = sweep(&params, &configs, &data, &options)?;
            write_tradeoff_csv(create(&out)?, &points)?;
            if let Some(path) = skyline_out {
                write_tradeoff_csv(create(&path)?, &skyline(&points))?;
            }
            Ok(())
        }
        Command::Bench {
            checkpoint,
            configs,
            batch,
            warmup,
            iters,
            out,
        } => {
            let configs = configs.resolve()?;
            let params = load_params(&checkpoint)?;
            let m = params.config();
            let task = SyntheticTaskConfig {
                height: m.image_height,
                width: m.image_width,
                num_classes: m.num_classes,
                ..Default::default()
            };
            if batch == 0 {
                return Err(Error::config("--batch must be positive"));
            }
            let (images, _) = crate::data::collate(&Dataset::synthetic(&task, 0, batch)?.samples)?;
            let sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(create(path)?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["config_id", "images_per_sec", "median_secs", "token_layer_products"])
                .map_err(csv_err)?;
            for c in &configs {
                let t = bench_throughput(&params, c, &images, warmup, iters)?;
                w.write_record([
                    c.id(),
                    t.images_per_sec.to_string(),
                    t.median_secs.to_string(),
                    t.token_layer_products.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io("bench output", e))
        }
        Command::ReportEntropy {
            checkpoint,
            data,
            layers,
            batch,
            out,
        } => {
            let params = load_params(&checkpoint)?;
            let layers = layers.unwrap_or_else(|| (2..=params.config().num_layers).step_by(2).collect());
            let data = load_data(&data, &params)?;
            let rows = write_entropy_csv(create(&out)?, &params, &data, &layers, batch)?;
            println!("{}", serde_json::json!({ "rows": rows, "layers": layers }));
            Ok(())
        }
        Command::Convert { input, num_classes, out } => {
            let data = convert_png_dir(&input, num_classes)?;
            ensure_parent(&out)?;
            write_dataset(&data, &out)?;
            print_file_summary(data.len(), &out)
        }
    }
}

fn train(
    cfg: RunConfig,
    data: Option<PathBuf>,
    baseline: Option<Baseline>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut trainer = match &resume {
        Some(path) => {
            let t = Trainer::resume(path, Some(&cfg.model))?;
            if baseline.is_some_and(|b| b != t.config.baseline) {
                return Err(Error::config("--baseline differs from the resumed checkpoint"));
            }
            t
        }
        None => {
            let mut train = cfg.train.clone();
            if let Some(b) = baseline {
                train.baseline = b;
            }
            Trainer::new(&cfg.model, train)?
        }
    };
    let seed = trainer.config.seed;
    let source = match data {
        Some(path) => {
            let data = load_data(&path, &trainer.params)?;
            BatchSource::Dataset {
                data: Arc::new(data),
                seed,
            }
        }
        None => BatchSource::Synthetic { task: cfg.task, seed },
    };
    let until = steps.unwrap_or(trainer.config.steps as u64);
    let log_path = dir.join("train.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log);
    let ckpt = dir.join("checkpoint.pmckpt");
    let reports = trainer.run(&source, until, Some(&mut log), Some(&ckpt));
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let reports = reports?;
    if reports.is_empty() {
        trainer.save(&ckpt)?;
    }
    let summary = serde_json::json!({
        "step": trainer.step,
        "final_loss_main": reports.last().map(|r| r.loss_main),
        "checkpoint": ckpt,
        "log": log_path,
    });
    println!("{summary}");
    Ok(())
}

fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(path, None)?.params)
}

fn load_data(path: &Path, params: &ModelParams) -> Result<Dataset> {
    let data = read_dataset(path)?;
    let m = params.config();
    if (data.height, data.width, data.num_classes) != (m.image_height, m.image_width, m.num_classes) {
        return Err(Error::config(format!(
            "{} holds {}x{} images with {} classes; the model expects {}x{} with {}",
            path.display(),
            data.height,
            data.width,
            data.num_classes,
            m.image_height,
            m.image_width,
            m.num_classes
        )));
    }
    Ok(data)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("csv output", std::io::Error::other(e))
}

/// Sample count and SHA-256 of the written file.
fn print_file_summary(count: usize, path: &Path) -> Result<()> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    println!(
        "{}",
        serde_json::json!({ "samples": count, "sha256": hex::encode(hasher.finalize()) })
    );
    Ok(())
}
