//! `implant-locator`: dataset generation, training, evaluation, prediction,
//! ablation and plot-data export.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use implant_locator::config::Config;
use implant_locator::embedding::{build_provider, Condition};
use implant_locator::eval::{write_predictions, EvalResult};
use implant_locator::manifest::{DatasetReader, Split};
use implant_locator::model::{Components, TripletNet};
use implant_locator::synthdata::{build_dataset, SlopeProfile, TargetParams};
use implant_locator::trainer::{self, RunDir};
use implant_locator::{Error, ErrorKind};

const DATA_ENV: &str = "IMPLANT_LOCATOR_DATA";

#[derive(Parser, Debug)]
#[command(name = "implant-locator", version, about = "Implant position regression from CBCT slice triplets")]
struct Cli {
    /// TOML run configuration; missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Triplet sampling interval.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset (slices + manifest.json).
    GenData {
        /// Output directory (default: $IMPLANT_LOCATOR_DATA, else ./data).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long, value_enum)]
        slope_profile: Option<ProfileArg>,
    },
    /// Train a model; writes metrics.jsonl, best/final checkpoints.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Run directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Number of epochs; decay epochs are rescaled proportionally.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Write the full result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-slice detections, optionally projected to root depth.
    Predict {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Guidance word for every triplet (default: each triplet's own).
        #[arg(long)]
        condition: Option<String>,
        /// Fit a centerline per implant track and evaluate it at this slice depth.
        #[arg(long)]
        project_root: Option<f64>,
        /// Prediction CSV; root projections go to `<stem>_roots.csv`.
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Train and evaluate every on/off combination of the three components.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds per grid cell.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Export distance histogram and PR curve of an eval result as CSV.
    Plot {
        /// JSON written by `eval --out`.
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct DataArg {
    /// Dataset manifest or its directory.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
}

impl DataArg {
    fn manifest(&self) -> PathBuf {
        if self.data.is_dir() {
            self.data.join("manifest.json")
        } else {
            self.data.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    HeavyTail,
    Uniform,
    Constant,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.dataset.k = k;
        cfg.model.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_epochs(cfg: &mut Config, epochs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = epochs {
        let old = cfg.train.epochs;
        cfg.train.lr_decay_epochs = cfg
            .train
            .lr_decay_epochs
            .iter()
            .map(|&e| e * n / old)
            .filter(|&e| e < n)
            .collect();
        cfg.train.lr_decay_epochs.dedup();
        cfg.train.epochs = n;
        cfg.validate()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let provider = build_provider(&cfg.embedding)?;
    match &cli.command {
        Command::GenData {
            out,
            patients,
            slope_profile,
        } => {
            let out = match out {
                Some(o) => o.clone(),
                None => std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| "data".into()),
            };
            if let Some(n) = patients {
                cfg.dataset.patients = *n;
            }
            if let Some(p) = slope_profile {
                cfg.dataset.slope_profile = match p {
                    ProfileArg::HeavyTail => SlopeProfile::HeavyTail,
                    ProfileArg::Uniform => SlopeProfile::Uniform { min: 0.0, max: 1.25 },
                    ProfileArg::Constant => SlopeProfile::Constant { tau: 0.3 },
                };
            }
            cfg.validate()?;
            let m = build_dataset(&out, &cfg.dataset)?;
            for s in Split::ALL {
                println!(
                    "{s}: {} patients, {} triplets",
                    m.patients.iter().filter(|p| p.split == s).count(),
                    m.triplets_in(s).count()
                );
            }
            println!("wrote {}", out.join("manifest.json").display());
        }
        Command::Train { data, out, epochs } => {
            set_epochs(&mut cfg, *epochs)?;
            let dir = RunDir::new(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
            let outcome = trainer::train(&data.manifest(), &cfg.model, &cfg.train, provider.as_ref(), Some(&dir))?;
            if let Some(last) = outcome.history.last() {
                println!("final loss {:.5}", last.loss_total);
            }
            if let Some((epoch, ap)) = outcome.best {
                println!("best val AP75 {ap:.4} at epoch {epoch}");
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
        } => {
            let r = trainer::evaluate_checkpoint(
                checkpoint,
                &data.manifest(),
                (*split).into(),
                provider.as_ref(),
                &cfg.train.decode,
            )?;
            println!(
                "AP75 {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  within 10px {:.3}  ({} frames)",
                r.ap75,
                r.precision,
                r.recall,
                r.f1,
                r.within_10px(),
                r.frames
            );
            if let Some(o) = out {
                std::fs::write(o, serde_json::to_string_pretty(&r)?).with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::Predict {
            data,
            checkpoint,
            split,
            condition,
            project_root,
            out,
        } => {
            let condition: Option<Condition> = condition.as_deref().map(str::parse).transpose()?;
            let model = TripletNet::load(checkpoint)?;
            let mut reader = DatasetReader::open(&data.manifest())?;
            let params = TargetParams {
                g: model.config().g,
                ..TargetParams::default()
            };
            let triplets = reader.triplets((*split).into(), Some(model.config().k), params)?;
            let records = trainer::predict(&model, &triplets, provider.as_ref(), &cfg.train.decode, condition)?;
            write_predictions(out, &records)?;
            println!("{} detections over {} triplets -> {}", records.len(), triplets.len(), out.display());
            if let Some(z) = project_root {
                let roots = trainer::project_tracks(&records, cfg.train.decode.score_threshold, *z)?;
                let path = roots_path(out);
                let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
                for r in &roots {
                    w.serialize(r)?;
                }
                w.flush()?;
                println!("{} root projections -> {}", roots.len(), path.display());
            }
        }
        Command::Ablate {
            data,
            out,
            epochs,
            seeds,
        } => {
            set_epochs(&mut cfg, *epochs)?;
            if seeds.is_empty() {
                bail!(Error::InvalidConfig("at least one seed is required".into()));
            }
            let mut reader = DatasetReader::open(&data.manifest())?;
            let params = TargetParams {
                g: cfg.model.g,
                ..TargetParams::default()
            };
            let train = reader.triplets(Split::Train, Some(cfg.model.k), params)?;
            let val = reader.triplets(Split::Val, Some(cfg.model.k), params)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let rows = trainer::ablate(
                &train,
                &val,
                &cfg.model,
                &cfg.train,
                &Components::grid(),
                seeds,
                provider.as_ref(),
                Some(out),
            )?;
            let path = out.join("ablation.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            println!("{:<12} {:>4} {:>4} {:>4} {:>8} {:>8}", "variant", "TVP", "CTG", "SAL", "AP75", "F1");
            for c in Components::grid() {
                let mine: Vec<_> = rows.iter().filter(|r| (r.tvp, r.ctg, r.sal) == (c.tvp, c.ctg, c.sal)).collect();
                let n = mine.len() as f64;
                let mark = |b: bool| if b { "x" } else { "" };
                println!(
                    "{:<12} {:>4} {:>4} {:>4} {:>8.4} {:>8.4}",
                    c.label(),
                    mark(c.tvp),
                    mark(c.ctg),
                    mark(c.sal),
                    mine.iter().map(|r| r.ap75).sum::<f64>() / n,
                    mine.iter().map(|r| r.f1).sum::<f64>() / n
                );
            }
            println!("rows -> {}", path.display());
        }
        Command::Plot { result, out } => {
            let text = std::fs::read_to_string(result).with_context(|| format!("reading {}", result.display()))?;
            let r: EvalResult = serde_json::from_str(&text).map_err(Error::from)?;
            write_plot_data(&r, out)?;
            println!("plot data -> {}", out.display());
        }
    }
    Ok(())
}

fn roots_path(predictions: &Path) -> PathBuf {
    let stem = predictions.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    predictions.with_file_name(format!("{stem}_roots.csv"))
}

fn write_plot_data(r: &EvalResult, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut h = csv::Writer::from_path(out.join("distance_histogram.csv"))?;
    h.write_record(["bin_start", "bin_end", "count"])?;
    for (lo, hi, n) in r.histogram.bins() {
        h.write_record([lo.to_string(), hi.to_string(), n.to_string()])?;
    }
    h.flush()?;
    let mut p = csv::Writer::from_path(out.join("pr_curve.csv"))?;
    p.write_record(["threshold", "recall", "precision"])?;
    for pt in &r.pr_curve {
        p.write_record([pt.threshold.to_string(), pt.recall.to_string(), pt.precision.to_string()])?;
    }
    p.flush()?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 3,
        Some(ErrorKind::Data) => 4,
        Some(ErrorKind::Numeric) => 5,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
