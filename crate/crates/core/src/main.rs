use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use msdftvnet::data::{Dataset, Split};
use msdftvnet::gradcheck::{check_model, Tolerance};
use msdftvnet::model::ModelConfig;
use msdftvnet::pipeline::{fit, DataSource, Forecaster};
use msdftvnet::spectral;
use msdftvnet::train::{log_csv, TrainOptions};

#[derive(Parser)]
#[command(
    name = "msdftvnet",
    version,
    about = "Multi-scale deformable forecaster for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split; prints `mse,mae`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Per-step MSE curve output; defaults to `<ckpt>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Forecast the rows following row `at - 1`, in original units.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        at: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dominant periods of a window as CSV.
    Periods {
        #[arg(long)]
        data: String,
        #[arg(long)]
        lookback: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// First row of the window.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Finite-difference check of every model gradient.
    Gradcheck {
        #[arg(long, default_value = "small")]
        config: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// CSV file or `synthetic:key=value;...` (or `synthetic:@file`).
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 96)]
    lookback: usize,
    #[arg(long, default_value_t = 24)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    scales: usize,
    #[arg(long, default_value_t = 32)]
    embed: usize,
    /// Deformable kernel taps.
    #[arg(long, default_value_t = 3)]
    taps: usize,
    /// Head hidden width; defaults to four times the embedding width.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2", value_parser = parse_ratios)]
    split: (f64, f64, f64),
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    out: PathBuf,
    /// Epoch log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn with_suffix(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load(data: &str) -> Result<Dataset> {
    let src: DataSource = data.parse()?;
    src.load().with_context(|| format!("loading {data}"))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let raw = load(&a.data)?;
    let mut config = ModelConfig::new(a.lookback, a.horizon, raw.channels()).with_embed_dim(a.embed);
    config.scales = a.scales;
    config.taps = a.taps;
    config.seed = a.seed;
    if let Some(h) = a.hidden {
        config.hidden = h;
    }
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        clip: (!a.no_clip).then_some(a.clip),
        seed: a.seed,
        ..TrainOptions::default()
    };
    println!("epoch,train_mse,val_mse,lr");
    let (forecaster, outcome) = fit(raw, &config, a.split, &opts, |e| {
        println!("{},{:e},{:e},{:e}", e.epoch, e.train_mse, e.val_mse, e.lr);
    })?;
    forecaster
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    fs::write(&log_path, log_csv(&outcome.log))?;
    eprintln!(
        "saved {} (best epoch {}), log {}",
        a.out.display(),
        outcome.best_epoch,
        log_path.display()
    );
    if let Some(msg) = outcome.diverged {
        bail!("training diverged: {msg}; last good checkpoint saved");
    }
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => run_train(a)?,
        Command::Eval {
            ckpt,
            data,
            split,
            curve,
        } => {
            let f = Forecaster::load(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let split: Split = split.parse()?;
            let report = f.evaluate_split(load(&data)?, split)?;
            println!("mse,mae");
            println!("{:e},{:e}", report.mse, report.mae);
            let curve = curve.unwrap_or_else(|| with_suffix(&ckpt, ".curve.csv"));
            fs::write(&curve, report.curve_csv())?;
        }
        Command::Predict { ckpt, data, at, out } => {
            let f = Forecaster::load(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let raw = load(&data)?;
            let y = f.forecast_at(&raw, at)?;
            let mut text = raw.columns.join(",");
            text.push('\n');
            let c = raw.channels();
            for row in y.data().chunks(c) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(p, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Periods {
            data,
            lookback,
            k,
            start,
        } => {
            let raw = load(&data)?;
            if start + lookback > raw.len() {
                bail!("window {start}..{} exceeds {} rows", start + lookback, raw.len());
            }
            let profile = spectral::profile(&raw.rows(start, lookback), k)?;
            print!("{}", profile.to_csv());
        }
        Command::Gradcheck { config, seed } => {
            let cfg = match config.as_str() {
                "small" => ModelConfig {
                    lookback: 16,
                    horizon: 4,
                    channels: 2,
                    embed_dim: 4,
                    scales: 2,
                    taps: 3,
                    hidden: 16,
                    patch_taps: 4,
                    seed,
                },
                other => bail!("unknown gradcheck config `{other}` (available: small)"),
            };
            let r = check_model(&cfg, 2, seed, &Tolerance::default())?;
            println!("checked {} gradients, max error {:.3e}", r.checked, r.max_error);
            for m in r.mismatches.iter().take(20) {
                println!(
                    "mismatch {}[{}]: analytic {:e} numeric {:e}",
                    m.name, m.index, m.analytic, m.numeric
                );
            }
            if !r.passed() {
                println!("FAILED ({} mismatches)", r.mismatches.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("ok");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
