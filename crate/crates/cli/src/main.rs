//! Command-line experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ctcst::corpus::{generate_corpus, save_corpus, CorpusSpec};
use ctcst::experiment::{parse_values, report, run, sweep, ExperimentConfig, SweepParam, PRESETS};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "CTCST_THREADS";

#[derive(Parser)]
#[command(name = "ctcst", version, about = "Semi-supervised CTC sequence recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        /// JSON experiment config.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset instead of a config file.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// gamma, W, dropout or lr.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs under a directory.
    Report { dir: PathBuf },
    /// Generate a synthetic corpus file.
    GenCorpus {
        /// JSON corpus spec; fields left out take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset's config.
    ShowPreset { name: String },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, preset, out } => {
            let cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
                (None, Some(name)) => ExperimentConfig::preset(&name)?,
                (None, None) => unreachable!("clap requires one of --config and --preset"),
            };
            log::info!("config:\n{}", cfg.to_json());
            let s = run(&cfg, &out).with_context(|| format!("run failed; partial outputs are in {}", out.display()))?;
            println!("best_dev_error={} best_epoch={} test_error={}", s.best_dev_error, s.best_epoch, s.test_error);
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let param: SweepParam = param.parse()?;
            let values = parse_values(&values)?;
            let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --out or set output_dir in the config");
            };
            let rows = sweep(&cfg, param, &values, &out)?;
            println!("{},best_dev_error,mean_seconds_per_update", param.name());
            for r in rows {
                let secs = r.mean_seconds_per_update.map(|s| format!("{s:.6}")).unwrap_or_else(|| "NA".into());
                println!("{},{},{}", r.value, r.best_dev_error, secs);
            }
        }
        Command::Report { dir } => {
            let r = report(&dir)?;
            if r.rows.is_empty() {
                bail!("no runs found under {}", dir.display());
            }
            for row in &r.rows {
                if !row.missing.is_empty() {
                    eprintln!("{}: missing {}", row.run, row.missing.join(", "));
                }
            }
            let csv = r.to_csv();
            let path = dir.join("report.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
        }
        Command::GenCorpus { spec, seed, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: CorpusSpec = serde_json::from_str(&text).context("parsing corpus spec")?;
            let corpus = generate_corpus(&spec, seed)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} ({} supervised, {} unsupervised, {} dev, {} test)",
                out.display(),
                corpus.supervised.len(),
                corpus.unsupervised.len(),
                corpus.dev.len(),
                corpus.test.len()
            );
        }
        Command::ShowPreset { name } => {
            if !PRESETS.contains(&name.as_str()) {
                bail!("unknown preset {name:?}; known: {}", PRESETS.join(", "));
            }
            println!("{}", ExperimentConfig::preset(&name)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
