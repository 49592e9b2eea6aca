use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use scroll::embed_store::{self, SyntheticSpec, TableFormat};
use scroll::harness::{self, ExperimentConfig};
use scroll::{checkpoint, replay_buffer};

#[derive(Parser)]
#[command(name = "scroll", version, about = "Schedule-robust online continual learning on embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream once, adapt on the buffer, evaluate.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Writes `<path>.state`, `<path>.buffer` and `<path>.adapted`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-epoch adaptation curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Rerun one config under many schedules.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        schedules: usize,
        #[arg(long, default_value = "split,gaussian,random")]
        kinds: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Moment distance of buffer strategies over class shuffles.
    BufferStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        shuffles: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-scenario `class,strategy,seed,distance` files.
        #[arg(long)]
        raw_dir: Option<PathBuf>,
    },
    /// Generate a synthetic train/test pair.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Writes `<prefix>_train.<ext>` and `<prefix>_test.<ext>`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "binary")]
        format: TableFormat,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> scroll::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn execute(command: Command) -> scroll::Result<()> {
    match command {
        Command::Run {
            config,
            report,
            checkpoint: ckpt,
            curve,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = harness::run(&cfg)?;
            if let Some(base) = ckpt {
                checkpoint::save_state(&out.stage_one, with_suffix(&base, ".state"))?;
                checkpoint::save_buffer(&out.buffer, with_suffix(&base, ".buffer"))?;
                checkpoint::save_adapted(&out.adapted, with_suffix(&base, ".adapted"))?;
            }
            if let Some(path) = curve {
                scroll::adapter::write_curve_csv(BufWriter::new(File::create(path)?), &out.curve)?;
            }
            write_json(&out.report, report.as_deref())
        }
        Command::Sweep {
            config,
            schedules,
            kinds,
            report,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let kinds = harness::parse_kinds(&kinds)?;
            let result = harness::robustness_sweep(&cfg, schedules, &kinds)?;
            write_json(&result, report.as_deref())
        }
        Command::BufferStudy {
            config,
            shuffles,
            out,
            raw_dir,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let result = harness::buffer_study(&cfg, shuffles)?;
            harness::write_study_csv(BufWriter::new(File::create(&out)?), &result.rows)?;
            if let Some(dir) = raw_dir {
                fs::create_dir_all(&dir)?;
                for scenario in &result.raw {
                    let path = dir.join(format!("b1_{}_b2_{}.csv", scenario.b1, scenario.b2));
                    replay_buffer::write_moment_csv(BufWriter::new(File::create(path)?), &scenario.records)?;
                }
            }
            Ok(())
        }
        Command::Synth { spec, out, format } => {
            let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
            let (train, test) = embed_store::synthesize(&spec)?;
            let ext = match format {
                TableFormat::Binary => "scrl",
                TableFormat::Csv => "csv",
            };
            embed_store::save_embeddings(&train, with_suffix(&out, &format!("_train.{ext}")), format)?;
            embed_store::save_embeddings(&test, with_suffix(&out, &format!("_test.{ext}")), format)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
