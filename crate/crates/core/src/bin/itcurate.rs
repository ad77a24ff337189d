use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use itcurate::pipeline::synthetic::{generate, write_corpus, SyntheticSpec};
use itcurate::pipeline::{explain_uid, render_report, render_trace, run_pipeline, PipelineConfig, RunReport};
use itcurate::{Error, Result};

/// Curates image-text pair datasets.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every enabled stage described by a config file.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the per-stage table of a finished run.
    Report {
        output_dir: PathBuf,
        /// Print report.json unchanged instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Show what each stage decided for one uid.
    Explain { output_dir: PathBuf, uid: String },
    /// Check a config file without reading any data.
    ValidateConfig { config: PathBuf },
    /// Write a labeled synthetic corpus and a matching config.toml.
    GenSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        records: Option<usize>,
    },
}

fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var("ITCURATE_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ITCURATE_WORKERS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Wall times live apart from report.json so that reports stay byte-identical across runs.
fn print_timings(path: &std::path::Path) {
    let Ok(text) = std::fs::read_to_string(path) else {
        return;
    };
    let Ok(rows) = serde_json::from_str::<Vec<serde_json::Value>>(&text) else {
        return;
    };
    println!();
    for r in rows {
        println!("{:<22} {:>8.3}s", r["stage"].as_str().unwrap_or("?"), r["seconds"].as_f64().unwrap_or(0.0));
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output_dir, seed } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg)?;
            print!("{}", render_report(&out.report));
            println!(
                "\nfinal: {} unique, {} with duplicates -> {}",
                out.selection.unique_count(),
                out.selection.total_count(),
                out.output_dir.join("final.sel").display()
            );
        }
        Command::Report { output_dir, json } => {
            let path = output_dir.join("report.json");
            if json {
                print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            } else {
                print!("{}", render_report(&RunReport::read(&path)?));
                print_timings(&output_dir.join("timings.json"));
            }
        }
        Command::Explain { output_dir, uid } => {
            let uid = uid.parse()?;
            print!("{}", render_trace(uid, &explain_uid(&output_dir, uid)?));
        }
        Command::ValidateConfig { config } => {
            PipelineConfig::load(&config)?.validate()?;
            println!("{}: ok", config.display());
        }
        Command::GenSynthetic { out, seed, records } => {
            let mut spec = SyntheticSpec::default();
            if let Some(n) = records {
                spec.records = n;
            }
            let corpus = generate(&spec, seed)?;
            write_corpus(&corpus, &out)?;
            println!(
                "{} records, {} planted violations -> {}",
                corpus.records.len(),
                corpus.violations().count(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_workers().and_then(|_| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
