//! `fairsam` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairsam_core::corruption::corrupt_dataset;
use fairsam_core::datagen::{load_csv, save_csv};
use fairsam_core::harness::{
    derive_seed, emit_report, ood_eval, read_reports, render_report, run_experiment, split_for_seed, sweep_severity,
    ExperimentConfig, ReportFormat,
};
use fairsam_core::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "fairsam", version, about = "Fairness-aware SAM experiments on synthetic and CSV data")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the first seed listed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured method and evaluate every corruption.
    Train,
    /// Evaluate the sweep methods at each severity.
    Sweep {
        /// Comma-separated severities; defaults to `[sweep] severities`.
        #[arg(long, value_delimiter = ',')]
        severities: Option<Vec<u8>>,
    },
    /// Train, then compare the in-distribution test split with another set.
    Ood {
        /// OOD test set as CSV; defaults to the config's `[ood]` section.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Re-render saved JSON reports.
    Report {
        /// JSON file written by `train`.
        #[arg(long)]
        input: PathBuf,
        /// json, csv or markdown.
        #[arg(long, default_value = "markdown")]
        format: String,
    },
    /// Write the clean split and corrupted test sets as CSV.
    GenData,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidConfig(_) | Error::ConfigParse(_) | Error::SeverityOutOfRange(_) => "config",
        Error::Io { .. } => "io",
        Error::Csv { .. } => "csv",
        Error::Json(_) => "json",
        Error::EmptyGroup(_) => "data",
        _ => "runtime",
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), e.to_string()),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seeds[0] = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir.to_path_buf())
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cfg.output.dir)?;
            let report = run_experiment(&cfg)?;
            let reports = std::slice::from_ref(&report);
            emit_report(reports, ReportFormat::Json, &dir.join("report.json"))?;
            emit_report(reports, ReportFormat::Csv, &dir.join("report.csv"))?;
            emit_report(reports, ReportFormat::Markdown, &dir.join("report.md"))?;
            if !cli.quiet {
                print!("{}", render_report(reports, ReportFormat::Markdown)?);
            }
        }
        Command::Sweep { severities } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cfg.output.dir)?;
            let severities = severities
                .clone()
                .or_else(|| cfg.sweep.as_ref().map(|s| s.severities.clone()))
                .unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
            let sweep = sweep_severity(&cfg, &severities)?;
            write(&dir.join("sweep.csv"), &sweep.to_csv())?;
            write(&dir.join("sweep.json"), &(serde_json::to_string_pretty(&sweep)? + "\n"))?;
            if !cli.quiet {
                print!("{}", sweep.to_csv());
            }
        }
        Command::Ood { test } => {
            let cfg = load_config(&cli)?;
            let ood = match (test, &cfg.ood) {
                (Some(path), _) => load_csv(path)?,
                (None, Some(section)) => section.materialize(derive_seed(cfg.train.seeds[0], 0xD1))?,
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "ood needs --test PATH or an [ood] section in the config".into(),
                    ))
                }
            };
            let dir = out_dir(&cfg.output.dir)?;
            let report = ood_eval(&cfg, &ood)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            write(&dir.join("ood.json"), &text)?;
            if !cli.quiet {
                if let Some(m) = report.median {
                    println!(
                        "{}: median delta_p {:.4}, delta_acc {:.4}, worst-group acc {:.4}",
                        report.method.display_name(),
                        m.delta_p,
                        m.delta_acc,
                        m.worst_group_acc
                    );
                }
            }
        }
        Command::Report { input, format } => {
            let format: ReportFormat = format.parse()?;
            let reports = read_reports(input)?;
            let text = render_report(&reports, format)?;
            match &cli.out {
                Some(dir) => {
                    let dir = out_dir(dir)?;
                    let ext = match format {
                        ReportFormat::Json => "json",
                        ReportFormat::Csv => "csv",
                        ReportFormat::Markdown => "md",
                    };
                    write(&dir.join(format!("report.{ext}")), &text)?;
                }
                None => print!("{text}"),
            }
        }
        Command::GenData => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cfg.output.dir)?;
            let seed = cfg.train.seeds[0];
            let full = cfg.data.materialize(seed)?;
            let (train, test) = split_for_seed(&cfg, &full, seed)?;
            save_csv(&train, &dir.join("train.csv"))?;
            save_csv(&test, &dir.join("test.csv"))?;
            for spec in &cfg.corruption {
                let c = corrupt_dataset(&test, spec)?;
                save_csv(&c, &dir.join(format!("test_{}_s{}.csv", spec.kind, spec.severity)))?;
            }
            if !cli.quiet {
                println!(
                    "wrote {} train and {} test rows to {}",
                    train.len(),
                    test.len(),
                    dir.display()
                );
            }
        }
    }
    Ok(())
}
