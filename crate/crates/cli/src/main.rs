use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sqlagent::harness::{
    self, build_verifier_data, evaluate_predictions, load_config, prepare_grpo, read_jsonl, report_from_artifacts,
    run_stages, Backends, Config, Prediction, Stage, Workspace,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "sqlagent", version, about = "Multi-agent text-to-SQL pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set generation.max_turns=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run grounding, generation, selection and the report.
    Run,
    /// Run schema grounding.
    Ground,
    /// Run grounding (if enabled) and candidate generation.
    Generate,
    /// Run every stage up to candidate selection.
    Select,
    /// Score predictions, or the selected candidates when no file is given.
    Evaluate {
        /// JSONL file of `{task_id, sql}` predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Export persisted candidates as trainer records with group-relative advantages.
    PrepareGrpo,
    /// Sample candidate pools and write labelled verifier fine-tuning pairs.
    BuildVerifierDataset,
    /// Rebuild the report from persisted artifacts.
    Report,
    /// Print the effective configuration.
    Config,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stage(cfg: &Config, until: Stage) -> Result<ExitCode> {
    let backends = Backends::from_config(&cfg.backends)?;
    let outcome = run_stages(cfg, &backends, until)?;
    match &outcome.report {
        Some(report) => print_json(report)?,
        None => print_json(&serde_json::json!({ "failures": outcome.failures }))?,
    }
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref(), std::env::vars(), &cli.sets).context("loading configuration")?;
    match cli.command {
        Command::Run => stage(&cfg, Stage::Report),
        Command::Ground => stage(&cfg, Stage::Ground),
        Command::Generate => stage(&cfg, Stage::Generate),
        Command::Select => stage(&cfg, Stage::Select),
        Command::Report => {
            let report = report_from_artifacts(&cfg)?;
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { predictions } => {
            let ex = match predictions {
                Some(path) => {
                    let ws = Workspace::load(&cfg)?;
                    let preds: Vec<Prediction> = read_jsonl(&path)?;
                    evaluate_predictions(&ws, &preds, &cfg)?
                }
                None => report_from_artifacts(&cfg)?.execution_accuracy,
            };
            print_json(&serde_json::json!({ "execution_accuracy": ex }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::PrepareGrpo => {
            let n = prepare_grpo(&cfg)?;
            print_json(&serde_json::json!({ "records": n, "file": cfg.output_dir.join(harness::TRAINING_FILE) }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildVerifierDataset => {
            let backends = Backends::from_config(&cfg.backends)?;
            let n = build_verifier_data(&cfg, &backends)?;
            print_json(&serde_json::json!({ "pairs": n, "file": cfg.output_dir.join(harness::VERIFIER_SFT_FILE) }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Config => {
            let mut shown = cfg.clone();
            redact(&mut shown);
            print!("{}", toml_text(&shown)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn redact(cfg: &mut Config) {
    use sqlagent::harness::BackendConfig;
    let hide = |b: &mut BackendConfig| {
        if let BackendConfig::Remote(r) = b {
            if r.api_key.is_some() {
                r.api_key = Some("<redacted>".into());
            }
        }
    };
    hide(&mut cfg.backends.generator);
    for b in [
        &mut cfg.backends.grounder,
        &mut cfg.backends.verifier,
        &mut cfg.backends.judge,
        &mut cfg.backends.base,
    ]
    .into_iter()
    .flatten()
    {
        hide(b);
    }
}

fn toml_text(cfg: &Config) -> Result<String> {
    sqlagent::harness::config::to_toml(cfg).context("serialising configuration")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
