//! `msp`: corpus generation, pre-training, fine-tuning, evaluation, the
//! ablation grid and the verification suite behind one binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use toml::Value;

use commands::Run;
use manifest::{Formats, Manifest};

#[derive(Parser)]
#[command(name = "msp", version, about = "Multi-stage vision-language pre-training at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus to `paths.corpus`.
    Generate(Common),
    /// Run the `[plan]` schedule and save the pre-trained checkpoint.
    Pretrain(Common),
    /// Fine-tune the pre-trained checkpoint on `finetune.task`.
    Finetune(Common),
    /// Score every checkpoint found on the test split.
    Evaluate(Common),
    /// Run the stage-ordering / task-removal grid.
    Ablate(Common),
    /// Gradient, loss, masking-rate and parameter-count checks.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs and the manifest; relative config paths resolve
    /// against it. Defaults to the config file's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets a dotted config key, e.g. `model.hidden_size=32`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Generate(c) => ("generate", c),
            Command::Pretrain(c) => ("pretrain", c),
            Command::Finetune(c) => ("finetune", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Ablate(c) => ("ablate", c),
            Command::Verify(c) => ("verify", c),
        }
    }
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("MSP_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("debug") => LevelFilter::Debug,
        Ok("warn") => LevelFilter::Warn,
        Ok("error") => LevelFilter::Error,
        Ok(other) => bail!("MSP_LOG_LEVEL must be one of debug, info, warn, error; got {other:?}"),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init()
        .context("installing logger")
}

fn load_config(run: &mut Run, common: &Common) -> Result<()> {
    run.enter("config");
    let mut table = config::read_table(&common.config)?;
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).context("--seed must fit a signed 64-bit integer")?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    for o in &common.overrides {
        config::apply_override(&mut table, o)?;
    }
    run.table = table;
    run.seed = config::seed(&run.table)?;
    Ok(())
}

fn execute(run: &mut Run, name: &str, common: &Common) -> Result<()> {
    run.enter("logging");
    init_logging()?;
    load_config(run, common)?;
    match name {
        "generate" => commands::generate_cmd(run),
        "pretrain" => commands::pretrain_cmd(run),
        "finetune" => commands::finetune_cmd(run),
        "evaluate" => commands::evaluate_cmd(run),
        "ablate" => commands::ablate_cmd(run),
        "verify" => commands::verify_cmd(run),
        _ => unreachable!("clap only yields known subcommands"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.parts();
    let base = common.out.clone().unwrap_or_else(|| match common.config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    });
    let mut run = Run {
        table: toml::Table::new(),
        seed: 0,
        base,
        stage: "start".into(),
        outputs: Vec::new(),
    };
    let result = execute(&mut run, name, common);

    let config_loaded = result.is_ok() || run.stage != "config" && run.stage != "logging";
    let manifest = Manifest {
        command: name.into(),
        status: if result.is_ok() { "ok" } else { "failed" },
        stage: run.stage.clone(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        seed: config_loaded.then_some(run.seed),
        config: config_loaded.then(|| serde_json::to_value(&run.table).unwrap_or_default()),
        overrides: common.overrides.clone(),
        formats: Formats::default(),
        outputs: run
            .outputs
            .iter()
            .map(|(path, sha256)| manifest::Output {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect(),
    };
    let written = manifest.write(&run.base);
    if let Err(e) = &written {
        eprintln!("error: could not write manifest to {}: {e:#}", run.base.display());
    }

    match result {
        Ok(()) if written.is_ok() => ExitCode::SUCCESS,
        Ok(()) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error [{name}/{}]: {e:#}", run.stage);
            ExitCode::FAILURE
        }
    }
}
