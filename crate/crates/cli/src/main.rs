mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "toolplan", version, about = "Typed tool-plan synthesis, execution and training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Engine config (TOML, or JSON by extension). Falls back to $ENGINE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    /// Policy checkpoint; without one the uniform policy is used.
    #[arg(long, global = true, alias = "policy")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub split: Option<SplitArg>,
    /// Tools per branch explored by the oracle.
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemaArg {
    Supervised,
    Rltf,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the task catalog.
    Gen,
    /// Exhaustive best plan per task.
    Oracle,
    /// Decode the top plan for one task.
    Plan {
        #[arg(long)]
        task: String,
    },
    /// Run a plan file on a task and score it.
    Exec {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Extract a tool sequence from free text ("-" reads stdin).
    Parse {
        #[arg(long, default_value = "-")]
        text: String,
    },
    /// Train a policy checkpoint.
    Train {
        #[arg(long, value_enum, default_value = "rltf")]
        schema: SchemaArg,
    },
    /// Evaluate a checkpoint on a split.
    Eval,
    /// Zero-shot, supervised and RLTF on the test split.
    Compare,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Gen => commands::gen(g),
        Cmd::Oracle => commands::oracle(g),
        Cmd::Plan { task } => commands::plan(g, &task),
        Cmd::Exec { plan, task } => commands::exec(g, &plan, &task),
        Cmd::Parse { text } => commands::parse(g, &text),
        Cmd::Train { schema } => commands::train(g, schema),
        Cmd::Eval => commands::eval(g),
        Cmd::Compare => commands::compare(g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
