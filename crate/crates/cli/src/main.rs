use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vsalign_cli::{
    cmd_compare, cmd_eval, cmd_meta_train, cmd_pretrain, cmd_synth_data, format_report, resolve_config, CliResult,
    GlobalOptions,
};

#[derive(Parser)]
#[command(name = "vsalign", version, about = "Few-shot classification with visual-semantic prototype alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and description corpus.
    SynthData(Common),
    /// Supervised pretraining on the base classes.
    Pretrain(Common),
    /// Episodic meta-training from the pretraining checkpoint.
    MetaTrain(Common),
    /// Evaluate the meta-trained checkpoint on held-out episodes.
    Eval(Common),
    /// Train and evaluate several conditions on shared episodes.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing keys take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into a non-empty run directory / replace existing results.
    #[arg(long, global = true)]
    force: bool,
    /// Disable the alignment term.
    #[arg(long, global = true)]
    no_vs: bool,
    /// Dotted-key overrides, e.g. `train.stage2.objective.lambda_vs=1.0`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> CliResult<String> {
    let (Command::SynthData(c) | Command::Pretrain(c) | Command::MetaTrain(c) | Command::Eval(c) | Command::Compare(c)) =
        &cli.command;
    let opts = GlobalOptions {
        config: c.config.clone(),
        seed: c.seed,
        out: c.out.clone(),
        force: c.force,
        no_vs: c.no_vs,
        overrides: c.overrides.clone(),
    };
    let config = resolve_config(&opts)?;
    match cli.command {
        Command::SynthData(_) => cmd_synth_data(&config, opts.force),
        Command::Pretrain(_) => cmd_pretrain(&config, opts.force),
        Command::MetaTrain(_) => cmd_meta_train(&config, opts.force),
        Command::Eval(_) => cmd_eval(&config).map(|r| format_report(&r)),
        Command::Compare(_) => cmd_compare(&config, opts.force, opts.no_vs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
