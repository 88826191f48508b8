use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod run;

#[derive(Parser)]
#[command(
    name = "sedd",
    version,
    about = "Score-entropy discrete diffusion lab",
    after_help = "Any config key can be overridden with `--section.key value`. Short keys such as \
                  `--steps` resolve to the subcommand's own section first, then run, paths, model and noise."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score model or an autoregressive model on a character corpus.
    Train(RunArgs),
    /// Draw samples from a checkpoint.
    Sample(RunArgs),
    /// Perplexity, multiple-choice accuracy, judge perplexity and diversity.
    Eval(RunArgs),
    /// Latency of diffusion sampling against cached and uncached AR decoding.
    Bench(RunArgs),
    /// Compare closed-form noise quantities with the enumeration oracle.
    OracleCheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `section.key = value` config file.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE",
        help = "Config overrides"
    )]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Sample(a) => ("sample", a),
        Command::Eval(a) => ("eval", a),
        Command::Bench(a) => ("bench", a),
        Command::OracleCheck(a) => ("oracle-check", a),
    };
    let cfg = match run::resolve(name, args.config.as_deref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}\n");
            eprintln!("usage: sedd {name} [--config FILE] [--KEY VALUE]...");
            eprintln!("       keys: {}", run::key_list());
            return ExitCode::from(2);
        }
    };
    let result = match name {
        "train" => run::train(&cfg),
        "sample" => run::sample(&cfg),
        "eval" => run::eval(&cfg),
        "bench" => run::bench(&cfg),
        _ => run::oracle_check(&cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
