use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use featherpoint_cli::config::{defaults_help, resolve, top_level_keys, RunConfig};
use featherpoint_cli::{commands, CliError, EXIT_CONFIG};

/// Compact learned local features: distillation, architecture search,
/// INT8 simulation, evaluation and memory accounting.
#[derive(Parser)]
#[command(name = "featherpoint", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Trained `.fpt.json` model.
    model: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Distill a student from the procedural teacher on synthetic scenes.
    Train(ConfigArg),
    /// Differentiable architecture search over the configured candidates.
    Search(ConfigArg),
    /// Calibrate, write the quantization manifest and compare float and INT8.
    Quantize(ModelArgs),
    /// Run the benchmark once per configured threshold mode.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Evaluate the fake-quantized model described by this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Memory and compute accounting at float32 and INT8.
    Report(ModelArgs),
    /// Write a synthetic HPatches-layout directory.
    GenData(ConfigArg),
}

/// Pulls `--a.b value` and `--a.b=value` config overrides out of `args`.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let top = top_level_keys();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let root = key.split('.').next().unwrap_or_default();
        if !top.iter().any(|t| t == root) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("FEATHERPOINT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("FEATHERPOINT_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("FEATHERPOINT_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<Vec<PathBuf>, CliError> {
    init_threads()?;
    let cfg = |c: &ConfigArg| -> Result<RunConfig, CliError> { resolve(c.config.as_deref(), overrides) };
    match cli.cmd {
        Cmd::Train(c) => commands::cmd_train(&cfg(&c)?),
        Cmd::Search(c) => commands::cmd_search(&cfg(&c)?),
        Cmd::Quantize(m) => commands::cmd_quantize(&cfg(&m.config)?, &m.model),
        Cmd::Eval { model, manifest } => commands::cmd_eval(&cfg(&model.config)?, &model.model, manifest.as_deref()),
        Cmd::Report(m) => commands::cmd_report(&cfg(&m.config)?, &m.model),
        Cmd::GenData(c) => commands::cmd_gen_data(&cfg(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let fail = |e: CliError| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code() as u8)
    };
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let help = defaults_help();
    let command = Cli::command().after_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match command.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &overrides) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}
