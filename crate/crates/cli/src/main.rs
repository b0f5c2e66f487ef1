use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use picrl_cli::check::{run_checks, CheckOptions};
use picrl_cli::commands::{self, EvalOptions};
use picrl_cli::{CliError, RunConfig, EXIT_USAGE, WORKERS_ENV};
use picrl_core::EvalMode;

#[derive(Parser)]
#[command(
    name = "picrl",
    version,
    about = "Personalized captioning RL on a synthetic world"
)]
struct Cli {
    /// Worker threads for rollouts and evaluation. Outputs do not depend on it.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply to anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set grpo.steps=100`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training records, manifest and concept database.
    GenData(ConfigArgs),
    /// Train the captioner on the generated records.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, hide = true)]
        inject_nan_at: Option<usize>,
    },
    /// Evaluate a checkpoint on the grounding protocol.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// skip, retrieval or wrong-demo.
        #[arg(long, default_value = "skip")]
        mode: EvalMode,
        /// Demonstrations retrieved per query (retrieval mode).
        #[arg(long)]
        k: Option<usize>,
        /// Match concept names ignoring case.
        #[arg(long)]
        case_insensitive: bool,
    },
    /// Run gradient, reward and advantage self-checks.
    Check {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let load = |a: &ConfigArgs| RunConfig::load(a.config.as_deref(), &a.overrides);
    match cli.command {
        Command::GenData(a) => {
            let cfg = load(&a)?;
            let m = commands::gen_data(&cfg)?;
            println!(
                "wrote {} records and {} concepts to {}",
                m.dataset.total,
                m.database_records,
                cfg.output_dir.display()
            );
        }
        Command::Train {
            config,
            inject_nan_at,
        } => {
            let cfg = load(&config)?;
            let s = commands::train(&cfg, inject_nan_at)?;
            let ict = s
                .final_ict_reward
                .map_or("n/a".to_string(), |r| format!("{r:.3}"));
            println!(
                "trained {} steps, last captioning reward {ict}; checkpoint {}",
                s.steps,
                s.checkpoint.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            k,
            case_insensitive,
        } => {
            let cfg = load(&config)?;
            let r = commands::eval(
                &cfg,
                &EvalOptions {
                    checkpoint,
                    mode,
                    k,
                    case_insensitive,
                },
            )?;
            if let Some(note) = &r.note {
                println!("note: {note}");
            }
            println!(
                "{} mode: precision {:.4} recall {:.4} f1 {:.4} mean length {:.2}",
                mode.label(),
                r.overall.precision,
                r.overall.recall,
                r.overall.f1,
                r.length.mean
            );
        }
        Command::Check {
            config,
            inject_gradient_bug,
        } => {
            let cfg = load(&config)?;
            let opts = CheckOptions {
                seed: cfg.seed,
                inject_gradient_bug,
                ..Default::default()
            };
            let report = run_checks(&cfg.world, &cfg.rewards, &opts)?;
            print!("{}", report.render());
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|c| c.name).collect();
                return Err(CliError::Check(names.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
