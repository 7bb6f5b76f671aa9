use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depth_introspect::evaluation::fmt_opt;
use depth_introspect_cli::{
    cmd_baseline, cmd_correct, cmd_detect, cmd_evaluate, cmd_generate, cmd_pretrain, cmd_train,
    CliError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "depth-introspect",
    version,
    about = "Detect and correct per-pixel errors in predicted depth maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for corpus-level work.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Clone)]
struct Correction {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Use ground-truth labels instead of the trained model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test corpus and its manifest.
    Generate(Shared),
    /// Distill the depth encoder from the RGB encoder.
    Pretrain(Shared),
    /// Train the detection network.
    Train(Shared),
    /// Write color-coded error maps and a detection report for the test split.
    Detect {
        #[command(flatten)]
        shared: Shared,
        /// Model directory to use instead of <out>/model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Iteratively correct the test split's predicted depth.
    Correct {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        correction: Correction,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare depth metrics before and after correction.
    Evaluate(Shared),
    /// Score the class-matched random baseline.
    Baseline(Shared),
}

fn resolve(shared: &Shared) -> Result<RunConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &shared.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    let out = match cli.command {
        Command::Generate(s) => {
            let r = cmd_generate(&resolve(&s)?, s.jobs)?;
            format!(
                "manifest={}\ntrain={}\ntest={}",
                r.manifest.display(),
                r.train,
                r.test
            )
        }
        Command::Pretrain(s) => {
            let r = cmd_pretrain(&resolve(&s)?, s.jobs)?;
            let curve: Vec<String> = r.curve.iter().map(|v| format!("{v:.6}")).collect();
            format!(
                "checkpoint={}\ncurve={}",
                r.checkpoint.display(),
                curve.join(",")
            )
        }
        Command::Train(s) => {
            let r = cmd_train(&resolve(&s)?, s.jobs)?;
            let last = r
                .history
                .last()
                .map(|m| format!("{:.6}", m.loss))
                .unwrap_or_else(|| "n/a".into());
            format!(
                "checkpoint={}\npretrained={}\nfinal_loss={last}",
                r.checkpoint.display(),
                r.pretrained
            )
        }
        Command::Detect { shared, model } => {
            let r = cmd_detect(&resolve(&shared)?, model.as_deref(), shared.jobs)?;
            format!(
                "report={}\n{}",
                r.report_path.display(),
                r.report.to_key_values().trim_end()
            )
        }
        Command::Correct {
            shared,
            correction,
            model,
        } => {
            let mut cfg = resolve(&shared)?;
            if let Some(v) = correction.iterations {
                cfg.correction.iterations = v;
            }
            if let Some(v) = correction.confidence {
                cfg.correction.confidence_threshold = v;
            }
            if let Some(v) = correction.step {
                cfg.correction.step = v;
            }
            let r = cmd_correct(&cfg, model.as_deref(), correction.oracle, shared.jobs)?;
            let converged = r.results.iter().filter(|(_, c)| c.converged).count();
            format!("samples={}\nconverged={converged}", r.results.len())
        }
        Command::Evaluate(s) => cmd_evaluate(&resolve(&s)?, s.jobs)?
            .table()
            .trim_end()
            .to_string(),
        Command::Baseline(s) => {
            let r = cmd_baseline(&resolve(&s)?, s.jobs)?;
            let m = r.report.error_class_metrics();
            format!(
                "under_precision={}\nunder_recall={}\nover_precision={}\nover_recall={}",
                fmt_opt(m[0]),
                fmt_opt(m[1]),
                fmt_opt(m[2]),
                fmt_opt(m[3])
            )
        }
    };
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
