use std::path::PathBuf;
use std::process::ExitCode;

use agf_cli::{cmd_plot, cmd_run, cmd_sweep, CliError, LoadedConfig, Mode, RunOptions};
use clap::{Args, Parser, Subcommand};

/// Alternating Gradient Flows experiments.
#[derive(Parser)]
#[command(name = "agf", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config alpha (single runs only).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Worker threads for sweeps (default: logical CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Integrate gradient flow with fixed-step RK4.
    #[arg(long, global = true)]
    fixed_step: bool,
    /// Permit gradient-flow runs with alpha >= 1.
    #[arg(long, global = true)]
    allow_large_alpha: bool,
    /// Output root (falls back to the config's `out`, then AGF_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the config's mode.
    Run { config: PathBuf },
    /// Analytic saddle sequence only.
    Predict { config: PathBuf },
    /// Gradient flow against the prediction; exits 4 on mismatch.
    Compare { config: PathBuf },
    /// Compare at every alpha of `alphas`.
    Sweep { config: PathBuf },
    /// SVG figures from run directories or run CSVs.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short = 'o', long = "output-dir")]
        output_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let f = cli.flags;
    let opts = RunOptions {
        seed: f.seed,
        alpha: f.alpha,
        workers: f.workers,
        fixed_step: f.fixed_step,
        allow_large_alpha: f.allow_large_alpha,
        out: f.out,
        env_out: std::env::var_os("AGF_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from),
    };
    let result: Result<(), CliError> = (|| {
        match cli.cmd {
            Cmd::Plot { runs, output_dir } => {
                for p in cmd_plot(&runs, &output_dir)? {
                    println!("{}", p.display());
                }
            }
            Cmd::Sweep { config } => {
                let lc = LoadedConfig::load(&config)?;
                let (s, _) = cmd_sweep(&lc, &opts)?;
                println!("{}: {}", s.dir.display(), s.message);
            }
            Cmd::Run { config } => single(&config, None, &opts)?,
            Cmd::Predict { config } => single(&config, Some(Mode::Predict), &opts)?,
            Cmd::Compare { config } => single(&config, Some(Mode::Compare), &opts)?,
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// `mode` overrides the config's mode.
fn single(config: &std::path::Path, mode: Option<Mode>, opts: &RunOptions) -> Result<(), CliError> {
    let lc = LoadedConfig::load(config)?;
    let s = cmd_run(&lc, mode.unwrap_or(lc.config.mode), opts)?;
    println!("{}: {}", s.dir.display(), s.message);
    Ok(())
}
