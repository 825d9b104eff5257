use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvnad::photometric::SolveOptions;
use mvnad_cli::error::{CliError, CliResult};
use mvnad_cli::eval::EvalOptions;
use mvnad_cli::{calib, eval, load_run_config, ps, report, synth, train};

#[derive(Parser)]
#[command(name = "mvnad", version, about = "Multi-view normal-map anomaly detection pipeline")]
struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (dataset for `synth`, run directory otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view dataset.
    Synth,
    /// Recover normals, albedo and residuals from one intensity stack.
    PsSolve {
        #[arg(long)]
        lights: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        /// Output prefix; files are `<prefix>_nv.mvnt` and so on.
        #[arg(long)]
        prefix: PathBuf,
        /// Drop the dimmest observation per pixel (0 or 1).
        #[arg(long, default_value_t = 0)]
        shadow_trim: usize,
    },
    /// Inspect a camera calibration file.
    Calib {
        #[command(subcommand)]
        action: CalibAction,
    },
    /// Train one model per category.
    Train,
    /// Evaluate trained checkpoints on the test split.
    Eval {
        #[arg(long)]
        save_maps: bool,
        /// Debug: use ground-truth masks as anomaly maps.
        #[arg(long)]
        oracle_maps: bool,
    },
    /// Merge evaluated runs into the ablation table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CalibAction {
    /// Parse, round-trip and summarize.
    Validate { file: PathBuf },
    /// Project a world point `x,y,z` (mm) to pixels.
    Project {
        file: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
    /// Map a pixel `u,v` through the file's homography.
    Homography {
        file: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.clone();
    let run_dir = || out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let rc = || load_run_config(cli.config.as_deref(), cli.seed);
    match cli.command {
        Command::Synth => {
            let rc = rc()?;
            let dest = out
                .clone()
                .or_else(|| rc.data_root.clone())
                .ok_or_else(|| CliError::Validation("synth needs --out or `data.root`".into()))?;
            let index = synth::cmd_synth(&rc, &dest)?;
            println!("wrote {} samples to {}", index.samples.len(), dest.display());
        }
        Command::PsSolve {
            lights,
            stack,
            prefix,
            shadow_trim,
        } => {
            let opts = SolveOptions {
                shadow_trim,
                ..SolveOptions::default()
            };
            let (_, files) = ps::cmd_ps_solve(&lights, &stack, &prefix, &opts)?;
            for p in [&files.normals, &files.valid, &files.albedo, &files.residual] {
                println!("{}", p.display());
            }
        }
        Command::Calib { action } => match action {
            CalibAction::Validate { file } => print!("{}", calib::validate(&file)?),
            CalibAction::Project { file, point } => {
                let (u, v) = calib::project(&file, calib::parse_point::<3>(&point)?)?;
                println!("{u:.10} {v:.10}");
            }
            CalibAction::Homography { file, point } => {
                let (u, v) = calib::homography(&file, calib::parse_point::<2>(&point)?)?;
                println!("{u:.10} {v:.10}");
            }
        },
        Command::Train => {
            let dir = run_dir();
            for t in train::cmd_train(&rc()?, &dir)? {
                let (first, last) = (t.log.first(), t.log.last());
                match (first, last) {
                    (Some(a), Some(b)) => println!(
                        "{}: {} steps, L_r {:.5} -> {:.5}, checkpoint {}",
                        t.category,
                        t.log.len(),
                        a.l_r,
                        b.l_r,
                        t.checkpoint.display()
                    ),
                    _ => println!("{}: untrained checkpoint {}", t.category, t.checkpoint.display()),
                }
            }
        }
        Command::Eval {
            save_maps,
            oracle_maps,
        } => {
            let dir = run_dir();
            let report = eval::cmd_eval(&rc()?, &dir, EvalOptions { save_maps, oracle_maps })?;
            print!("{}", report.to_table());
        }
        Command::Report { runs } => {
            let cmp = report::cmd_report(&runs, out.as_deref().map(Path::new))?;
            print!("{}", cmp.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
