use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowrank_core::harness::{
    deep_linear_demo_config, emit_report, load_grid, run_experiment, run_verification, sweep,
    write_outputs, ExperimentConfig, MethodKind, ReportOptions,
};
use lowrank_core::Error;

#[derive(Parser)]
#[command(
    name = "lowrank",
    version,
    about = "Train, compress and sweep low-rank networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write 0 in the wall_ms column so reports compare byte for byte.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an iterative trainer.
    Train(RunArgs),
    /// Pretrain, apply a one-shot projection, then refit.
    Compress(RunArgs),
    /// Run every point of a grid file and write one report.
    Sweep {
        /// Grid file: a base config plus a `[grid]` table of dotted keys.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.csv.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Overrides the seed of every grid point.
        #[arg(long)]
        seed: Option<u64>,
        /// Write 0 in the wall_ms column so reports compare byte for byte.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Run the convergence, Pythagoras and KL-expansion self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train IEHT on a rank-3 deep linear teacher and report recovered ranks.
    DemoDeepLinear {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// 2 for bad input, 3 for numerical failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}-{}", cfg.method.tag(), cfg.fingerprint())))
}

fn run_single(cfg: &ExperimentConfig, out: &Path, wall_time: bool) -> Result<(), Error> {
    let outcome = run_experiment(cfg)?;
    write_outputs(&outcome, out, ReportOptions { wall_time })?;
    let last = outcome.rows.last();
    println!("method       {}", cfg.method.tag());
    println!("config_id    {}", outcome.config_id);
    println!("ranks        {:?}", outcome.network.ranks());
    println!("test_loss    {:.6}", outcome.test_loss);
    if let Some(zs) = outcome.zero_shot_loss {
        println!("zero_shot    {zs:.6}");
    }
    if let Some(row) = last {
        println!("param_frac   {:.6}", row.param_fraction);
        println!("accuracy     {:.6}", row.finetuned_acc);
    }
    println!("output       {}", out.display());
    Ok(())
}

fn run_kind(args: &RunArgs, one_shot: bool) -> Result<(), Error> {
    let cfg = load(args)?;
    let is_one_shot = matches!(cfg.kind(), MethodKind::OneShot(_));
    if is_one_shot != one_shot {
        let want = if one_shot { "compress" } else { "train" };
        return Err(Error::Config(format!(
            "method {} does not belong to `{want}`; use `{}`",
            cfg.method.tag(),
            if is_one_shot { "compress" } else { "train" }
        )));
    }
    run_single(
        &cfg,
        &out_dir(args.out.as_deref(), &cfg),
        !args.no_wall_time,
    )
}

fn run_sweep(
    config: &Path,
    out: &Path,
    jobs: usize,
    seed: Option<u64>,
    wall_time: bool,
) -> Result<(), Error> {
    let mut grid = load_grid(config)?;
    if let Some(s) = seed {
        grid.iter_mut().for_each(|c| c.seed = s);
    }
    let result = sweep(&grid, jobs)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("report.csv");
    emit_report(&result.rows, &path, ReportOptions { wall_time })?;
    for f in &result.failures {
        eprintln!("failed: {} {}: {}", f.method, f.config_id, f.message);
    }
    println!(
        "{} configs, {} rows, {} failures, report {}",
        grid.len(),
        result.rows.len(),
        result.failures.len(),
        path.display()
    );
    Ok(())
}

fn run_verify(seed: u64) -> Result<bool, Error> {
    let lines = run_verification(seed)?;
    for l in &lines {
        println!(
            "{} {:<14} {:<22} {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.suite,
            l.check,
            l.detail
        );
    }
    Ok(lines.iter().all(|l| l.passed))
}

fn demo_config(seed: u64, config: Option<&Path>) -> Result<ExperimentConfig, Error> {
    if let Some(path) = config {
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.seed = seed;
        return Ok(cfg);
    }
    let cfg = deep_linear_demo_config(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn run_demo(seed: u64, out: Option<&Path>, config: Option<&Path>) -> Result<(), Error> {
    let cfg = demo_config(seed, config)?;
    let outcome = run_experiment(&cfg)?;
    if let Some(dir) = out {
        write_outputs(&outcome, dir, ReportOptions::default())?;
    }
    let ranks = outcome.network.ranks();
    println!("teacher rank {}", cfg.task.teacher_rank);
    println!("learned ranks {ranks:?}");
    println!("test loss {:.6}", outcome.test_loss);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_kind(a, false),
        Command::Compress(a) => run_kind(a, true),
        Command::Sweep {
            config,
            out,
            jobs,
            seed,
            no_wall_time,
        } => run_sweep(config, out, *jobs, *seed, !no_wall_time),
        Command::Verify { seed } => match run_verify(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("verification failed");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
        Command::DemoDeepLinear { seed, out, config } => {
            run_demo(*seed, out.as_deref(), config.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
