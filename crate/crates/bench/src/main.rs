use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duoloc_bench::experiment::{cell_scene, localize_scene, RecallReport, RunOutput};
use duoloc_bench::{io, run_continuous, run_sweep, BenchConfig, BenchError, Mode, DEFAULT_THRESHOLDS};
use duoloc_core::sim::generate_scene;

#[derive(Parser)]
#[command(name = "duoloc", about = "Synthetic camera localization benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration file (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Static,
    Continuous,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, sparsify and corrupt a scene and write it to a file.
    Generate(RunArgs),
    /// Localize every query of a scene file; writes results.csv and report.csv into --out.
    Localize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Run all methods over the configured grids; writes results.csv and report.csv into --out.
    Sweep(RunArgs),
    /// Run the static and/or continuous protocol; writes results.csv and report.csv into --out.
    Continuous {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Aggregate results files into one report table.
    Report {
        /// Results CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<BenchConfig, BenchError> {
    let mut cfg = match &args.config {
        Some(path) => BenchConfig::from_toml(&fs::read_to_string(path)?)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    io::write_results(&out.records, BufWriter::new(File::create(dir.join("results.csv"))?))?;
    io::write_report(&out.report, BufWriter::new(File::create(dir.join("report.csv"))?))?;
    Ok(())
}

fn run(command: Command) -> Result<(), BenchError> {
    match command {
        Command::Generate(args) => {
            let cfg = load_config(&args)?;
            let base = generate_scene(&cfg.scene_spec()?)?;
            let scene = cell_scene(&base, &cfg, &cfg.cells()[0]);
            io::write_scene(&scene, BufWriter::new(File::create(&args.out)?))?;
        }
        Command::Localize { run, scene } => {
            let cfg = load_config(&run)?;
            let scene = io::read_scene(File::open(&scene)?)?;
            let mut cell = cfg.cells()[0];
            cell.keep_every_n = 1;
            let records = localize_scene(&scene, &cfg, &cell)?;
            let report = RecallReport::from_records(&records, &DEFAULT_THRESHOLDS, cfg.echo());
            write_outputs(&RunOutput { records, report }, &run.out)?;
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            write_outputs(&run_sweep(&cfg)?, &args.out)?;
        }
        Command::Continuous { run, mode } => {
            let cfg = load_config(&run)?;
            let modes: &[Mode] = match mode {
                ModeArg::Static => &[Mode::Static],
                ModeArg::Continuous => &[Mode::Continuous],
                ModeArg::Both => &[Mode::Static, Mode::Continuous],
            };
            let mut records = Vec::new();
            for &m in modes {
                records.extend(run_continuous(&cfg, m)?.records);
            }
            let echo = format!("{};retrieval_k_fixed=true", cfg.echo());
            let report = RecallReport::from_records(&records, &DEFAULT_THRESHOLDS, echo);
            write_outputs(&RunOutput { records, report }, &run.out)?;
        }
        Command::Report { inputs, out } => {
            let mut records = Vec::new();
            for path in &inputs {
                records.extend(io::read_results(File::open(path)?)?);
            }
            let sources: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
            let report =
                RecallReport::from_records(&records, &DEFAULT_THRESHOLDS, format!("inputs={}", sources.join(" ")));
            io::write_report(&report, BufWriter::new(File::create(&out)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
