//! Batch command-line front end: each subcommand reads a TOML experiment
//! config, applies flag overrides, runs the pipeline deterministically, and
//! writes a CSV whose comment header embeds the resolved config.

use clap::{Args, Parser, Subcommand};
use mcuos::config::{ExperimentConfig, Mode};
use mcuos::datagen::{add_noise, generate_points, generate_subspaces};
use mcuos::error::McuosError;
use mcuos::evaluation::{run_experiment, write_records};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mcuos",
    about = "Metric-constrained union-of-subspaces learning, in ambient and kernel feature spaces",
    long_about = "Batch experiment runner. Every subcommand takes a TOML config \
(--config) whose `mode` must match the subcommand, runs it deterministically, and \
writes a CSV of result records. Numeric defaults: trials=1, seed=0, \
jobs=<number of processors>, missing_frac unset, delta_min=1e-6."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads for the trial pool (default: number of processors).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output CSV path (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write data/clean/labels CSVs.
    Synth(CommonArgs),
    /// Learn a union of subspaces (modes: synth-mcuos, synth-rmcuos, mckuos, rmckuos).
    Learn(CommonArgs),
    /// Train a model and reconstruct noisy test signals (mode: denoise).
    Denoise(CommonArgs),
    /// Train a feature-space model and score clustering (mode: cluster).
    Cluster(CommonArgs),
    /// Monte Carlo verification of missing-data estimation bounds (mode: bounds-check).
    Bounds {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the config's failure-probability grid with a single value.
        #[arg(long)]
        delta: Option<f64>,
    },
}

/// Exit codes: 2 for configuration problems, 3 for data problems, 4 for
/// numerical failures.
fn exit_code(e: &McuosError) -> u8 {
    match e {
        McuosError::ParseError(_) | McuosError::UnsupportedKernel(_) => 2,
        McuosError::ShapeMismatch(_)
        | McuosError::InsufficientData(_)
        | McuosError::EmptyOverlap { .. }
        | McuosError::UncoveredCoordinate(_)
        | McuosError::InsufficientObservations { .. }
        | McuosError::TilingError(_) => 3,
        McuosError::NumericalFailure(_)
        | McuosError::RankDeficient
        | McuosError::DegenerateNeighborhood
        | McuosError::DegenerateDenominator => 4,
    }
}

fn fail(e: McuosError) -> ExitCode {
    let code = exit_code(&e);
    eprintln!("error: code={code} message={:?}", e.to_string());
    ExitCode::from(code)
}

fn load_with_overrides(args: &CommonArgs) -> Result<ExperimentConfig, McuosError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn configure_pool(jobs: Option<usize>) -> Result<(), McuosError> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(McuosError::ParseError("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| McuosError::ParseError(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn expect_mode(config: &ExperimentConfig, allowed: &[Mode]) -> Result<(), McuosError> {
    if allowed.contains(&config.mode) {
        Ok(())
    } else {
        Err(McuosError::ParseError(format!(
            "config mode {} does not match this subcommand",
            config.mode.as_str()
        )))
    }
}

fn write_matrix_csv(path: &Path, matrix: &nalgebra::DMatrix<f64>) -> Result<(), McuosError> {
    let io_err = |e: csv::Error| McuosError::ParseError(format!("{}: {e}", path.display()));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io_err)?;
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|j| matrix[(i, j)].to_string()).collect();
        writer.write_record(&row).map_err(io_err)?;
    }
    writer
        .flush()
        .map_err(|e| McuosError::ParseError(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn cmd_synth(args: &CommonArgs) -> Result<(), McuosError> {
    let config = load_with_overrides(args)?;
    let spec = config
        .dataset
        .as_ref()
        .and_then(|d| d.synthetic.as_ref())
        .ok_or_else(|| {
            McuosError::ParseError("synth requires the `dataset.synthetic` section".into())
        })?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| McuosError::ParseError("synth requires `out` (or --out)".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = generate_subspaces(spec, &mut rng)?;
    let dataset = generate_points(&truth, spec, &mut rng)?;
    let noisy = add_noise(&dataset.clean, spec.sigma_tr_sq, &mut rng);

    let stem = out.with_extension("");
    let stem = stem.to_string_lossy();
    write_matrix_csv(&out, &noisy)?;
    write_matrix_csv(Path::new(&format!("{stem}_clean.csv")), &dataset.clean)?;
    let labels_path = format!("{stem}_labels.csv");
    let labels_text: String = dataset.labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&labels_path, labels_text)
        .map_err(|e| McuosError::ParseError(format!("{labels_path}: {e}")))?;
    println!("wrote {} and companions ({} signals)", out.display(), dataset.labels.len());
    Ok(())
}

fn run_and_write(config: &ExperimentConfig) -> Result<(), McuosError> {
    let records = run_experiment(config)?;
    let out = config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("results.csv"));
    let file = std::fs::File::create(&out)
        .map_err(|e| McuosError::ParseError(format!("{}: {e}", out.display())))?;
    write_records(file, &config.comment_header(), &records)?;
    let failures = records.iter().filter(|r| r.metric == "failure").count();
    println!(
        "wrote {} ({} records, {} failed trials)",
        out.display(),
        records.len(),
        failures
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), McuosError> {
        match &cli.command {
            Command::Synth(args) => {
                configure_pool(args.jobs)?;
                cmd_synth(args)
            }
            Command::Learn(args) => {
                configure_pool(args.jobs)?;
                let config = load_with_overrides(args)?;
                expect_mode(
                    &config,
                    &[Mode::SynthMcuos, Mode::SynthRmcuos, Mode::Mckuos, Mode::Rmckuos],
                )?;
                run_and_write(&config)
            }
            Command::Denoise(args) => {
                configure_pool(args.jobs)?;
                let config = load_with_overrides(args)?;
                expect_mode(&config, &[Mode::Denoise])?;
                run_and_write(&config)
            }
            Command::Cluster(args) => {
                configure_pool(args.jobs)?;
                let config = load_with_overrides(args)?;
                expect_mode(&config, &[Mode::Cluster])?;
                run_and_write(&config)
            }
            Command::Bounds { common, delta } => {
                configure_pool(common.jobs)?;
                let mut config = load_with_overrides(common)?;
                expect_mode(&config, &[Mode::BoundsCheck])?;
                if let Some(d) = delta {
                    if !(0.0..0.5).contains(d) {
                        return Err(McuosError::ParseError(
                            "--delta must be in (0, 0.5)".into(),
                        ));
                    }
                    if let Some(b) = config.bounds.as_mut() {
                        b.deltas = vec![*d];
                    }
                }
                run_and_write(&config)
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
