//! `qspace`: simulate phantoms, calibrate nulls, reproduce the rejection
//! table and fibre traces, and batch-analyse voxel volumes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qspace::harness::{
    analyze_volume, calibrate_experiment, derive_seed, experiment_rotation, resolve_calibration, run_fiber_trace,
    run_table3_with, synthesize_volume, trace_csv, ExperimentConfig, VolumeDataset, MASKED_CODE,
};
use qspace::phantom::{electrostatic_scheme, FiberEvolution, FiberKind};
use qspace::stats::Classification;

#[derive(Parser, Debug)]
#[command(name = "qspace", version, about = "Nonparametric q-space structure statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment subcommand. Explicit flags override
/// `--set`, which overrides the config file.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set rho=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated models, e.g. A1,A3
    #[arg(long)]
    models: Option<String>,
    /// Comma-separated noise levels as fractions of A(0), e.g. 1/30,1/2
    #[arg(long)]
    noise: Option<String>,
    /// Replicates per table cell
    #[arg(long)]
    reps: Option<String>,
    /// Replicates per null calibration
    #[arg(long)]
    calibration_reps: Option<String>,
    /// Direction count of an electrostatic scheme, or a scheme file
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Calibration CSV written by `calibrate`
    #[arg(long)]
    calibration: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic volume; voxels are split into equal x-slabs, one per model
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Volume dimensions nx,ny,nz
        #[arg(long, default_value = "8,8,1")]
        dims: String,
        #[arg(long, default_value = "volume")]
        stem: String,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Monte Carlo null calibration for every configured noise level
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value = "calibration.csv")]
        output: PathBuf,
    },
    /// Rejection counts per model and noise level
    Table3 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value = "table3.csv")]
        output: PathBuf,
    },
    /// Noiseless summaries along the forking or crossing voxel sequence
    Trace {
        #[arg(long, default_value = "forking")]
        kind: String,
        /// Circle grid size N
        #[arg(long, default_value_t = 128)]
        grid: usize,
        /// CSV path; stdout when absent
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Statistic and p-value maps for a volume, calibrated at the first noise level
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Volume header written by `simulate` or by hand
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Voxels per resumable chunk
        #[arg(long, default_value_t = 256)]
        chunk: usize,
    },
    /// Electrostatic direction scheme as text
    Scheme {
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        n0: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

/// A configuration problem; reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(usage)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k, v).map_err(usage)?;
        }
        let flags = [
            ("models", &self.models),
            ("noise", &self.noise),
            ("reps", &self.reps),
            ("calibration_reps", &self.calibration_reps),
            ("scheme", &self.scheme),
            ("seed", &self.seed),
            ("workers", &self.workers),
            ("calibration", &self.calibration),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v).map_err(usage)?;
            }
        }
        cfg.validate().map_err(usage)?;
        eprintln!("qspace {} config {}", env!("CARGO_PKG_VERSION"), cfg.hash());
        Ok(cfg)
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| usage(format!("bad dimension `{d}` in --dims"))))
        .collect::<Result<_>>()?;
    let dims: [usize; 3] = dims.try_into().map_err(|_| usage("--dims needs three values"))?;
    if dims.contains(&0) {
        bail!(usage("dimensions must be positive"));
    }
    Ok(dims)
}

fn simulate(cfg: &ExperimentConfig, dims: [usize; 3], stem: &str, output: &Path) -> Result<()> {
    let scheme = cfg.scheme()?;
    let rotation = experiment_rotation(cfg.seed);
    let nx = dims[0];
    let slabs = cfg.models.len();
    let count: usize = dims.iter().product();
    let models: Vec<_> = (0..count)
        .map(|v| cfg.models[(v % nx) * slabs / nx].model_in_experiment(&rotation))
        .collect();
    let sigma = cfg.noise_levels[0].1;
    let ds = synthesize_volume(dims, &models, &scheme, sigma, derive_seed(cfg.seed, &[3]))?;
    let header = ds.write(output, stem)?;
    eprintln!("wrote {}", header.display());
    Ok(())
}

fn analyze(cfg: &ExperimentConfig, volume: &Path, out: &Path, chunk: usize) -> Result<()> {
    let ds = VolumeDataset::read(volume).with_context(|| format!("reading volume {}", volume.display()))?;
    let calibration = resolve_calibration(cfg)?;
    let maps = analyze_volume(&ds, cfg, &calibration, out, chunk)?;
    for cls in Classification::ALL {
        let n = maps.classification.iter().filter(|c| **c == cls.code()).count();
        println!("{cls}\t{n}");
    }
    let masked = maps.classification.iter().filter(|c| **c == MASKED_CODE).count();
    println!("masked\t{masked}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, dims, stem, output } => {
            let dims = parse_dims(&dims)?;
            simulate(&cfg.resolve()?, dims, &stem, &output)
        }
        Command::Calibrate { cfg, output } => {
            let cfg = cfg.resolve()?;
            let set = calibrate_experiment(&cfg)?;
            set.write(&output)?;
            eprintln!("wrote {}", output.display());
            Ok(())
        }
        Command::Table3 { cfg, output } => {
            let cfg = cfg.resolve()?;
            let calibration = resolve_calibration(&cfg)?;
            let table = run_table3_with(&cfg, &calibration)?;
            write_output(Some(&output), &table.to_csv()?)?;
            print!("{}", table.to_text());
            eprintln!("wrote {}", output.display());
            Ok(())
        }
        Command::Trace { kind, grid, output } => {
            let kind: FiberKind = kind.parse().map_err(usage)?;
            eprintln!("qspace {}", env!("CARGO_PKG_VERSION"));
            let rows = run_fiber_trace(&FiberEvolution::new(kind), grid)?;
            write_output(output.as_deref(), &trace_csv(kind, &rows)?)
        }
        Command::Analyze { cfg, volume, out, chunk } => analyze(&cfg.resolve()?, &volume, &out, chunk),
        Command::Scheme { count, n0, output } => {
            eprintln!("qspace {}", env!("CARGO_PKG_VERSION"));
            let scheme = electrostatic_scheme(count).and_then(|s| s.with_n0(n0)).map_err(usage)?;
            write_output(output.as_deref(), &scheme.to_text())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qspace::phantom::PaperModel;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("4, 3,1").unwrap(), [4, 3, 1]);
        assert!(parse_dims("4,3").is_err());
        assert!(parse_dims("4,0,1").is_err());
    }

    #[test]
    fn flags_override_set() {
        let args = ConfigArgs {
            overrides: vec!["seed=3".into(), "reps=9".into()],
            seed: Some("5".into()),
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.replicates), (5, 9));
        // PaperModel parsing is shared with the library.
        assert_eq!("A4".parse::<PaperModel>().unwrap(), PaperModel::A4);
    }
}
