//! Command-line front end: `synth`, `reconstruct`, `metrics` and `plot`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{PipelineConfig, KEYS};
use crate::error::{Error, ErrorKind, Result};
use crate::forward::MeasurementSet;
use crate::mesh::{build_mesh, read_field_csv, write_field_pgm, DomainSpec, Mesh, ScalarField, Units};
use crate::pipeline::{files, reconstruct, synthesize, write_outputs, Meshes, IMAGE_WIDTH};
use crate::scenes::{PhantomScene, DEFAULT_K2, OMEGA1_HALF_WIDTH, OMEGA_RADIUS};
use crate::stripping::{metrics, Report};

/// Environment variable holding the log filter, e.g. `debug`.
pub const LOG_ENV: &str = "DOTRECON_LOG";

/// Name of the measurement file written by `synth`.
pub const MEASUREMENTS: &str = "measurements.csv";

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

fn keys_help() -> String {
    let mut s = String::from("Config keys (key = value, one per line; `#` starts a comment):\n");
    let width = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    for (key, unit, desc) in KEYS {
        s.push_str(&format!("  {key:<width$}  [{unit}]  {desc}\n"));
    }
    s.push_str(&format!("\nLog verbosity is read from {LOG_ENV} (error, warn, info, debug, trace).\n"));
    s.push_str("Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.");
    s
}

#[derive(Debug, Parser)]
#[command(name = "dotrecon", version, about = "Layer-stripping reconstruction for 2-D diffuse optical tomography")]
#[command(after_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate boundary measurements for the configured scene.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving measurements.csv and its .meta sidecar.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct the absorption coefficient from measurements.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// Measurement CSV; defaults to measurements.csv in the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a reconstructed field against the scene of a config.
    Metrics {
        /// Coefficient CSV on the disk mesh (a.csv).
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a field CSV to a PGM image.
    Plot {
        #[arg(long)]
        field: PathBuf,
        /// Config giving the mesh sizes; defaults are used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output image; defaults to the field path with a .pgm extension.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = IMAGE_WIDTH)]
        width: usize,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Numerical => EXIT_NUMERICAL,
        ErrorKind::Io => EXIT_IO,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes the measurement file and returns its path.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<PathBuf> {
    let meshes = Meshes::build(cfg)?;
    let measured = synthesize(cfg, &meshes.detectors()?)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(MEASUREMENTS);
    measured.write(&path)?;
    Ok(path)
}

/// Reconstructs from `data`, writes every output into `out` and returns the
/// report.
pub fn cmd_reconstruct(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Report> {
    let measured = MeasurementSet::read(data)?;
    let meshes = Meshes::build(cfg)?;
    let rec = reconstruct(&measured, cfg, &meshes)?;
    let report = metrics(&rec.a, &cfg.scene)?;
    write_outputs(&rec, &report, out)?;
    Ok(report)
}

fn omega_mesh(cfg: &PipelineConfig) -> Result<Arc<Mesh>> {
    Ok(Arc::new(build_mesh(DomainSpec::disk(OMEGA_RADIUS), cfg.omega_h)?))
}

pub fn cmd_metrics(field: &Path, cfg: &PipelineConfig) -> Result<Report> {
    let a = read_field_csv(field, omega_mesh(cfg)?, Units::Coefficient)?;
    metrics(&a, &cfg.scene)
}

/// Reads a field written on the disk or on the inner square and writes it
/// as PGM.
pub fn cmd_plot(field: &Path, cfg: &PipelineConfig, out: &Path, width: usize) -> Result<()> {
    let rows = std::fs::read_to_string(field).map_err(|e| Error::io(field, e))?.lines().skip(1).filter(|l| !l.trim().is_empty()).count();
    let disk = omega_mesh(cfg)?;
    let mesh = if rows == disk.node_count() {
        disk
    } else {
        let square = Arc::new(build_mesh(DomainSpec::square(OMEGA1_HALF_WIDTH), cfg.omega1_h)?);
        if rows != square.node_count() {
            return Err(Error::Inconsistent(format!(
                "{} has {rows} rows; the disk mesh has {} nodes and the square mesh {}",
                field.display(),
                disk.node_count(),
                square.node_count()
            )));
        }
        square
    };
    let f: ScalarField = read_field_csv(field, mesh, Units::Dimensionless)?;
    write_field_pgm(&f, out, width)
}

fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(files::REPORT);
    std::fs::write(&p, report.to_text()).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(files::REPORT_CSV);
    std::fs::write(&p, format!("{}\n{}\n", Report::CSV_HEADER, report.csv_row())).map_err(|e| Error::io(&p, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let path = cmd_synth(&cfg, &dir)?;
            println!("{}", path.display());
        }
        Command::Reconstruct { config, data, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let data = data.unwrap_or_else(|| dir.join(MEASUREMENTS));
            let report = cmd_reconstruct(&cfg, &data, &dir)?;
            print!("{}", report.to_text());
        }
        Command::Metrics { field, config, out } => {
            let cfg = load_config(&config, None)?;
            let report = cmd_metrics(&field, &cfg)?;
            if let Some(dir) = out {
                write_report(&report, &dir)?;
            }
            print!("{}", report.to_text());
        }
        Command::Plot { field, config, out, width } => {
            let cfg = match config {
                Some(p) => load_config(&p, None)?,
                None => PipelineConfig::new(PhantomScene::homogeneous(DEFAULT_K2)),
            };
            let out = out.unwrap_or_else(|| field.with_extension("pgm"));
            cmd_plot(&field, &cfg, &out, width)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_every_key_with_units() {
        let help = Cli::command().render_help().to_string();
        for (key, unit, _) in KEYS {
            assert!(help.contains(key) && help.contains(&format!("[{unit}]")), "{key}");
        }
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config { line: 3, msg: "x".into() }), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Range(800.0).at("finalize")), EXIT_NUMERICAL);
        let io = Error::io("missing", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&io), EXIT_IO);
    }

    #[test]
    fn subcommand_flags() {
        let cli = Cli::try_parse_from(["dotrecon", "synth", "--config", "a.conf", "--out", "o", "--seed", "7"]).unwrap();
        assert!(matches!(cli.command, Command::Synth { seed: Some(7), .. }));
        assert!(Cli::try_parse_from(["dotrecon", "reconstruct"]).is_err());
        let cli = Cli::try_parse_from(["dotrecon", "plot", "--field", "a.csv"]).unwrap();
        assert!(matches!(cli.command, Command::Plot { width: IMAGE_WIDTH, .. }));
    }
}
