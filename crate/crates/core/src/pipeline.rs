//! Synthesis, reconstruction and output files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::forward::{synthesize_measurements, MeasurementSet};
use crate::mesh::{boundary_nodes, build_mesh, write_field_csv, write_field_pgm, BoundaryTag, DomainSpec, Mesh, ScalarField};
use crate::preprocess::{calibrate_amplitude, calibrate_k2, smooth_to_omega1, SmoothingBounds};
use crate::scenes::{build_scene, OMEGA0_HALF_WIDTH, OMEGA1_HALF_WIDTH, OMEGA_RADIUS};
use crate::stripping::{assemble_w, compute_psi, finalize, metrics, strip, LineData, Report, SGrid};
use crate::tail::{stage1_tail, stage2_refine, write_history, Stage1, TailResult};
use crate::Point;

/// Width in pixels of the PGM images.
pub const IMAGE_WIDTH: usize = 200;

#[derive(Debug, Clone)]
pub struct Meshes {
    /// Ω₀ at the reconstruction resolution.
    pub forward: Arc<Mesh>,
    pub omega1: Arc<Mesh>,
    /// Ω₀ minus the disk.
    pub annulus: Arc<Mesh>,
    /// The disk Ω.
    pub omega: Arc<Mesh>,
}

impl Meshes {
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            forward: Arc::new(build_mesh(DomainSpec::square(OMEGA0_HALF_WIDTH), cfg.forward_h)?),
            omega1: Arc::new(build_mesh(DomainSpec::square(OMEGA1_HALF_WIDTH), cfg.omega1_h)?),
            annulus: Arc::new(build_mesh(DomainSpec::annulus(OMEGA0_HALF_WIDTH, OMEGA_RADIUS), cfg.annulus_h)?),
            omega: Arc::new(build_mesh(DomainSpec::disk(OMEGA_RADIUS), cfg.omega_h)?),
        })
    }

    /// Detector positions: the nodes of the annulus on ∂Ω, in loop order.
    pub fn detectors(&self) -> Result<Vec<Point>> {
        Ok(boundary_nodes(&self.annulus, BoundaryTag::Inner)?.iter().map(|&i| self.annulus.nodes()[i]).collect())
    }
}

/// Boundary data for the configured scene, solved on a separate Ω₀ mesh of
/// size `synth_h`.
pub fn synthesize(cfg: &PipelineConfig, detectors: &[Point]) -> Result<MeasurementSet> {
    cfg.validate()?;
    let mesh = Arc::new(build_mesh(DomainSpec::square(OMEGA0_HALF_WIDTH), cfg.synth_h)?);
    let a = build_scene(&cfg.scene, &mesh)?;
    synthesize_measurements(&a, &cfg.layout()?.all(), detectors, cfg.k2(), cfg.noise, cfg.seed).map_err(|e| e.at("synth"))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub k2: f64,
    pub amplitude: f64,
    pub smoothed: MeasurementSet,
    pub smoothing: Vec<SmoothingBounds>,
    pub stage1: Stage1,
    pub tail: TailResult,
    pub grid: SGrid,
    pub q: Vec<ScalarField>,
    pub w: ScalarField,
    /// Recovered coefficient on Ω₁.
    pub a_omega1: ScalarField,
    /// Recovered coefficient on Ω.
    pub a: ScalarField,
}

pub fn reconstruct(measured: &MeasurementSet, cfg: &PipelineConfig, meshes: &Meshes) -> Result<Reconstruction> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let far = layout.far().0;
    let (k2, amplitude) = if cfg.calibrate_k2 {
        let c = calibrate_k2(measured, cfg.k2_interval, far, &meshes.forward).map_err(|e| e.at("calibration"))?;
        (c.k2, c.amplitude)
    } else {
        let k2 = cfg.k2();
        (k2, calibrate_amplitude(measured, k2, far, &meshes.forward).map_err(|e| e.at("calibration"))?)
    };
    log::info!("k2 = {k2:.6}, amplitude = {amplitude:.6e}");

    let (smoothed, smoothing) = smooth_to_omega1(measured, k2, amplitude, &meshes.annulus, &meshes.omega1).map_err(|e| e.at("smoothing"))?;
    let stage1 = stage1_tail(&smoothed, &layout, k2, &meshes.omega1, &meshes.forward, &cfg.tail).map_err(|e| e.at("tail stage 1"))?;
    let tail = stage2_refine(&stage1, smoothed.trace(far)?, k2, &cfg.tail).map_err(|e| e.at("tail stage 2"))?;
    log::info!("tail accepted at m = {}", tail.iterations);

    let data = LineData::from_measurements(&smoothed, &layout, &meshes.omega1)?
        .refine(&meshes.omega1, k2.sqrt(), cfg.s_substeps)
        .map_err(|e| e.at("stripping"))?;
    let grid = data.grid()?;
    let psi = compute_psi(&data, &grid).map_err(|e| e.at("stripping"))?;
    let state = strip(&tail.t, &psi, &grid, &cfg.strip).map_err(|e| e.at("stripping"))?;
    let w = assemble_w(&state)?;
    let (a_omega1, a) = finalize(&w, &grid, k2, &meshes.omega, &cfg.tail.recovery).map_err(|e| e.at("finalize"))?;
    log::info!("max a / k2 = {:.4}", a.max() / k2);
    Ok(Reconstruction { k2, amplitude, smoothed, smoothing, stage1, tail, grid, q: state.q, w, a_omega1, a })
}

/// Output file names inside the reconstruction directory.
pub mod files {
    pub const COEFFICIENT: &str = "a.csv";
    pub const COEFFICIENT_IMAGE: &str = "a.pgm";
    pub const COEFFICIENT_OMEGA1: &str = "a_omega1.csv";
    pub const TAIL: &str = "tail.csv";
    pub const TAIL_STAGE1: &str = "tail_stage1.csv";
    pub const COEFFICIENT_STAGE1: &str = "a_stage1.csv";
    pub const HISTORY: &str = "tail_history.csv";
    pub const REPORT: &str = "report.txt";
    pub const REPORT_CSV: &str = "report.csv";
}

/// Writes fields, the tail history and the report; returns the paths.
pub fn write_outputs(rec: &Reconstruction, report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);
    write_field_csv(&rec.a, &p(files::COEFFICIENT))?;
    write_field_pgm(&rec.a, &p(files::COEFFICIENT_IMAGE), IMAGE_WIDTH)?;
    write_field_csv(&rec.a_omega1, &p(files::COEFFICIENT_OMEGA1))?;
    write_field_csv(&rec.tail.t, &p(files::TAIL))?;
    write_field_csv(&rec.tail.t1, &p(files::TAIL_STAGE1))?;
    write_field_csv(&rec.stage1.a1, &p(files::COEFFICIENT_STAGE1))?;
    write_history(&rec.tail.history, &p(files::HISTORY))?;
    let mut text = format!("k2 = {}\namplitude = {}\ntail_iterations = {}\n", rec.k2, rec.amplitude, rec.tail.iterations);
    text.push_str(&report.to_text());
    std::fs::write(p(files::REPORT), text).map_err(|e| Error::io(p(files::REPORT), e))?;
    let csv = format!("{}\n{}\n", Report::CSV_HEADER, report.csv_row());
    std::fs::write(p(files::REPORT_CSV), csv).map_err(|e| Error::io(p(files::REPORT_CSV), e))?;
    Ok([
        files::COEFFICIENT,
        files::COEFFICIENT_IMAGE,
        files::COEFFICIENT_OMEGA1,
        files::TAIL,
        files::TAIL_STAGE1,
        files::COEFFICIENT_STAGE1,
        files::HISTORY,
        files::REPORT,
        files::REPORT_CSV,
    ]
    .iter()
    .map(|n| p(n))
    .collect())
}

/// Reconstruct and score against the configured scene.
pub fn run(measured: &MeasurementSet, cfg: &PipelineConfig) -> Result<(Reconstruction, Report)> {
    let meshes = Meshes::build(cfg)?;
    let rec = reconstruct(measured, cfg, &meshes)?;
    let report = metrics(&rec.a, &cfg.scene)?;
    Ok((rec, report))
}
