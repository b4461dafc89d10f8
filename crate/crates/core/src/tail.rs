//! Tail function `T(x) = w(x, s̄)`: an asymptotic first guess from four
//! sources around Ω₁, refined iteratively with the far line source.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{assemble, discrete_l2, recover_coefficient, solve_scaled, Dirichlet, EllipticProblem, RecoveryOptions};
use crate::forward::{solve_point_source, MeasurementSet, Trace};
use crate::mesh::{boundary_nodes, transfer_field_or, BoundaryTag, Mesh, ScalarField, Units};
use crate::scenes::SourceLayout;
use crate::specfun::SourcePoint;

const SOLVE_TOL: f64 = 1e-10;

/// How `p∞` is read off the boundary data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailFormula {
    /// Exact inverse of the asymptotic expansion of `ln u`:
    /// `p∞ = w̃ + kS + ln(2√(2π)) + ½ ln S`.
    Consistent,
    /// `p∞ = w̃ + kS + ½ ln(π / (2S))`.
    Printed,
}

impl std::fmt::Display for TailFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TailFormula::Consistent => "consistent",
            TailFormula::Printed => "printed",
        })
    }
}

impl std::str::FromStr for TailFormula {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "consistent" => Ok(TailFormula::Consistent),
            "printed" => Ok(TailFormula::Printed),
            _ => Err(format!("unknown tail formula `{s}` (expected consistent or printed)")),
        }
    }
}

/// Which side of Ω₁ supplies `p∞` for a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailEdge {
    /// The edge facing the source.
    Near,
    /// The opposite edge, in the shadow of the medium.
    Far,
}

impl std::fmt::Display for TailEdge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TailEdge::Near => "near",
            TailEdge::Far => "far",
        })
    }
}

impl std::str::FromStr for TailEdge {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "near" => Ok(TailEdge::Near),
            "far" => Ok(TailEdge::Far),
            _ => Err(format!("unknown tail edge `{s}` (expected near or far)")),
        }
    }
}

/// How the boundary term enters `ln u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PInfForm {
    /// `ln u = … + p∞`, valid for small `p∞`.
    Linearized,
    /// `ln u = … + ln(1 + p∞)`.
    Logarithmic,
}

impl std::fmt::Display for PInfForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PInfForm::Linearized => "linearized",
            PInfForm::Logarithmic => "logarithmic",
        })
    }
}

impl std::str::FromStr for PInfForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linearized" => Ok(PInfForm::Linearized),
            "logarithmic" => Ok(PInfForm::Logarithmic),
            _ => Err(format!("unknown p_inf form `{s}` (expected linearized or logarithmic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailOptions {
    pub formula: TailFormula,
    pub edge: TailEdge,
    pub form: PInfForm,
    /// Stopping threshold for the relative change of `a_m`.
    pub eps: f64,
    pub max_iterations: usize,
    pub recovery: RecoveryOptions,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            formula: TailFormula::Consistent,
            edge: TailEdge::Far,
            form: PInfForm::Logarithmic,
            eps: 1e-5,
            max_iterations: 100,
            recovery: RecoveryOptions::default(),
        }
    }
}

impl TailOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1e-2) {
            return Err(Error::Domain(format!("eps must lie in (0, 1e-2], got {}", self.eps)));
        }
        if self.max_iterations < 2 {
            return Err(Error::Domain("at least two refinement iterations are required".into()));
        }
        Ok(())
    }
}

/// First-stage output.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub t1: ScalarField,
    /// Clamped average of the per-source coefficients.
    pub a1: ScalarField,
    /// Per-source coefficients, by source id.
    pub per_source: Vec<(usize, ScalarField)>,
    /// Smallest `1 + p∞` over all edge samples.
    pub min_one_plus_p: f64,
    /// Largest `|p∞|` over all edge samples.
    pub max_abs_p: f64,
}

#[derive(Debug, Clone)]
pub struct TailResult {
    pub t: ScalarField,
    pub t1: ScalarField,
    pub a_stage1: ScalarField,
    /// `m₁`, the index of the accepted iterate.
    pub iterations: usize,
    /// `(m, ‖a_m - a_{m-1}‖ / ‖a_{m-1}‖)` for `m = 2..=m₁`.
    pub history: Vec<(usize, f64)>,
    /// `u_{m₁}` on Ω₁.
    pub u: ScalarField,
}

/// Side of the square facing (or opposite) the source: the fixed axis, its
/// coordinate and the running axis.
fn edge_of(src: &SourcePoint, half_width: f64, edge: TailEdge) -> (usize, f64, usize) {
    let [x, z] = src.position;
    let (axis, sign) = if x.abs() >= z.abs() { (0, x.signum()) } else { (1, z.signum()) };
    let sign = match edge {
        TailEdge::Near => sign,
        TailEdge::Far => -sign,
    };
    (axis, sign * half_width, 1 - axis)
}

fn square_half_width(mesh: &Mesh) -> Result<f64> {
    match mesh.spec() {
        crate::mesh::DomainSpec::Square { half_width, center } if center == &[0.0, 0.0] => Ok(*half_width),
        other => Err(Error::Inconsistent(format!("the tail is built on a centered square, got {other:?}"))),
    }
}

/// `p∞` along the chosen edge, as `(running coordinate, additive term of
/// ln u, 1 + p∞)` sorted.
fn edge_profile(trace: &Trace, k: f64, half_width: f64, opts: &TailOptions) -> Result<Vec<(f64, f64, f64)>> {
    let (axis, value, run) = edge_of(&trace.source, half_width, opts.edge);
    let ln_norm = (2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let mut out = Vec::new();
    for (p, &phi) in trace.points.iter().zip(&trace.intensity) {
        if (p[axis] - value).abs() > 1e-9 * half_width.max(1.0) {
            continue;
        }
        let s = trace.source.distance_to(*p);
        let w = phi.ln();
        let p_inf = match opts.formula {
            TailFormula::Consistent => w + k * s + ln_norm + 0.5 * s.ln(),
            TailFormula::Printed => w + k * s + 0.5 * (std::f64::consts::PI / (2.0 * s)).ln(),
        };
        // `p_inf` here is the additive term of `ln u`.
        let one_plus_p = match opts.form {
            PInfForm::Linearized => 1.0 + p_inf,
            PInfForm::Logarithmic => p_inf.exp(),
        };
        if !(one_plus_p > 0.0) {
            return Err(Error::Asymptotic { source_id: trace.id, value: one_plus_p, x: p[0], z: p[1] });
        }
        out.push((p[run], p_inf, one_plus_p));
    }
    if out.len() < 2 {
        return Err(Error::Inconsistent(format!("trace {} has fewer than two samples on the tail edge", trace.id)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

fn interpolate_profile(profile: &[(f64, f64)], t: f64) -> f64 {
    let n = profile.len();
    if t <= profile[0].0 {
        return profile[0].1;
    }
    if t >= profile[n - 1].0 {
        return profile[n - 1].1;
    }
    let i = profile.partition_point(|e| e.0 <= t);
    let (a, b) = (profile[i - 1], profile[i]);
    a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
}

/// Stage 1: for each tail source, read `p∞` off the chosen edge of Ω₁,
/// extend it perpendicular to that edge, form `u = exp(w̃)` from the
/// asymptotic expansion and recover a coefficient from it. The clamped
/// average drives a forward solve for the far line source, whose logarithm
/// scaled by `s̄⁻²` is the first tail.
pub fn stage1_tail(
    smoothed: &MeasurementSet,
    layout: &SourceLayout,
    k2: f64,
    omega1: &Arc<Mesh>,
    forward: &Arc<Mesh>,
    opts: &TailOptions,
) -> Result<Stage1> {
    opts.validate()?;
    if !smoothed.smoothed {
        return Err(Error::Inconsistent("the tail needs data smoothed onto the square boundary".into()));
    }
    let k = k2.sqrt();
    let hw = square_half_width(omega1)?;
    let mut ids: Vec<usize> = layout.tail_sources().iter().map(|e| e.0).collect();
    ids.sort_unstable();

    let mut per_source = Vec::with_capacity(ids.len());
    let mut min_one_plus_p = f64::INFINITY;
    let mut max_abs_p: f64 = 0.0;
    for &id in &ids {
        let trace = smoothed.trace(id)?;
        let profile = edge_profile(trace, k, hw, opts)?;
        for &(_, _, one_plus_p) in &profile {
            min_one_plus_p = min_one_plus_p.min(one_plus_p);
            max_abs_p = max_abs_p.max((one_plus_p - 1.0).abs());
        }
        let profile: Vec<(f64, f64)> = profile.iter().map(|e| (e.0, e.1)).collect();
        let (_, _, run) = edge_of(&trace.source, hw, opts.edge);
        let ln_norm = (2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let u = ScalarField::from_fn(omega1.clone(), Units::Intensity, |x| {
            let s = trace.source.distance_to(x);
            (-k * s - ln_norm - 0.5 * s.ln() + interpolate_profile(&profile, x[run])).exp()
        })?;
        let a = recover_coefficient(&u, k2, &opts.recovery).map_err(|e| e.at("tail stage 1"))?;
        per_source.push((id, a));
    }
    log::info!("stage 1: min(1 + p_inf) = {min_one_plus_p:.4}, max |p_inf| = {max_abs_p:.4}");

    let n = omega1.node_count();
    let mut mean = vec![0.0; n];
    for (_, a) in &per_source {
        for (m, v) in mean.iter_mut().zip(a.values()) {
            *m += v;
        }
    }
    let count = per_source.len() as f64;
    let a1 = ScalarField::new(omega1.clone(), mean.into_iter().map(|v| (v / count).max(k2)).collect(), Units::Coefficient)?;

    let (_, far) = layout.far();
    let a_forward = transfer_field_or(&a1, forward, k2)?;
    let a_forward = a_forward.map(Units::Coefficient, |v| v.max(k2))?;
    let sol = solve_point_source(&a_forward, &far.with_amplitude(1.0)?, k2).map_err(|e| e.at("tail stage 1"))?;
    let u = sol.sample(omega1, Units::Intensity)?;
    let s2 = far.s * far.s;
    let mut t1 = Vec::with_capacity(n);
    for (i, &v) in u.values().iter().enumerate() {
        if !(v > 0.0) {
            let p = omega1.nodes()[i];
            return Err(Error::Positivity { what: "stage-1 u", value: v, x: p[0], z: p[1] });
        }
        t1.push(v.ln() / s2);
    }
    let t1 = ScalarField::new(omega1.clone(), t1, Units::Dimensionless)?;
    Ok(Stage1 { t1, a1, per_source, min_one_plus_p, max_abs_p })
}

/// Boundary values of a smoothed trace keyed by the node of `mesh` they sit on.
pub(crate) fn trace_on_boundary(trace: &Trace, mesh: &Mesh) -> Result<Vec<f64>> {
    let loop_nodes = boundary_nodes(mesh, BoundaryTag::Outer)?;
    if loop_nodes.len() != trace.points.len() {
        return Err(Error::Inconsistent(format!(
            "trace {} has {} samples but the square boundary has {} nodes",
            trace.id,
            trace.points.len(),
            loop_nodes.len()
        )));
    }
    let mut values = vec![0.0; mesh.node_count()];
    for ((&node, p), &v) in loop_nodes.iter().zip(&trace.points).zip(&trace.intensity) {
        let q = mesh.nodes()[node];
        if (q[0] - p[0]).abs() > 1e-9 || (q[1] - p[1]).abs() > 1e-9 {
            return Err(Error::Inconsistent(format!("trace {} sample ({}, {}) is not a boundary node", trace.id, p[0], p[1])));
        }
        values[node] = v;
    }
    Ok(values)
}

/// Stage 2: solve `Δu₁ - a₁u₁ = 0` with the far-source data on ∂Ω₁, then
/// correct `u_m = u_{m-1} + w_m` with
/// `Δw_m - a_m w_m = (a_m - a_{m-1}) u_{m-1}`, `w_m = 0` on ∂Ω₁,
/// and `a_{m+1}` recovered from `u_m`, until the relative change of `a_m`
/// drops below `eps`. Returns `T = s̄⁻² ln u_{m₁}`.
pub fn stage2_refine(stage1: &Stage1, far_trace: &Trace, k2: f64, opts: &TailOptions) -> Result<TailResult> {
    opts.validate()?;
    let mesh = stage1.a1.mesh().clone();
    if let Some(i) = stage1.a1.values().iter().position(|&v| v < k2) {
        let p = mesh.nodes()[i];
        return Err(Error::Positivity { what: "a1 - k2", value: stage1.a1.values()[i] - k2, x: p[0], z: p[1] });
    }
    let s_bar = far_trace.source.s;
    let s2 = s_bar * s_bar;
    let boundary = trace_on_boundary(far_trace, &mesh)?;
    let scale: Vec<f64> = stage1.t1.values().iter().map(|t| (t * s2).exp().max(f64::MIN_POSITIVE)).collect();

    let a1 = stage1.a1.values().to_vec();
    let problem = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, |i| boundary[i])).reaction(&a1);
    let system = assemble(&problem)?;
    let mut u = system.expand(&solve_scaled(&system, SOLVE_TOL, &scale)?);

    let mut a_prev = a1;
    let mut a_cur = recover_coefficient(&ScalarField::new(mesh.clone(), u.clone(), Units::Intensity)?, k2, &opts.recovery)?
        .into_values();
    let mut history = Vec::new();
    let mut m = 2;
    loop {
        let diff: Vec<f64> = a_cur.iter().zip(&a_prev).map(|(x, y)| x - y).collect();
        let forcing: Vec<f64> = diff.iter().zip(&u).map(|(d, v)| d * v).collect();
        let problem = EllipticProblem::new(&mesh, Dirichlet::homogeneous(&mesh)).reaction(&a_cur).forcing(&forcing);
        let system = assemble(&problem)?;
        if forcing.iter().any(|f| *f != 0.0) {
            let w = system.expand(&solve_scaled(&system, SOLVE_TOL, &scale)?);
            for (ui, wi) in u.iter_mut().zip(&w) {
                *ui += wi;
            }
        }
        let ratio = discrete_l2(&diff) / discrete_l2(&a_prev);
        history.push((m, ratio));
        log::debug!("stage 2: m = {m}, ratio = {ratio:.3e}");
        if !ratio.is_finite() {
            return Err(Error::NonFinite { name: "tail ratio", index: m });
        }
        if ratio <= opts.eps {
            break;
        }
        if m >= opts.max_iterations {
            return Err(Error::TailNonConvergence {
                iterations: m,
                last: ratio,
                history: history.iter().map(|e| e.1).collect(),
            });
        }
        let next = recover_coefficient(&ScalarField::new(mesh.clone(), u.clone(), Units::Intensity)?, k2, &opts.recovery)?;
        a_prev = std::mem::replace(&mut a_cur, next.into_values());
        m += 1;
    }

    let mut t = Vec::with_capacity(u.len());
    for (i, &v) in u.iter().enumerate() {
        if !(v > 0.0) {
            let p = mesh.nodes()[i];
            return Err(Error::Positivity { what: "u_m1", value: v, x: p[0], z: p[1] });
        }
        t.push(v.ln() / s2);
    }
    Ok(TailResult {
        t: ScalarField::new(mesh.clone(), t, Units::Dimensionless)?,
        t1: stage1.t1.clone(),
        a_stage1: stage1.a1.clone(),
        iterations: m,
        history,
        u: ScalarField::new(mesh, u, Units::Intensity)?,
    })
}

/// Writes the iteration history as `m,ratio` rows.
pub fn write_history(history: &[(usize, f64)], path: &std::path::Path) -> Result<()> {
    let mut s = String::from("m,ratio\n");
    for (m, r) in history {
        s.push_str(&format!("{m},{r}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::pipeline::{synthesize, Meshes};
    use crate::preprocess::smooth_to_omega1;
    use crate::scenes::{PhantomScene, DEFAULT_K2};
    use crate::specfun::fundamental_solution;
    use std::sync::OnceLock;

    struct Fixture {
        cfg: PipelineConfig,
        meshes: Meshes,
        smoothed: MeasurementSet,
        stage1: Stage1,
    }

    /// Noiseless homogeneous data smoothed onto ∂Ω₁, shared by the tests.
    fn homogeneous() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let mut cfg = PipelineConfig::new(PhantomScene::homogeneous(DEFAULT_K2));
            cfg.noise = 0.0;
            let meshes = Meshes::build(&cfg).unwrap();
            let measured = synthesize(&cfg, &meshes.detectors().unwrap()).unwrap();
            let (smoothed, _) = smooth_to_omega1(&measured, DEFAULT_K2, 1.0, &meshes.annulus, &meshes.omega1).unwrap();
            let stage1 = stage1_tail(&smoothed, &cfg.layout().unwrap(), DEFAULT_K2, &meshes.omega1, &meshes.forward, &cfg.tail).unwrap();
            Fixture { cfg, meshes, smoothed, stage1 }
        })
    }

    #[test]
    fn homogeneous_first_stage() {
        let f = homogeneous();
        let k2 = DEFAULT_K2;
        assert!(f.stage1.a1.min() >= k2);
        assert!(f.stage1.a1.max() <= 1.01 * k2, "max a1 = {}", f.stage1.a1.max());
        assert!(f.stage1.min_one_plus_p > 0.0);
        for (x, t) in f.meshes.omega1.nodes().iter().zip(f.stage1.t1.values()) {
            let want = fundamental_solution(*x, [20.0, 0.0], k2.sqrt()).unwrap().ln() / 400.0;
            assert!((t - want).abs() <= 0.02 * want.abs(), "at {x:?}: {t} vs {want}");
        }
    }

    #[test]
    fn homogeneous_refinement_stops_early() {
        let f = homogeneous();
        let far = f.cfg.layout().unwrap().far().0;
        let r = stage2_refine(&f.stage1, f.smoothed.trace(far).unwrap(), DEFAULT_K2, &f.cfg.tail).unwrap();
        assert!(r.iterations <= 2, "m1 = {}", r.iterations);
        assert!(r.history.iter().all(|e| e.1.is_finite()));
        assert!(r.history.last().unwrap().1 <= f.cfg.tail.eps);
        for (a, b) in r.t.values().iter().zip(f.stage1.t1.values()) {
            assert!((a - b).abs() <= 0.01 * b.abs());
        }
        assert!(r.u.min() > 0.0);
    }

    #[test]
    fn source_order_does_not_matter() {
        let f = homogeneous();
        let mut layout = f.cfg.layout().unwrap();
        layout.tail.reverse();
        let s = stage1_tail(&f.smoothed, &layout, DEFAULT_K2, &f.meshes.omega1, &f.meshes.forward, &f.cfg.tail).unwrap();
        assert_eq!(s.a1.values(), f.stage1.a1.values());
    }

    #[test]
    fn scaled_data_give_the_same_coefficient() {
        let f = homogeneous();
        let scaled = f.smoothed.scaled(3.0);
        let s = stage1_tail(&scaled, &f.cfg.layout().unwrap(), DEFAULT_K2, &f.meshes.omega1, &f.meshes.forward, &f.cfg.tail).unwrap();
        for (a, b) in s.a1.values().iter().zip(f.stage1.a1.values()) {
            assert!((a - b).abs() <= 1e-8 * b);
        }
    }

    #[test]
    fn dim_data_violate_the_asymptotic_bound() {
        let f = homogeneous();
        let dim = f.smoothed.scaled(1e-3);
        let linear = TailOptions { form: PInfForm::Linearized, ..f.cfg.tail };
        let e = stage1_tail(&dim, &f.cfg.layout().unwrap(), DEFAULT_K2, &f.meshes.omega1, &f.meshes.forward, &linear).unwrap_err();
        assert!(matches!(e, Error::Asymptotic { value, .. } if value <= 0.0), "{e}");
        let s = stage1_tail(&dim, &f.cfg.layout().unwrap(), DEFAULT_K2, &f.meshes.omega1, &f.meshes.forward, &f.cfg.tail).unwrap();
        assert!(s.min_one_plus_p > 0.0);
    }

    #[test]
    fn both_forms_give_the_same_coefficient() {
        let f = homogeneous();
        let linear = TailOptions { form: PInfForm::Linearized, ..f.cfg.tail };
        let s = stage1_tail(&f.smoothed, &f.cfg.layout().unwrap(), DEFAULT_K2, &f.meshes.omega1, &f.meshes.forward, &linear).unwrap();
        assert_eq!(s.a1.values(), f.stage1.a1.values());
        // Same additive term p: 1 + p against e^p.
        let p = s.min_one_plus_p - 1.0;
        assert!((f.stage1.min_one_plus_p - p.exp()).abs() < 1e-12);
    }

    #[test]
    fn refinement_requires_clamped_coefficient() {
        let f = homogeneous();
        let mut stage1 = f.stage1.clone();
        stage1.a1 = stage1.a1.map(Units::Coefficient, |v| v - 0.1).unwrap();
        let far = f.cfg.layout().unwrap().far().0;
        let e = stage2_refine(&stage1, f.smoothed.trace(far).unwrap(), DEFAULT_K2, &f.cfg.tail).unwrap_err();
        assert!(matches!(e, Error::Positivity { .. }));
    }

    #[test]
    fn options_are_checked() {
        let bad = TailOptions { eps: 0.5, ..TailOptions::default() };
        assert!(bad.validate().is_err());
        let bad = TailOptions { max_iterations: 1, ..TailOptions::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TailOptions::default().eps, 1e-5);
    }

    #[test]
    fn edges_and_names() {
        let src = SourcePoint::new([0.0, -20.0], 1.0).unwrap();
        assert_eq!(edge_of(&src, 5.0, TailEdge::Near), (1, -5.0, 0));
        assert_eq!(edge_of(&src, 5.0, TailEdge::Far), (1, 5.0, 0));
        let src = SourcePoint::new([20.0, 0.0], 1.0).unwrap();
        assert_eq!(edge_of(&src, 5.0, TailEdge::Near), (0, 5.0, 1));
        for f in [TailFormula::Consistent, TailFormula::Printed] {
            assert_eq!(f.to_string().parse::<TailFormula>().unwrap(), f);
        }
        for e in [TailEdge::Near, TailEdge::Far] {
            assert_eq!(e.to_string().parse::<TailEdge>().unwrap(), e);
        }
        for f in [PInfForm::Linearized, PInfForm::Logarithmic] {
            assert_eq!(f.to_string().parse::<PInfForm>().unwrap(), f);
        }
        assert!("sideways".parse::<TailEdge>().is_err());
    }

    #[test]
    fn profile_interpolation_is_linear_and_flat_outside() {
        let p = [(-1.0, 2.0), (0.0, 4.0), (2.0, 0.0)];
        assert_eq!(interpolate_profile(&p, -3.0), 2.0);
        assert_eq!(interpolate_profile(&p, 5.0), 0.0);
        assert!((interpolate_profile(&p, -0.5) - 3.0).abs() < 1e-15);
        assert!((interpolate_profile(&p, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn history_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history(&[(2, 0.5), (3, 1e-6)], &path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "m,ratio\n2,0.5\n3,0.000001\n");
    }
}
