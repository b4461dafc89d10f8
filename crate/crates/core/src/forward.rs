//! Point-source forward solves and synthetic boundary measurements.
//!
//! The field of a source of strength `A` is written as `u = A u0 v`, where
//! `u0` is the free-space solution for the background `k²`. Away from the
//! source the ratio `v` satisfies
//!
//! ```text
//! Δv + 2∇ln u0 · ∇v - (a - k²) v = 0   in Ω₀,      v = 0   on ∂Ω₀,
//! ```
//!
//! and `v → 1` at the source. The exponential decay and the singularity
//! both live in `u0`, which is evaluated in closed form, so the mesh only
//! resolves the slowly varying `v`. An additive split `u = A u0 + û` would
//! be equivalent in exact arithmetic but loses positivity inside strong
//! absorbers, where `û ≈ -A u0` and the discretization error of `û` exceeds
//! `u` itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fem::{assemble, solve_scaled, Dirichlet, EllipticProblem};
use crate::mesh::{Mesh, ScalarField, Units};
use crate::scenes::OMEGA_RADIUS;
use crate::specfun::{k0_k1, SourcePoint};
use crate::Point;

const SOLVE_TOL: f64 = 1e-10;
/// Nodes closer to the source than this many mesh widths are pinned to
/// `v = 1`.
const PIN_RADIUS: f64 = 1.5;
/// Rescaled re-solves used to resolve `v` where it is many decades small.
const REFINE_PASSES: usize = 4;
/// Each rescaled pass trusts values down to this fraction of the last floor.
const REFINE_FLOOR: f64 = 1e-7;

/// `A K0(k r) / 2π` without the singularity check.
pub(crate) fn green(src: &SourcePoint, k: f64, r: f64) -> f64 {
    src.amplitude * k0_k1(k * r).0 / (2.0 * std::f64::consts::PI)
}

/// Solution of one point-source problem.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    mesh: Arc<Mesh>,
    source: SourcePoint,
    k: f64,
    ratio: Vec<f64>,
}

impl ForwardSolution {
    pub(crate) fn from_ratio(mesh: Arc<Mesh>, source: SourcePoint, k: f64, ratio: Vec<f64>) -> Self {
        Self { mesh, source, k, ratio }
    }

    pub fn source(&self) -> &SourcePoint {
        &self.source
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Nodal values of `v = u / (A u0)`.
    pub fn ratio(&self) -> &[f64] {
        &self.ratio
    }

    /// `u(p) = A u0(p) v(p)`, with `v` interpolated linearly.
    pub fn eval(&self, p: Point) -> Result<f64> {
        let r = self.source.distance_to(p);
        if r == 0.0 {
            return Err(Error::Singularity { x: p[0], z: p[1] });
        }
        let v = self.mesh.interpolate(&self.ratio, p).ok_or(Error::OutOfDomain { node: 0, x: p[0], z: p[1] })?;
        Ok(green(&self.source, self.k, r) * v)
    }

    /// `u` at every node of `mesh`, which must lie inside Ω₀ and avoid the
    /// source.
    pub fn sample(&self, mesh: &Arc<Mesh>, units: Units) -> Result<ScalarField> {
        let mut values = Vec::with_capacity(mesh.node_count());
        for (i, &p) in mesh.nodes().iter().enumerate() {
            let v = self.eval(p).map_err(|e| match e {
                Error::OutOfDomain { x, z, .. } => Error::OutOfDomain { node: i, x, z },
                other => other,
            })?;
            values.push(v);
        }
        ScalarField::new(mesh.clone(), values, units)
    }

    /// `u` at the given points.
    pub fn trace(&self, points: &[Point]) -> Result<Vec<f64>> {
        points.iter().map(|&p| self.eval(p)).collect()
    }
}

/// Solves `Δu - a u = -A δ(x - x0)` in Ω₀ with `u = 0` on ∂Ω₀.
///
/// `a` must satisfy `a ≥ k²` and equal `k²` near the source; the source
/// must lie inside Ω₀ and outside the closed disk Ω. Positivity of `u` is
/// checked at every node of Ω̄.
pub fn solve_point_source(a: &ScalarField, src: &SourcePoint, k2: f64) -> Result<ForwardSolution> {
    if !(k2 > 0.0) || !k2.is_finite() {
        return Err(Error::Domain(format!("k2 must be positive, got {k2}")));
    }
    let mesh = a.mesh().clone();
    if !mesh.spec().contains(src.position, -1e-9) {
        return Err(Error::Domain(format!(
            "source at ({}, {}) is not strictly inside the forward domain",
            src.position[0], src.position[1]
        )));
    }
    if src.s <= OMEGA_RADIUS {
        return Err(Error::Domain(format!("source at distance {} lies inside the imaged disk", src.s)));
    }
    if let Some(i) = a.values().iter().position(|&v| v < k2 * (1.0 - 1e-12)) {
        let p = mesh.nodes()[i];
        return Err(Error::Positivity { what: "a - k2", value: a.values()[i] - k2, x: p[0], z: p[1] });
    }
    let k = k2.sqrt();
    let reaction: Vec<f64> = a.values().iter().map(|&ai| (ai - k2).max(0.0)).collect();
    let ratio = solve_ratio(&mesh, src, k, &reaction, |_| 0.0, |p| p[0].hypot(p[1]) <= OMEGA_RADIUS + 1e-9)?;
    let sol = ForwardSolution { mesh: mesh.clone(), source: *src, k, ratio };

    for (i, &p) in mesh.nodes().iter().enumerate() {
        if p[0].hypot(p[1]) <= OMEGA_RADIUS + 1e-9 && !(sol.ratio[i] > 0.0) {
            let u = green(src, k, src.distance_to(p)) * sol.ratio[i];
            return Err(Error::Positivity { what: "u", value: u, x: p[0], z: p[1] });
        }
    }
    Ok(sol)
}

/// Solves for `v = u / (A u0)` with reaction `a - k²` given per node.
/// Boundary nodes take `boundary(node)`; interior nodes next to the source
/// are pinned to 1, which requires the reaction to vanish there. Where `v`
/// is tiny at a node accepted by `watch`, the system is re-solved with a
/// diagonal scaling by the previous iterate so that small values keep their
/// relative accuracy.
pub(crate) fn solve_ratio(
    mesh: &Arc<Mesh>,
    src: &SourcePoint,
    k: f64,
    reaction: &[f64],
    boundary: impl Fn(usize) -> f64,
    watch: impl Fn(Point) -> bool,
) -> Result<Vec<f64>> {
    let nodes = mesh.nodes();
    let nearest = nodes.iter().map(|&p| src.distance_to(p)).fold(f64::INFINITY, f64::min);
    let pin = (PIN_RADIUS * mesh.h()).max(nearest * (1.0 + 1e-9));

    let mut mask = vec![false; nodes.len()];
    let mut values = vec![0.0; nodes.len()];
    for (i, &p) in nodes.iter().enumerate() {
        if mesh.is_boundary(i) {
            mask[i] = true;
            values[i] = boundary(i);
        } else if src.distance_to(p) <= pin {
            if reaction[i] > 0.0 {
                return Err(Error::Domain(format!("a exceeds k2 next to the source at ({}, {})", p[0], p[1])));
            }
            mask[i] = true;
            values[i] = 1.0;
        }
    }

    // b = -2∇ln u0 = 2k K1/K0 r̂ at each centroid.
    let drift: Vec<[f64; 2]> = (0..mesh.triangles().len())
        .map(|t| {
            let c = mesh.centroid(t);
            let d = [c[0] - src.position[0], c[1] - src.position[1]];
            let r = d[0].hypot(d[1]).max(1e-12);
            let (k0, k1) = k0_k1(k * r);
            let m = if k0 > 0.0 { 2.0 * k * k1 / k0 } else { 2.0 * k };
            [m * d[0] / r, m * d[1] / r]
        })
        .collect();
    let problem = EllipticProblem::new(mesh, Dirichlet { mask, values }).reaction(reaction).convection(&drift).lumped().upwind();
    let system = assemble(&problem)?;

    let mut scale = vec![1.0; nodes.len()];
    let mut ratio = system.expand(&solve_scaled(&system, SOLVE_TOL, &scale)?);
    let top = ratio.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut floor = top * REFINE_FLOOR;
    for _ in 0..REFINE_PASSES {
        let watched_min = ratio.iter().zip(nodes).filter(|(_, &p)| watch(p)).fold(f64::INFINITY, |m, (v, _)| m.min(*v));
        if watched_min > floor * 1e3 {
            break;
        }
        for (g, v) in scale.iter_mut().zip(&ratio) {
            *g = v.max(floor);
        }
        ratio = system.expand(&solve_scaled(&system, SOLVE_TOL, &scale)?);
        floor *= REFINE_FLOOR;
        if floor < 1e-250 {
            break;
        }
    }
    Ok(ratio)
}

/// Boundary samples of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub id: usize,
    pub source: SourcePoint,
    pub points: Vec<Point>,
    pub intensity: Vec<f64>,
}

impl Trace {
    /// Index of the brightest and dimmest samples.
    pub fn extremes(&self) -> (usize, usize) {
        let mut hi = 0;
        let mut lo = 0;
        for (i, &v) in self.intensity.iter().enumerate() {
            if v > self.intensity[hi] {
                hi = i;
            }
            if v < self.intensity[lo] {
                lo = i;
            }
        }
        (hi, lo)
    }
}

/// Boundary intensities for every source, ordered by source id.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub traces: Vec<Trace>,
    pub k2: f64,
    pub noise: f64,
    pub seed: u64,
    /// Source strength the intensities are expressed in.
    pub amplitude: f64,
    /// True once the data have been moved to ∂Ω₁ by smoothing.
    pub smoothed: bool,
    /// Number of noisy samples clipped to stay positive.
    pub clipped: usize,
}

impl MeasurementSet {
    pub fn trace(&self, id: usize) -> Result<&Trace> {
        self.traces
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Inconsistent(format!("measurement set has no trace for source {id}")))
    }

    pub fn ids(&self) -> Vec<usize> {
        self.traces.iter().map(|t| t.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.traces.is_empty() {
            return Err(Error::Inconsistent("measurement set is empty".into()));
        }
        for w in self.traces.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::Inconsistent("traces must be sorted by increasing source id".into()));
            }
        }
        for t in &self.traces {
            if t.points.len() != t.intensity.len() || t.points.is_empty() {
                return Err(Error::Inconsistent(format!("trace {} has mismatched or empty samples", t.id)));
            }
            if let Some(i) = t.intensity.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                let p = t.points[i];
                return Err(Error::Positivity { what: "intensity", value: t.intensity[i], x: p[0], z: p[1] });
            }
        }
        Ok(())
    }

    /// Copy with every intensity multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.traces {
            for v in &mut t.intensity {
                *v *= c;
            }
        }
        out.amplitude *= c;
        out
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta")
    }

    /// Writes the CSV and its `.meta` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut csv = String::from("source_id,s,x,z,intensity\n");
        for t in &self.traces {
            for (p, v) in t.points.iter().zip(&t.intensity) {
                let _ = writeln!(csv, "{},{},{},{},{}", t.id, t.source.s, p[0], p[1], v);
            }
        }
        fs::write(path, csv).map_err(|e| Error::io(path, e))?;

        let mut meta = String::new();
        let _ = writeln!(meta, "k2 = {}", self.k2);
        let _ = writeln!(meta, "noise = {}", self.noise);
        let _ = writeln!(meta, "seed = {}", self.seed);
        let _ = writeln!(meta, "amplitude = {}", self.amplitude);
        let _ = writeln!(meta, "smoothed = {}", self.smoothed);
        let _ = writeln!(meta, "clipped = {}", self.clipped);
        for t in &self.traces {
            let _ = writeln!(meta, "source_{}_x = {}", t.id, t.source.position[0]);
            let _ = writeln!(meta, "source_{}_z = {}", t.id, t.source.position[1]);
        }
        let mp = Self::meta_path(path);
        fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
    }

    /// Reads a CSV and its sidecar. Source positions come from the sidecar
    /// when present; otherwise each source is placed on the positive x axis
    /// at its recorded distance.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |row: usize, msg: String| Error::Parse { path: path.to_path_buf(), row, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "source_id,s,x,z,intensity" => {}
            _ => return Err(perr(1, "expected header `source_id,s,x,z,intensity`".into())),
        }

        let mp = Self::meta_path(path);
        let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let mut meta = BTreeMap::new();
        for (i, line) in meta_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { path: mp.clone(), row: i + 1, msg: "expected `key = value`".into() })?;
            meta.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let num = |key: &str, default: Option<f64>| -> Result<f64> {
            match meta.get(key) {
                Some((row, v)) => v
                    .parse()
                    .map_err(|_| Error::Parse { path: mp.clone(), row: *row, msg: format!("`{key}` is not a number") }),
                None => default.ok_or_else(|| Error::Parse { path: mp.clone(), row: 0, msg: format!("missing `{key}`") }),
            }
        };
        let k2 = num("k2", None)?;
        let noise = num("noise", Some(0.0))?;
        let amplitude = num("amplitude", Some(1.0))?;
        let seed = match meta.get("seed") {
            Some((row, v)) => v
                .parse()
                .map_err(|_| Error::Parse { path: mp.clone(), row: *row, msg: "`seed` is not an integer".into() })?,
            None => 0,
        };
        let clipped = num("clipped", Some(0.0))? as usize;
        let smoothed = match meta.get("smoothed") {
            Some((row, v)) => v
                .parse()
                .map_err(|_| Error::Parse { path: mp.clone(), row: *row, msg: "`smoothed` must be true or false".into() })?,
            None => false,
        };

        let mut traces: Vec<Trace> = Vec::new();
        for (i, line) in lines {
            let row = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(perr(row, format!("expected 5 fields, found {}", f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| perr(row, format!("bad source id `{}`", f[0])))?;
            let mut vals = [0.0f64; 4];
            for (slot, s) in vals.iter_mut().zip(&f[1..]) {
                *slot = s.parse().map_err(|_| perr(row, format!("bad number `{s}`")))?;
                if !slot.is_finite() {
                    return Err(perr(row, format!("non-finite value `{s}`")));
                }
            }
            let [s, x, z, v] = vals;
            if !(v > 0.0) {
                return Err(perr(row, format!("intensity must be positive, got {v}")));
            }
            if traces.last().map_or(true, |t| t.id != id) {
                if traces.iter().any(|t| t.id == id) {
                    return Err(perr(row, format!("rows of source {id} are not contiguous")));
                }
                let pos = match (meta.get(&format!("source_{id}_x")), meta.get(&format!("source_{id}_z"))) {
                    (Some(_), Some(_)) => [num(&format!("source_{id}_x"), None)?, num(&format!("source_{id}_z"), None)?],
                    _ => [s, 0.0],
                };
                let source = SourcePoint::new(pos, amplitude).map_err(|e| perr(row, e.to_string()))?;
                if (source.s - s).abs() > 1e-9 * s.max(1.0) {
                    return Err(perr(row, format!("distance {s} disagrees with source position")));
                }
                traces.push(Trace { id, source, points: Vec::new(), intensity: Vec::new() });
            }
            let t = traces.last_mut().expect("trace pushed above");
            t.points.push([x, z]);
            t.intensity.push(v);
        }
        traces.sort_by_key(|t| t.id);
        let set = MeasurementSet { traces, k2, noise, seed, amplitude, smoothed, clipped };
        set.validate()?;
        Ok(set)
    }
}

/// Solves every source on the scene `a`, samples `u` at `points` and applies
/// multiplicative noise `1 + noise·N(0, 1)` from a seeded generator.
///
/// A noisy sample that is not positive is replaced by half the smallest
/// positive sample of its trace; the number of such events is recorded.
pub fn synthesize_measurements(
    a: &ScalarField,
    sources: &[(usize, SourcePoint)],
    points: &[Point],
    k2: f64,
    noise: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Domain(format!("noise level must be non-negative, got {noise}")));
    }
    let mut sources = sources.to_vec();
    sources.sort_by_key(|e| e.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(sources.len());
    let mut clipped = 0;
    let mut amplitude = None;
    for (id, src) in sources {
        if *amplitude.get_or_insert(src.amplitude) != src.amplitude {
            return Err(Error::Inconsistent("all sources must share one amplitude".into()));
        }
        let sol = solve_point_source(a, &src, k2)?;
        let mut intensity = sol.trace(points)?;
        if noise > 0.0 {
            for v in &mut intensity {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v *= 1.0 + noise * n;
            }
            let floor = intensity.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
            for v in &mut intensity {
                if !(*v > 0.0) {
                    *v = 0.5 * floor;
                    clipped += 1;
                }
            }
        }
        if clipped > 0 {
            log::warn!("clipped {clipped} non-positive noisy samples");
        }
        traces.push(Trace { id, source: src, points: points.to_vec(), intensity });
    }
    let set = MeasurementSet {
        traces,
        k2,
        noise,
        seed,
        amplitude: amplitude.unwrap_or(1.0),
        smoothed: false,
        clipped,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_nodes, build_mesh, BoundaryTag, DomainSpec};
    use crate::scenes::{build_scene, default_layout, group_scene, Contrast, PhantomScene, DEFAULT_K2, OMEGA0_HALF_WIDTH};
    use crate::specfun::fundamental_solution;

    fn omega0(h: f64) -> Arc<Mesh> {
        Arc::new(build_mesh(DomainSpec::square(OMEGA0_HALF_WIDTH), h).unwrap())
    }

    fn disk_loop() -> Vec<Point> {
        let ann = build_mesh(DomainSpec::annulus(OMEGA0_HALF_WIDTH, OMEGA_RADIUS), 0.6).unwrap();
        boundary_nodes(&ann, BoundaryTag::Inner).unwrap().iter().map(|&i| ann.nodes()[i]).collect()
    }

    #[test]
    fn homogeneous_matches_free_space() {
        let mesh = omega0(0.6);
        let a = ScalarField::constant(mesh.clone(), DEFAULT_K2, Units::Coefficient).unwrap();
        let k = DEFAULT_K2.sqrt();
        let src = SourcePoint::new([14.0, 0.0], 1.0).unwrap();
        let sol = solve_point_source(&a, &src, DEFAULT_K2).unwrap();
        let mut worst: f64 = 0.0;
        for &p in mesh.nodes() {
            let far_edge = OMEGA0_HALF_WIDTH - p[0].abs().max(p[1].abs());
            if src.distance_to(p) < 3.0 * 0.6 || far_edge < 3.0 || p[0].hypot(p[1]) > 10.0 {
                continue;
            }
            let want = fundamental_solution(p, src.position, k).unwrap();
            worst = worst.max(((sol.eval(p).unwrap() - want) / want).abs());
        }
        assert!(worst < 0.01, "worst relative deviation {worst}");
    }

    #[test]
    fn linear_in_amplitude() {
        let mesh = omega0(1.2);
        let scene = group_scene(1, Contrast::Ratio(3.0), DEFAULT_K2).unwrap();
        let a = build_scene(&scene, &mesh).unwrap();
        let s1 = SourcePoint::new([8.0, 0.0], 1.0).unwrap();
        let u1 = solve_point_source(&a, &s1, DEFAULT_K2).unwrap();
        let u2 = solve_point_source(&a, &s1.with_amplitude(2.0).unwrap(), DEFAULT_K2).unwrap();
        for p in [[0.0, 0.0], [4.0, 1.0], [-4.0, 0.0]] {
            let (x, y) = (u1.eval(p).unwrap(), u2.eval(p).unwrap());
            assert!(((y - 2.0 * x) / x).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mesh = omega0(1.2);
        let a = ScalarField::constant(mesh.clone(), DEFAULT_K2, Units::Coefficient).unwrap();
        let inside = SourcePoint::new([2.0, 0.0], 1.0).unwrap();
        assert!(solve_point_source(&a, &inside, DEFAULT_K2).is_err());
        let outside = SourcePoint::new([30.0, 0.0], 1.0).unwrap();
        assert!(solve_point_source(&a, &outside, DEFAULT_K2).is_err());
        let low = ScalarField::constant(mesh, 1.0, Units::Coefficient).unwrap();
        let ok = SourcePoint::new([8.0, 0.0], 1.0).unwrap();
        assert!(matches!(solve_point_source(&low, &ok, DEFAULT_K2), Err(Error::Positivity { .. })));
    }

    #[test]
    fn stronger_absorber_dims_every_sample() {
        let mesh = omega0(0.25);
        let pts = disk_loop();
        let src = [(3, SourcePoint::new([8.0, 0.0], 1.0).unwrap())];
        let run = |c: f64| {
            let a = build_scene(&group_scene(1, Contrast::Ratio(c), DEFAULT_K2).unwrap(), &mesh).unwrap();
            synthesize_measurements(&a, &src, &pts, DEFAULT_K2, 0.0, 1).unwrap()
        };
        let (lo, hi) = (run(2.0), run(4.0));
        for (a, b) in lo.traces[0].intensity.iter().zip(&hi.traces[0].intensity) {
            assert!(b <= a, "{b} > {a}");
        }
    }

    #[test]
    fn synthesis_is_seeded_and_complete() {
        let mesh = omega0(1.2);
        let a = build_scene(&PhantomScene::homogeneous(DEFAULT_K2), &mesh).unwrap();
        let pts = disk_loop();
        let layout = default_layout();
        let m1 = synthesize_measurements(&a, &layout.all(), &pts, DEFAULT_K2, 0.02, 42).unwrap();
        let m2 = synthesize_measurements(&a, &layout.all(), &pts, DEFAULT_K2, 0.02, 42).unwrap();
        let m3 = synthesize_measurements(&a, &layout.all(), &pts, DEFAULT_K2, 0.02, 43).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1, m3);
        assert_eq!(m1.traces.len(), 6);
        assert!(m1.traces.iter().all(|t| t.intensity.len() == pts.len()));
        assert_eq!(m1.ids(), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn noiseless_trace_matches_free_space() {
        let mesh = omega0(0.6);
        let a = build_scene(&PhantomScene::homogeneous(DEFAULT_K2), &mesh).unwrap();
        let pts = disk_loop();
        let k = DEFAULT_K2.sqrt();
        let m = synthesize_measurements(&a, &default_layout().all(), &pts, DEFAULT_K2, 0.0, 0).unwrap();
        for t in &m.traces {
            for (p, v) in t.points.iter().zip(&t.intensity) {
                let want = fundamental_solution(*p, t.source.position, k).unwrap();
                assert!(((v - want) / want).abs() < 0.01);
            }
        }
    }

    #[test]
    fn reciprocity_between_exterior_points() {
        let mesh = omega0(0.6);
        let a = build_scene(&group_scene(2, Contrast::Ratio(3.0), DEFAULT_K2).unwrap(), &mesh).unwrap();
        let pairs = [([8.0, 0.0], [0.0, 6.0]), ([0.0, -8.0], [-6.0, 0.0]), ([8.0, 0.0], [-6.0, 0.5])];
        for (p, q) in pairs {
            let u_pq = solve_point_source(&a, &SourcePoint::new(p, 1.0).unwrap(), DEFAULT_K2).unwrap().eval(q).unwrap();
            let u_qp = solve_point_source(&a, &SourcePoint::new(q, 1.0).unwrap(), DEFAULT_K2).unwrap().eval(p).unwrap();
            assert!(((u_pq - u_qp) / u_qp).abs() < 0.02, "{u_pq} vs {u_qp}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let mesh = omega0(1.2);
        let a = build_scene(&PhantomScene::homogeneous(DEFAULT_K2), &mesh).unwrap();
        let m = synthesize_measurements(&a, &default_layout().all(), &disk_loop(), DEFAULT_K2, 0.02, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write(&path).unwrap();
        let back = MeasurementSet::read(&path).unwrap();
        assert_eq!(m, back);

        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[5] = "1,20,abc,0,1";
        fs::write(&path, lines.join("\n")).unwrap();
        match MeasurementSet::read(&path) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
