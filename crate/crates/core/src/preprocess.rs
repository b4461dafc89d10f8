//! Smoothing of boundary data onto ∂Ω₁ and calibration of the source
//! strength and background absorption.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::forward::{green, solve_point_source, solve_ratio, ForwardSolution, MeasurementSet, Trace};
use crate::mesh::{boundary_nodes, BoundaryTag, Mesh, ScalarField, Units};
use crate::specfun::SourcePoint;
use crate::Point;

const BISECTION_RTOL: f64 = 1e-4;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub amplitude: f64,
    pub k2: f64,
    /// `ln R_comp - ln R_meas` at the returned `k2`.
    pub residual: f64,
    pub x_max: Point,
    pub x_min: Point,
}

/// Extremes of `v = φ / (A u0)` seen while smoothing one source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingBounds {
    pub id: usize,
    /// Range of `v` imposed on ∂Ω, together with 0 on ∂Ω₀ and 1 at the source.
    pub data_range: (f64, f64),
    /// Range of `v` on ∂Ω₁.
    pub trace_range: (f64, f64),
}

impl SmoothingBounds {
    /// Discrete maximum principle: the interior trace stays inside the range
    /// of the boundary data.
    pub fn holds(&self) -> bool {
        let tol = 1e-9;
        self.trace_range.0 >= self.data_range.0 - tol && self.trace_range.1 <= self.data_range.1 + tol
    }
}

fn angle(p: Point) -> f64 {
    let t = p[1].atan2(p[0]);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

/// Periodic piecewise-linear interpolation in the polar angle.
fn interpolate_by_angle(samples: &[(f64, f64)], theta: f64) -> f64 {
    let n = samples.len();
    if n == 1 {
        return samples[0].1;
    }
    let idx = samples.partition_point(|s| s.0 <= theta);
    let (lo, hi) = if idx == 0 || idx == n {
        let lo = samples[n - 1];
        let hi = samples[0];
        (lo, (hi.0 + 2.0 * PI, hi.1))
    } else {
        (samples[idx - 1], samples[idx])
    };
    let mut t = theta;
    if t < lo.0 {
        t += 2.0 * PI;
    }
    let span = hi.0 - lo.0;
    if span <= 0.0 {
        return lo.1;
    }
    let w = (t - lo.0) / span;
    (1.0 - w) * lo.1 + w * hi.1
}

/// Moves every trace from ∂Ω to ∂Ω₁.
///
/// For each source the free problem `Δu - k²u = -A δ(x - x0)` is solved in
/// the annulus Ω₀∖Ω with `u = φ` on ∂Ω and `u = 0` on ∂Ω₀. The data are
/// carried over to the inner boundary nodes by interpolating `φ / (A u0)`
/// in the polar angle. The result is divided by `amplitude`, so the smoothed
/// set describes a unit source.
pub fn smooth_to_omega1(
    measured: &MeasurementSet,
    k2: f64,
    amplitude: f64,
    annulus: &Arc<Mesh>,
    omega1: &Mesh,
) -> Result<(MeasurementSet, Vec<SmoothingBounds>)> {
    measured.validate()?;
    if !(amplitude > 0.0) || !amplitude.is_finite() {
        return Err(Error::Domain(format!("amplitude must be positive, got {amplitude}")));
    }
    if !(k2 > 0.0) {
        return Err(Error::Domain(format!("k2 must be positive, got {k2}")));
    }
    let k = k2.sqrt();
    let inner = boundary_nodes(annulus, BoundaryTag::Inner)?;
    let outer_loop: Vec<Point> = boundary_nodes(omega1, BoundaryTag::Outer)?.iter().map(|&i| omega1.nodes()[i]).collect();
    let zero = vec![0.0; annulus.node_count()];
    let mut inner_value = vec![f64::NAN; annulus.node_count()];

    let mut traces = Vec::with_capacity(measured.traces.len());
    let mut bounds = Vec::with_capacity(measured.traces.len());
    for t in &measured.traces {
        let src = t.source.with_amplitude(amplitude)?;
        let mut samples: Vec<(f64, f64)> = t
            .points
            .iter()
            .zip(&t.intensity)
            .map(|(&p, &v)| (angle(p), v / green(&src, k, src.distance_to(p))))
            .collect();
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in &inner {
            let v = interpolate_by_angle(&samples, angle(annulus.nodes()[i]));
            inner_value[i] = v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let ratio = solve_ratio(annulus, &src, k, &zero, |i| match annulus.tag(i) {
            BoundaryTag::Inner => inner_value[i],
            _ => 0.0,
        }, |_| false)
        .map_err(|e| e.at("smoothing"))?;
        let sol = ForwardSolution::from_ratio(annulus.clone(), src, k, ratio);

        let mut intensity = Vec::with_capacity(outer_loop.len());
        let mut vlo = f64::INFINITY;
        let mut vhi = f64::NEG_INFINITY;
        for &p in &outer_loop {
            let u = sol.eval(p)?;
            let v = u / green(&src, k, src.distance_to(p));
            vlo = vlo.min(v);
            vhi = vhi.max(v);
            if !(u > 0.0) {
                return Err(Error::Positivity { what: "smoothed intensity", value: u, x: p[0], z: p[1] });
            }
            intensity.push(u / amplitude);
        }
        let b = SmoothingBounds { id: t.id, data_range: (lo.min(0.0), hi.max(1.0)), trace_range: (vlo, vhi) };
        if !b.holds() {
            log::warn!("smoothing of source {} left the boundary-data range: {:?}", t.id, b);
        }
        bounds.push(b);
        traces.push(Trace { id: t.id, source: t.source.with_amplitude(1.0)?, points: outer_loop.clone(), intensity });
    }
    let out = MeasurementSet {
        traces,
        k2,
        noise: measured.noise,
        seed: measured.seed,
        amplitude: 1.0,
        smoothed: true,
        clipped: measured.clipped,
    };
    out.validate()?;
    Ok((out, bounds))
}

fn homogeneous_solution(mesh: &Arc<Mesh>, src: &SourcePoint, k2: f64) -> Result<ForwardSolution> {
    let a = ScalarField::constant(mesh.clone(), k2, Units::Coefficient)?;
    solve_point_source(&a, &src.with_amplitude(1.0)?, k2)
}

/// Source strength `A = φ(x_max) / u(x_max)`, where `u` is the unit-source
/// field of the homogeneous medium and `x_max` the brightest sample of
/// source `id`.
pub fn calibrate_amplitude(measured: &MeasurementSet, k2: f64, id: usize, forward: &Arc<Mesh>) -> Result<f64> {
    let t = measured.trace(id)?;
    if t.intensity.iter().all(|&v| v == 0.0) {
        return Err(Error::Domain(format!("trace {id} is identically zero")));
    }
    let (hi, _) = t.extremes();
    let u = homogeneous_solution(forward, &t.source, k2)?.eval(t.points[hi])?;
    let a = t.intensity[hi] / u;
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Positivity { what: "amplitude", value: a, x: t.points[hi][0], z: t.points[hi][1] });
    }
    Ok(a)
}

/// Bright-to-dim ratio of the homogeneous unit-source field.
fn computed_ratio(forward: &Arc<Mesh>, src: &SourcePoint, k2: f64, bright: Point, dim: Point) -> Result<f64> {
    let sol = homogeneous_solution(forward, src, k2)?;
    Ok(sol.eval(bright)? / sol.eval(dim)?)
}

/// Finds `k²` in `[lo, hi]` whose homogeneous bright-to-dim ratio for
/// source `id` equals the measured one, then the matching amplitude.
pub fn calibrate_k2(
    measured: &MeasurementSet,
    interval: (f64, f64),
    id: usize,
    forward: &Arc<Mesh>,
) -> Result<CalibrationResult> {
    let (mut lo, mut hi) = interval;
    if !(lo > 0.0 && hi > lo) || !hi.is_finite() {
        return Err(Error::Domain(format!("invalid k2 search interval [{lo}, {hi}]")));
    }
    let t = measured.trace(id)?;
    let (imax, imin) = t.extremes();
    let (x_max, x_min) = (t.points[imax], t.points[imin]);
    let target = (t.intensity[imax] / t.intensity[imin]).ln();
    let f = |k2: f64| -> Result<f64> { Ok(computed_ratio(forward, &t.source, k2, x_max, x_min)?.ln() - target) };

    let mut f_lo = f(lo)?;
    let f_hi = f(hi)?;
    if f_lo * f_hi > 0.0 || !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(Error::Bracket { lo, hi, f_lo, f_hi });
    }
    for _ in 0..MAX_BISECTIONS {
        if (hi - lo) <= BISECTION_RTOL * 0.5 * (hi + lo) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid)?;
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let k2 = 0.5 * (lo + hi);
    let residual = f(k2)?;
    let amplitude = calibrate_amplitude(measured, k2, id, forward)?;
    Ok(CalibrationResult { amplitude, k2, residual, x_max, x_min })
}

/// Source position helper for traces read from external files.
pub fn source_of(measured: &MeasurementSet, id: usize) -> Result<SourcePoint> {
    Ok(measured.trace(id)?.source)
}
