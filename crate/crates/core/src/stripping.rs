//! Layer stripping in the source distance `s`.
//!
//! With `w = s⁻² ln u` and `q = ∂_s w`, the unknown `q` is taken piecewise
//! constant on `[s_n, s_{n-1})`. Integrating the equation for `q` over one
//! interval and dividing by the coefficient of `Δq_n` gives
//!
//! ```text
//! Δq_n + A2 V·∇q_n - A1 |∇q_n|² = A3 ΔQ + A4 |V|² - A3 ΔT,
//! Q = h Σ_{j<n} q_j,   V = ∇Q - ∇T,
//! ```
//!
//! which is solved for `n = 1..N` with `q_n = ψ_n` on ∂Ω₁ and the quadratic
//! term dropped. Then `w(s̲) = T - Q_N`, `u = exp(s̲² w)` and `a` follows
//! from the weak-form recovery.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{
    assemble, discrete_upwind, operator_triplets, recover_coefficient, solve, CsrMatrix, Dirichlet, EllipticProblem, RecoveryOptions,
};
use crate::forward::MeasurementSet;
use crate::mesh::{transfer_field, Mesh, ScalarField, Units};
use crate::scenes::{PhantomScene, SourceLayout};
use crate::specfun::fundamental_solution;
use crate::tail::trace_on_boundary;
use crate::Point;

const SOLVE_TOL: f64 = 1e-10;

/// Equally spaced source distances `s̲ = s_N < … < s_0 = s̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SGrid {
    pub s_bar: f64,
    pub s_low: f64,
    pub h: f64,
    pub n: usize,
}

impl SGrid {
    /// Builds the grid and checks the coefficient bounds on every interval.
    pub fn new(s_bar: f64, s_low: f64, n: usize) -> Result<Self> {
        if !(s_bar > 2.0) || !s_bar.is_finite() {
            return Err(Error::Grid(format!("s_bar must exceed 2, got {s_bar}")));
        }
        if !(s_low > 0.0) || !(s_low < s_bar) {
            return Err(Error::Grid(format!("need 0 < s_low < s_bar, got s_low = {s_low}")));
        }
        if n == 0 {
            return Err(Error::Grid("at least one interval is required".into()));
        }
        let grid = Self { s_bar, s_low, h: (s_bar - s_low) / n as f64, n };
        for k in 1..=n {
            let c = strip_coefficients(k, &grid)?;
            c.check_bounds(&grid)?;
        }
        Ok(grid)
    }

    /// Grid whose knots are the line sources of `layout`.
    pub fn from_layout(layout: &SourceLayout) -> Result<Self> {
        layout.validate()?;
        let s_bar = layout.line[0].1.s;
        let s_low = layout.line[layout.line.len() - 1].1.s;
        Self::new(s_bar, s_low, layout.line.len() - 1)
    }

    /// `s_0, …, s_N`, decreasing.
    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n).map(|i| if i == self.n { self.s_low } else { self.s_bar - i as f64 * self.h }).collect()
    }
}

/// Interval coefficients and the primitive integrals behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripCoefficients {
    pub n: usize,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub i0: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
    pub i5: f64,
    pub l: f64,
}

impl StripCoefficients {
    pub fn check_bounds(&self, grid: &SGrid) -> Result<()> {
        let cap = 8.0 * grid.s_bar * grid.s_bar;
        for (name, v) in [("A2", self.a2), ("A3", self.a3), ("A4", self.a4)] {
            if v.abs() > cap {
                return Err(Error::Grid(format!("|{name},{}| = {:.4e} exceeds 8 s_bar^2 = {cap:.4e}", self.n, v.abs())));
            }
        }
        let cap1 = 2.0 * grid.s_bar * grid.s_bar * grid.h;
        if self.a1.abs() > cap1 {
            return Err(Error::Grid(format!("|A1,{}| = {:.4e} exceeds 2 s_bar^2 h = {cap1:.4e}", self.n, self.a1.abs())));
        }
        Ok(())
    }
}

/// Closed-form coefficients on `[s_n, s_{n-1}]`.
pub fn strip_coefficients(n: usize, grid: &SGrid) -> Result<StripCoefficients> {
    if n == 0 || n > grid.n {
        return Err(Error::Grid(format!("interval index {n} outside 1..={}", grid.n)));
    }
    let knots = grid.knots();
    let (a, b) = (knots[n], knots[n - 1]);
    let h = b - a;
    let l = (b / a).ln();
    let i0 = 3.0 * h - 2.0 * b * l;
    if !(i0 > 0.0) {
        return Err(Error::Grid(format!("I0 = {i0:.4e} is not positive on [{a}, {b}]")));
    }
    let (a2_, b2) = (a * a, b * b);
    let (a3_, b3) = (a2_ * a, b2 * b);
    let (a4_, b4) = (a3_ * a, b3 * b);
    let i2 = (b3 - a3_) / 3.0;
    let i3 = b * (b3 - a3_) / 3.0 - (b4 - a4_) / 4.0;
    let i4 = b2 * (b2 - a2_) / 2.0 - 2.0 * b * (b3 - a3_) / 3.0 + (b4 - a4_) / 4.0;
    let i5 = b * (b2 - a2_) / 2.0 - (b3 - a3_) / 3.0;
    Ok(StripCoefficients {
        n,
        a1: (2.0 * i3 - 4.0 * i4) / i0,
        a2: (8.0 * i5 - 2.0 * i2) / i0,
        a3: 2.0 * l / i0,
        a4: -2.0 * (b2 - a2_) / i0,
        i0,
        i2,
        i3,
        i4,
        i5,
        l,
    })
}

/// `ln φ̄` of the line sources on ∂Ω₁, ordered by decreasing `s`.
///
/// Values are nodal vectors on Ω₁ that are meaningful on the boundary only.
#[derive(Debug, Clone)]
pub struct LineData {
    pub s: Vec<f64>,
    /// Unit vector from the origin towards the line sources.
    pub direction: Point,
    pub log_phi: Vec<Vec<f64>>,
}

impl LineData {
    pub fn from_measurements(smoothed: &MeasurementSet, layout: &SourceLayout, omega1: &Mesh) -> Result<Self> {
        layout.validate()?;
        let (_, far) = layout.far();
        let direction = [far.position[0] / far.s, far.position[1] / far.s];
        let mut s = Vec::new();
        let mut log_phi = Vec::new();
        for (id, sp) in &layout.line {
            let off = (sp.position[0] - sp.s * direction[0]).hypot(sp.position[1] - sp.s * direction[1]);
            if off > 1e-9 * sp.s {
                return Err(Error::Grid(format!("source {id} is not on the ray through the far source")));
            }
            let phi = trace_on_boundary(smoothed.trace(*id)?, omega1)?;
            let mut lp = vec![0.0; phi.len()];
            for (node, (&p, out)) in phi.iter().zip(lp.iter_mut()).enumerate() {
                if omega1.is_boundary(node) {
                    if !(p > 0.0) {
                        let x = omega1.nodes()[node];
                        return Err(Error::Positivity { what: "smoothed intensity", value: p, x: x[0], z: x[1] });
                    }
                    *out = p.ln();
                }
            }
            s.push(sp.s);
            log_phi.push(lp);
        }
        Ok(Self { s, direction, log_phi })
    }

    /// Data at `substeps` equally spaced positions per interval.
    ///
    /// The residual `ln φ̄ - ln u0` with respect to the homogeneous
    /// free-space field is interpolated by the Lagrange polynomial through
    /// the three nearest knots and `ln u0` is added back, so homogeneous data
    /// are reproduced exactly and the original knots are kept.
    pub fn refine(&self, omega1: &Mesh, k: f64, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::Grid("substeps must be at least 1".into()));
        }
        if substeps == 1 {
            return Ok(self.clone());
        }
        let dir = self.direction;
        let ln_u0 = |x: Point, s: f64| -> Result<f64> { Ok(fundamental_solution(x, [s * dir[0], s * dir[1]], k)?.ln()) };
        let boundary: Vec<usize> = (0..omega1.node_count()).filter(|&i| omega1.is_boundary(i)).collect();
        let mut residual = Vec::with_capacity(self.s.len());
        for (s, lp) in self.s.iter().zip(&self.log_phi) {
            let mut r = vec![0.0; lp.len()];
            for &i in &boundary {
                r[i] = lp[i] - ln_u0(omega1.nodes()[i], *s)?;
            }
            residual.push(r);
        }
        let n = self.s.len();
        let mut s_out = Vec::new();
        let mut out = Vec::new();
        for j in 0..(n - 1) * substeps + 1 {
            let (iv, sub) = (j / substeps, j % substeps);
            if sub == 0 {
                s_out.push(self.s[iv]);
                out.push(self.log_phi[iv].clone());
                continue;
            }
            let t = self.s[iv] + (self.s[iv + 1] - self.s[iv]) * sub as f64 / substeps as f64;
            let lo = if n <= 3 { 0 } else { iv.saturating_sub(usize::from(iv + 2 >= n)).min(n - 3) };
            let idx: Vec<usize> = (lo..(lo + 3).min(n)).collect();
            let weights: Vec<f64> = idx
                .iter()
                .map(|&a| idx.iter().filter(|&&b| b != a).map(|&b| (t - self.s[b]) / (self.s[a] - self.s[b])).product())
                .collect();
            let mut v = vec![0.0; omega1.node_count()];
            for &i in &boundary {
                let r: f64 = idx.iter().zip(&weights).map(|(&a, w)| w * residual[a][i]).sum();
                v[i] = r + ln_u0(omega1.nodes()[i], t)?;
            }
            s_out.push(t);
            out.push(v);
        }
        Ok(Self { s: s_out, direction: dir, log_phi: out })
    }

    /// The grid whose knots are `self.s`.
    pub fn grid(&self) -> Result<SGrid> {
        let n = self.s.len();
        if n < 2 {
            return Err(Error::Grid("at least two source positions are required".into()));
        }
        let grid = SGrid::new(self.s[0], self.s[n - 1], n - 1)?;
        for (a, b) in grid.knots().iter().zip(&self.s) {
            if (a - b).abs() > 1e-9 * b {
                return Err(Error::Grid(format!("source position {b} is not on the equally spaced grid")));
            }
        }
        Ok(grid)
    }
}

/// `ψ_n = [v(s_{n-1}) - v(s_n)] / h` with `v = s⁻² ln φ̄`.
pub fn compute_psi(data: &LineData, grid: &SGrid) -> Result<Vec<Vec<f64>>> {
    let knots = grid.knots();
    if data.s.len() != knots.len() {
        return Err(Error::Grid(format!("{} source positions for {} knots", data.s.len(), knots.len())));
    }
    let v: Vec<Vec<f64>> = data.log_phi.iter().zip(&knots).map(|(lp, s)| lp.iter().map(|x| x / (s * s)).collect()).collect();
    Ok((1..knots.len()).map(|n| v[n - 1].iter().zip(&v[n]).map(|(a, b)| (a - b) / grid.h).collect()).collect())
}

/// `q_1..q_n` computed so far together with the tail.
#[derive(Debug, Clone)]
pub struct StrippingState {
    pub mesh: Arc<Mesh>,
    pub t: ScalarField,
    pub q: Vec<ScalarField>,
    /// `h Σ q_j` over the stored `q_j`.
    pub q_sum: Vec<f64>,
}

impl StrippingState {
    pub fn new(t: ScalarField) -> Self {
        let mesh = t.mesh().clone();
        let n = mesh.node_count();
        Self { mesh, t, q: Vec::new(), q_sum: vec![0.0; n] }
    }

    pub fn push(&mut self, q: ScalarField, h: f64) {
        for (s, v) in self.q_sum.iter_mut().zip(q.values()) {
            *s += h * v;
        }
        self.q.push(q);
    }

    /// `V = ∇Q - ∇T` per triangle.
    pub fn drift(&self) -> Vec<[f64; 2]> {
        (0..self.mesh.triangles().len())
            .map(|t| {
                let gq = self.mesh.field_gradient(t, &self.q_sum);
                let gt = self.mesh.field_gradient(t, self.t.values());
                [gq[0] - gt[0], gq[1] - gt[1]]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripOptions {
    /// Keep `-A1 |∇q_n|²` through one fixed-point pass instead of dropping it.
    pub retain_a1: bool,
}

impl Default for StripOptions {
    fn default() -> Self {
        Self { retain_a1: true }
    }
}

/// Discrete harmonic extension of boundary data into `mesh`.
pub fn harmonic_lift(mesh: &Mesh, boundary: &[f64]) -> Result<Vec<f64>> {
    let system = assemble(&EllipticProblem::new(mesh, Dirichlet::boundary(mesh, |i| boundary[i])))?;
    Ok(system.expand(&solve(&system, SOLVE_TOL)?))
}

/// Part of the right-hand side that does not involve `q_n`, tested with
/// every hat function, plus `extra` integrated against each.
fn strip_load(state: &StrippingState, c: &StripCoefficients, drift: &[[f64; 2]], extra: Option<&[f64]>) -> Vec<f64> {
    let mesh = &state.mesh;
    let mut load = vec![0.0; mesh.node_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        let g = mesh.gradients(t);
        let gq = mesh.field_gradient(t, &state.q_sum);
        let gt = mesh.field_gradient(t, state.t.values());
        let v = drift[t];
        let mut point = -c.a4 * (v[0] * v[0] + v[1] * v[1]);
        if let Some(e) = extra {
            point += e[t];
        }
        for i in 0..3 {
            let dot = |a: [f64; 2]| a[0] * g[i][0] + a[1] * g[i][1];
            load[tri[i]] += area * c.a3 * (dot(gq) - dot(gt)) + point * area / 3.0;
        }
    }
    load
}

/// Solves for `q_n` with the current state, `ψ_n` on the boundary and the
/// quadratic term dropped (or frozen for one pass with `retain_a1`).
///
/// The unknown is `p_n = q_n - Ψ_n` with `Ψ_n` the discrete harmonic
/// extension of `ψ_n`; the operator applied to `Ψ_n` moves to the load.
/// Convection is stabilized by the same discrete upwinding as the forward
/// solver.
pub fn solve_qn(state: &StrippingState, c: &StripCoefficients, psi: &[f64], opts: &StripOptions) -> Result<ScalarField> {
    let mesh = &state.mesh;
    let n = mesh.node_count();
    let lift = harmonic_lift(mesh, psi)?;
    let drift = state.drift();
    let convection: Vec<[f64; 2]> = drift.iter().map(|v| [-c.a2 * v[0], -c.a2 * v[1]]).collect();
    let peclet = convection.iter().map(|b| b[0].hypot(b[1])).fold(0.0, f64::max) * mesh.h() / 2.0;
    log::debug!("q_{}: cell Peclet number {peclet:.3}", c.n);
    let operator = discrete_upwind(&CsrMatrix::from_triplets(n, operator_triplets(mesh, None, Some(&convection), false)));
    let mut k_lift = vec![0.0; n];
    operator.matvec(&lift, &mut k_lift);

    let solve_p = |extra: Option<&[f64]>| -> Result<Vec<f64>> {
        let mut load = strip_load(state, c, &drift, extra);
        for (l, k) in load.iter_mut().zip(&k_lift) {
            *l -= k;
        }
        let problem = EllipticProblem::new(mesh, Dirichlet::homogeneous(mesh)).convection(&convection).upwind().load(&load);
        let system = assemble(&problem)?;
        let p = system.expand(&solve(&system, SOLVE_TOL)?);
        Ok(p.iter().zip(&lift).map(|(a, b)| a + b).collect())
    };
    let mut q = solve_p(None).map_err(|e| e.at("q_n solve"))?;
    if opts.retain_a1 {
        let extra: Vec<f64> = (0..mesh.triangles().len())
            .map(|t| {
                let g = mesh.field_gradient(t, &q);
                -c.a1 * (g[0] * g[0] + g[1] * g[1])
            })
            .collect();
        q = solve_p(Some(&extra)).map_err(|e| e.at("q_n solve"))?;
    }
    ScalarField::new(mesh.clone(), q, Units::Dimensionless)
}

/// Runs the sweep `n = 1..N` and returns the final state.
pub fn strip(t: &ScalarField, psi: &[Vec<f64>], grid: &SGrid, opts: &StripOptions) -> Result<StrippingState> {
    if psi.len() != grid.n {
        return Err(Error::Grid(format!("{} boundary functions for {} intervals", psi.len(), grid.n)));
    }
    let mut state = StrippingState::new(t.clone());
    for (k, p) in psi.iter().enumerate() {
        let c = strip_coefficients(k + 1, grid)?;
        let q = solve_qn(&state, &c, p, opts)?;
        log::debug!("q_{}: range [{:.4e}, {:.4e}]", k + 1, q.min(), q.max());
        state.push(q, grid.h);
    }
    Ok(state)
}

/// `w(x, s̲) = T(x) - h Σ q_j(x)`.
pub fn assemble_w(state: &StrippingState) -> Result<ScalarField> {
    let vals = state.t.values().iter().zip(&state.q_sum).map(|(t, q)| t - q).collect();
    ScalarField::new(state.mesh.clone(), vals, Units::Dimensionless)
}

/// `u = exp(s̲² w)`, recovered `a` on Ω₁ and its restriction to `omega`.
pub fn finalize(
    w: &ScalarField,
    grid: &SGrid,
    k2: f64,
    omega: &Arc<Mesh>,
    recovery: &RecoveryOptions,
) -> Result<(ScalarField, ScalarField)> {
    let s2 = grid.s_low * grid.s_low;
    let worst = w.values().iter().fold(0.0f64, |m, v| m.max((s2 * v).abs()));
    if !(worst < 700.0) {
        return Err(Error::Range(worst));
    }
    let u = w.map(Units::Intensity, |v| (s2 * v).exp())?;
    let a = recover_coefficient(&u, k2, recovery)?;
    let on_omega = transfer_field(&a, omega)?.map(Units::Coefficient, |v| v.max(k2))?;
    Ok((a, on_omega))
}

/// Connected part of the thresholded region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub centroid: Point,
    pub area: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub background_k2: f64,
    pub max_a: f64,
    /// `max a / k²`.
    pub contrast: f64,
    pub true_contrast: Option<f64>,
    pub relative_error: Option<f64>,
    pub threshold: f64,
    pub centroid: Point,
    pub components: Vec<Component>,
    /// For every true inclusion, the distance to the nearest component
    /// centroid.
    pub center_distances: Vec<f64>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "background_k2 = {}", self.background_k2);
        let _ = writeln!(s, "max_a = {}", self.max_a);
        let _ = writeln!(s, "contrast = {}", self.contrast);
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(s, "true_contrast = {}", self.true_contrast.map_or("inf".to_string(), |x| x.to_string()));
        let _ = writeln!(s, "relative_error = {}", opt(self.relative_error));
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "centroid_x = {}", self.centroid[0]);
        let _ = writeln!(s, "centroid_z = {}", self.centroid[1]);
        let _ = writeln!(s, "components = {}", self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            let _ = writeln!(s, "component_{i} = {} {} {} {}", c.centroid[0], c.centroid[1], c.area, c.max);
        }
        for (i, d) in self.center_distances.iter().enumerate() {
            let _ = writeln!(s, "center_distance_{i} = {d}");
        }
        s
    }

    pub const CSV_HEADER: &'static str =
        "contrast,true_contrast,relative_error,centroid_x,centroid_z,components,max_center_distance";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let worst = self.center_distances.iter().copied().fold(f64::NAN, f64::max);
        format!(
            "{},{},{},{},{},{},{}",
            self.contrast,
            self.true_contrast.map_or("inf".to_string(), |x| x.to_string()),
            opt(self.relative_error),
            self.centroid[0],
            self.centroid[1],
            self.components.len(),
            if worst.is_nan() { String::new() } else { worst.to_string() }
        )
    }
}

/// Contrast, localization and component count of a reconstruction.
///
/// The region `{a > (k² + max a) / 2}` is formed from triangles whose mean
/// nodal value exceeds the threshold; components are joined through shared
/// edges.
pub fn metrics(a: &ScalarField, truth: &PhantomScene) -> Result<Report> {
    let k2 = truth.background_k2;
    let mesh = a.mesh();
    let max_a = a.max();
    let contrast = max_a / k2;
    let true_contrast = truth.inclusions.iter().filter_map(|i| i.contrast.target()).fold(None, |m: Option<f64>, c| {
        Some(m.map_or(c, |x| x.max(c)))
    });
    let true_contrast = if truth.inclusions.iter().any(|i| i.contrast.target().is_none()) { None } else { true_contrast };
    let relative_error = true_contrast.map(|c| (contrast - c).abs() / c);
    let threshold = 0.5 * (k2 + max_a);

    let vals = a.values();
    let tris = mesh.triangles();
    let inside: Vec<bool> = tris.iter().map(|t| (vals[t[0]] + vals[t[1]] + vals[t[2]]) / 3.0 > threshold).collect();

    // Union-find over triangles sharing an edge.
    let mut parent: Vec<usize> = (0..tris.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut owner = std::collections::HashMap::new();
    for (t, tri) in tris.iter().enumerate() {
        if !inside[t] {
            continue;
        }
        for e in 0..3 {
            let key = crate::mesh::edge_key(tri[e], tri[(e + 1) % 3]);
            if let Some(&other) = owner.get(&key) {
                let (ra, rb) = (find(&mut parent, t), find(&mut parent, other));
                if ra != rb {
                    parent[ra] = rb;
                }
            } else {
                owner.insert(key, t);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (f64, [f64; 2], f64)> = Default::default();
    let mut total = (0.0, [0.0, 0.0]);
    for (t, tri) in tris.iter().enumerate() {
        if !inside[t] {
            continue;
        }
        let r = find(&mut parent, t);
        let area = mesh.area(t);
        let c = mesh.centroid(t);
        let m = vals[tri[0]].max(vals[tri[1]]).max(vals[tri[2]]);
        let g = groups.entry(r).or_insert((0.0, [0.0, 0.0], f64::NEG_INFINITY));
        g.0 += area;
        g.1[0] += area * c[0];
        g.1[1] += area * c[1];
        g.2 = g.2.max(m);
        total.0 += area;
        total.1[0] += area * c[0];
        total.1[1] += area * c[1];
    }
    let mut components: Vec<Component> = groups
        .into_values()
        .map(|(area, m, max)| Component { centroid: [m[0] / area, m[1] / area], area, max })
        .collect();
    components.sort_by(|a, b| b.area.total_cmp(&a.area));
    let centroid = if total.0 > 0.0 { [total.1[0] / total.0, total.1[1] / total.0] } else { [f64::NAN, f64::NAN] };
    let center_distances = truth
        .inclusions
        .iter()
        .map(|inc| {
            components
                .iter()
                .map(|c| (c.centroid[0] - inc.center[0]).hypot(c.centroid[1] - inc.center[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(Report { background_k2: k2, max_a, contrast, true_contrast, relative_error, threshold, centroid, components, center_distances })
}
