//! P1 Galerkin assembly for `Δv - c v - b·∇v = f` with Dirichlet data,
//! Krylov solvers for the resulting sparse systems, and the weak-form
//! coefficient recovery `-∫∇u·∇η = ∫ a u η`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{edge_key, Mesh, ScalarField, Units};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square matrix from `(row, col, value)` triplets; duplicates add.
    pub fn from_triplets(n: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trips.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last = (usize::MAX, usize::MAX);
        for (r, c, v) in trips {
            if (r, c) == last {
                *vals.last_mut().expect("entry exists") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = (r, c);
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn row_ptr_is_monotone(&self) -> bool {
        self.row_ptr.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Linear system over the unconstrained nodes of a mesh.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub symmetric: bool,
    /// Mesh node index of each unknown.
    pub free: Vec<usize>,
    /// Full nodal vector holding the Dirichlet values (zero at free nodes).
    pub fixed: Vec<f64>,
}

impl SparseSystem {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Nodal vector from a solution over the free nodes.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.fixed.clone();
        for (k, &node) in self.free.iter().enumerate() {
            out[node] = x[k];
        }
        out
    }

    /// Restriction of a nodal vector to the free nodes.
    pub fn restrict(&self, nodal: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| nodal[i]).collect()
    }
}

/// Dirichlet constraints as a nodal mask with values.
#[derive(Debug, Clone)]
pub struct Dirichlet {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl Dirichlet {
    /// Constrains every tagged boundary node to `g(node)`.
    pub fn boundary(mesh: &Mesh, g: impl Fn(usize) -> f64) -> Self {
        let n = mesh.node_count();
        let mut mask = vec![false; n];
        let mut values = vec![0.0; n];
        for i in 0..n {
            if mesh.is_boundary(i) {
                mask[i] = true;
                values[i] = g(i);
            }
        }
        Self { mask, values }
    }

    pub fn homogeneous(mesh: &Mesh) -> Self {
        Self::boundary(mesh, |_| 0.0)
    }
}

/// Right-hand side specification.
#[derive(Debug, Clone, Default)]
pub enum Forcing<'a> {
    #[default]
    None,
    /// Nodal `f`, integrated exactly as a P1 function.
    Nodal(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct EllipticProblem<'a> {
    pub mesh: &'a Mesh,
    /// Nodal reaction coefficient `c`.
    pub reaction: Option<&'a [f64]>,
    /// Per-triangle convection vector `b`.
    pub convection: Option<&'a [[f64; 2]]>,
    pub forcing: Forcing<'a>,
    /// Extra load `ℓ_i` added to the right-hand side of row `i`.
    pub load: Option<&'a [f64]>,
    pub dirichlet: Dirichlet,
    /// Row-sum (lumped) reaction instead of the consistent triple product.
    pub lumped: bool,
    /// Discrete upwinding: symmetric artificial diffusion removes every
    /// positive off-diagonal entry, giving an M-matrix.
    pub upwind: bool,
}

impl<'a> EllipticProblem<'a> {
    pub fn new(mesh: &'a Mesh, dirichlet: Dirichlet) -> Self {
        Self { mesh, reaction: None, convection: None, forcing: Forcing::None, load: None, dirichlet, lumped: false, upwind: false }
    }

    pub fn reaction(mut self, c: &'a [f64]) -> Self {
        self.reaction = Some(c);
        self
    }

    pub fn convection(mut self, b: &'a [[f64; 2]]) -> Self {
        self.convection = Some(b);
        self
    }

    pub fn forcing(mut self, f: &'a [f64]) -> Self {
        self.forcing = Forcing::Nodal(f);
        self
    }

    pub fn upwind(mut self) -> Self {
        self.upwind = true;
        self
    }

    pub fn lumped(mut self) -> Self {
        self.lumped = true;
        self
    }

    pub fn load(mut self, l: &'a [f64]) -> Self {
        self.load = Some(l);
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.mesh.node_count();
        let nt = self.mesh.triangles().len();
        let check = |name: &'static str, v: &[f64], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::Inconsistent(format!("{name} has length {} but {len} was expected", v.len())));
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { name, index });
            }
            Ok(())
        };
        if let Some(c) = self.reaction {
            check("reaction", c, n)?;
        }
        if let Some(b) = self.convection {
            if b.len() != nt {
                return Err(Error::Inconsistent(format!("convection has {} entries for {nt} triangles", b.len())));
            }
            if let Some(index) = b.iter().position(|v| !v[0].is_finite() || !v[1].is_finite()) {
                return Err(Error::NonFinite { name: "convection", index });
            }
        }
        if let Forcing::Nodal(f) = self.forcing {
            check("forcing", f, n)?;
        }
        if let Some(l) = self.load {
            check("load", l, n)?;
        }
        if self.dirichlet.mask.len() != n || self.dirichlet.values.len() != n {
            return Err(Error::Inconsistent("Dirichlet data does not match the mesh".into()));
        }
        check("dirichlet", &self.dirichlet.values, n)?;
        if let Some(node) = (0..n).find(|&i| self.mesh.is_boundary(i) && !self.dirichlet.mask[i]) {
            return Err(Error::Inconsistent(format!("boundary node {node} has no Dirichlet value")));
        }
        Ok(())
    }
}

/// `∫_T λ0^e0 λ1^e1 λ2^e2 dx = 2|T| e0! e1! e2! / (e0+e1+e2+2)!`.
pub(crate) fn monomial_integral(area: f64, e: [u32; 3]) -> f64 {
    let fact = |k: u32| (1..=k).map(|v| v as f64).product::<f64>();
    2.0 * area * fact(e[0]) * fact(e[1]) * fact(e[2]) / fact(e[0] + e[1] + e[2] + 2)
}

/// `∫_T λi λj λk dx` for local indices.
pub(crate) fn triple(area: f64, i: usize, j: usize, k: usize) -> f64 {
    let mut e = [0u32; 3];
    e[i] += 1;
    e[j] += 1;
    e[k] += 1;
    monomial_integral(area, e)
}

/// Consistent P1 mass element `∫_T λi λj`.
pub(crate) fn mass(area: f64, i: usize, j: usize) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// Galerkin matrix of `-Δ + c + b·∇` over all nodes, before constraints.
pub(crate) fn operator_triplets(
    mesh: &Mesh,
    reaction: Option<&[f64]>,
    convection: Option<&[[f64; 2]]>,
    lumped: bool,
) -> Vec<(usize, usize, f64)> {
    let mut trips = Vec::with_capacity(9 * mesh.triangles().len());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        let g = mesh.gradients(t);
        for i in 0..3 {
            for j in 0..3 {
                let mut v = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                if let Some(c) = reaction {
                    if !lumped {
                        for k in 0..3 {
                            v += c[tri[k]] * triple(area, i, j, k);
                        }
                    } else if i == j {
                        v += c[tri[i]] * area / 3.0;
                    }
                }
                if let Some(b) = convection {
                    v += (b[t][0] * g[j][0] + b[t][1] * g[j][1]) * area / 3.0;
                }
                trips.push((tri[i], tri[j], v));
            }
        }
    }
    trips
}

/// P1 load vector `∫ f φ_i` for nodal `f`.
pub(crate) fn mass_apply(mesh: &Mesh, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.node_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        for i in 0..3 {
            for j in 0..3 {
                out[tri[i]] += mass(area, i, j) * f[tri[j]];
            }
        }
    }
    out
}

/// Adds `d_ij = max(0, a_ij, a_ji)` of artificial diffusion on every pair
/// of coupled nodes. Row sums are unchanged, so constants stay in the
/// kernel of the diffusive and convective parts.
pub(crate) fn discrete_upwind(a: &CsrMatrix) -> CsrMatrix {
    let n = a.dim();
    let mut trips = Vec::with_capacity(a.nnz() + 2 * n);
    for i in 0..n {
        for (j, v) in a.row(i) {
            trips.push((i, j, v));
            if j > i {
                let d = v.max(a.get(j, i)).max(0.0);
                if d > 0.0 {
                    trips.push((i, j, -d));
                    trips.push((j, i, -d));
                    trips.push((i, i, d));
                    trips.push((j, j, d));
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, trips)
}

/// Assembles the Galerkin system with Dirichlet rows eliminated.
pub fn assemble(problem: &EllipticProblem<'_>) -> Result<SparseSystem> {
    problem.validate()?;
    let mesh = problem.mesh;
    let n = mesh.node_count();
    let mut full = CsrMatrix::from_triplets(n, operator_triplets(mesh, problem.reaction, problem.convection, problem.lumped));
    if problem.upwind {
        full = discrete_upwind(&full);
    }

    // Weak form of Δv - cv - b·∇v = f tested with -φ_i.
    let mut rhs_full = match problem.forcing {
        Forcing::Nodal(f) => mass_apply(mesh, f).into_iter().map(|v| -v).collect(),
        Forcing::None => vec![0.0; n],
    };
    if let Some(l) = problem.load {
        for (r, v) in rhs_full.iter_mut().zip(l) {
            *r += v;
        }
    }
    Ok(eliminate(&full, rhs_full, &problem.dirichlet, problem.convection.is_none()))
}

pub(crate) fn eliminate(full: &CsrMatrix, rhs_full: Vec<f64>, bc: &Dirichlet, symmetric: bool) -> SparseSystem {
    let n = full.dim();
    let mut index = vec![usize::MAX; n];
    let mut free = Vec::new();
    for i in 0..n {
        if !bc.mask[i] {
            index[i] = free.len();
            free.push(i);
        }
    }
    let mut fixed = vec![0.0; n];
    for i in 0..n {
        if bc.mask[i] {
            fixed[i] = bc.values[i];
        }
    }
    let mut trips = Vec::with_capacity(full.nnz());
    let mut rhs = Vec::with_capacity(free.len());
    for (k, &i) in free.iter().enumerate() {
        let mut b = rhs_full[i];
        for (j, v) in full.row(i) {
            if bc.mask[j] {
                b -= v * fixed[j];
            } else {
                trips.push((k, index[j], v));
            }
        }
        rhs.push(b);
    }
    SparseSystem {
        matrix: CsrMatrix::from_triplets(free.len(), trips),
        rhs,
        symmetric,
        free,
        fixed,
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol <= 1e-4) {
        return Err(Error::Domain(format!("solver tolerance must lie in (0, 1e-4], got {tol}")));
    }
    Ok(())
}

/// Solves the system to relative residual `tol`: Jacobi-preconditioned CG
/// when symmetric, BiCGStab otherwise.
pub fn solve(system: &SparseSystem, tol: f64) -> Result<Vec<f64>> {
    solve_report(system, tol).map(|(x, _)| x)
}

pub fn solve_report(system: &SparseSystem, tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    check_tol(tol)?;
    let a = &system.matrix;
    if system.symmetric {
        pcg(a, &system.rhs, tol)
    } else {
        bicgstab(a, &system.rhs, tol)
    }
}

/// Solves `A x = b` through the diagonally similar system
/// `(G⁻¹ A G) y = G⁻¹ b`, `x = G y`, with `G = diag(scale)` on the free
/// nodes. The residual is then measured relative to the local magnitude
/// `scale`, which keeps fields spanning many decades accurate everywhere.
pub fn solve_scaled(system: &SparseSystem, tol: f64, scale: &[f64]) -> Result<Vec<f64>> {
    check_tol(tol)?;
    let g: Vec<f64> = system.free.iter().map(|&i| scale[i]).collect();
    if let Some(index) = g.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::NonFinite { name: "solver scale", index });
    }
    let a = &system.matrix;
    let n = a.dim();
    let mut trips = Vec::with_capacity(a.nnz());
    for i in 0..n {
        for (j, v) in a.row(i) {
            trips.push((i, j, v * g[j] / g[i]));
        }
    }
    let scaled = CsrMatrix::from_triplets(n, trips);
    let rhs: Vec<f64> = system.rhs.iter().zip(&g).map(|(b, gi)| b / gi).collect();
    let (y, _) = bicgstab(&scaled, &rhs, tol)?;
    Ok(y.iter().zip(&g).map(|(yi, gi)| yi * gi).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn jacobi(a: &CsrMatrix) -> Result<Vec<f64>> {
    a.diagonal()
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d != 0.0 && d.is_finite() {
                Ok(1.0 / d)
            } else {
                Err(Error::Singular(format!("zero or non-finite diagonal in row {i}")))
            }
        })
        .collect()
}

pub(crate) fn pcg(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if n == 0 || bnorm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, residual: 0.0 }));
    }
    let dinv = jacobi(a)?;
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let cap = 10 * n.max(10);
    for it in 1..=cap {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap.abs() > 0.0) || !pap.is_finite() {
            return Err(Error::Breakdown { iterations: it, residual: norm(&r) / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / bnorm;
        if res <= tol {
            return Ok((x, SolveReport { iterations: it, residual: res }));
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence { iterations: cap, residual: norm(&r) / bnorm })
}

pub(crate) fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if n == 0 || bnorm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, residual: 0.0 }));
    }
    let dinv = jacobi(a)?;
    let cap = 10 * n.max(10);
    let mut used = 0;
    let mut res = 1.0;
    // Restart from the true residual whenever the recurrence drifts from it.
    while used < cap {
        let mut r = vec![0.0; n];
        a.matvec(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        res = norm(&r) / bnorm;
        if res <= tol {
            return Ok((x, SolveReport { iterations: used, residual: res }));
        }
        let before = used;
        bicgstab_sweep(a, &dinv, &mut x, r, bnorm, tol, cap, &mut used)?;
        if used == before {
            break;
        }
    }
    Err(Error::NonConvergence { iterations: used, residual: res })
}

#[allow(clippy::too_many_arguments)]
fn bicgstab_sweep(
    a: &CsrMatrix,
    dinv: &[f64],
    x: &mut [f64],
    mut r: Vec<f64>,
    bnorm: f64,
    tol: f64,
    cap: usize,
    used: &mut usize,
) -> Result<()> {
    let n = a.dim();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut t = vec![0.0; n];
    while *used < cap {
        *used += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() || omega == 0.0 {
            return Err(Error::Breakdown { iterations: *used, residual: norm(&r) / bnorm });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * dinv[i];
        }
        a.matvec(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            return Err(Error::Breakdown { iterations: *used, residual: norm(&r) / bnorm });
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(());
        }
        for i in 0..n {
            zs[i] = s[i] * dinv[i];
        }
        a.matvec(&zs, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zs[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) / bnorm <= tol {
            return Ok(());
        }
    }
    Ok(())
}

/// Test space used for the weak-form recovery of `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSpace {
    /// P1 hat functions at interior nodes; boundary values of `a` are held at
    /// `k²`. The resulting square system is the exact discrete adjoint of the
    /// forward assembly.
    Linear,
    /// P2 Lagrange functions at interior nodes and interior edges, solved in
    /// regularized least squares.
    Quadratic,
}

impl std::fmt::Display for TestSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestSpace::Linear => "linear",
            TestSpace::Quadratic => "quadratic",
        })
    }
}

impl std::str::FromStr for TestSpace {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(TestSpace::Linear),
            "quadratic" => Ok(TestSpace::Quadratic),
            _ => Err(format!("unknown test space `{s}` (expected linear or quadratic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    pub test_space: TestSpace,
    /// Tikhonov weight relative to the mean diagonal of the normal matrix.
    pub regularization: f64,
    pub tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { test_space: TestSpace::Linear, regularization: 1e-8, tol: 1e-12 }
    }
}

/// Internal tolerance cap for recovery solves, which are well conditioned.
fn inner_tol(tol: f64) -> f64 {
    tol.min(1e-4)
}

/// Recovers `a` from `u` via `-∫∇u·∇η = ∫ a u η` and clamps it from below
/// at `k2`.
pub fn recover_coefficient(u: &ScalarField, k2: f64, opts: &RecoveryOptions) -> Result<ScalarField> {
    let mesh = u.mesh().clone();
    let vals = u.values();
    for (i, &v) in vals.iter().enumerate() {
        if !(v > 0.0) {
            let p = mesh.nodes()[i];
            return Err(Error::Positivity { what: "u", value: v, x: p[0], z: p[1] });
        }
    }
    let raw = match opts.test_space {
        TestSpace::Linear => recover_linear(&mesh, vals, k2, opts)?,
        TestSpace::Quadratic => recover_quadratic(&mesh, vals, opts)?,
    };
    ScalarField::new(mesh, raw.into_iter().map(|a| a.max(k2)).collect(), Units::Coefficient)
}

fn recover_linear(mesh: &Arc<Mesh>, u: &[f64], k2: f64, opts: &RecoveryOptions) -> Result<Vec<f64>> {
    let n = mesh.node_count();
    let mut trips = Vec::with_capacity(9 * mesh.triangles().len());
    let mut rhs = vec![0.0; n];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        let g = mesh.gradients(t);
        let gu = mesh.field_gradient(t, u);
        for i in 0..3 {
            rhs[tri[i]] -= area * (gu[0] * g[i][0] + gu[1] * g[i][1]);
            for j in 0..3 {
                let mut w = 0.0;
                for k in 0..3 {
                    w += u[tri[k]] * triple(area, i, j, k);
                }
                trips.push((tri[i], tri[j], w));
            }
        }
    }
    let full = CsrMatrix::from_triplets(n, trips);
    let bc = Dirichlet::boundary(mesh, |_| k2);
    let system = eliminate(&full, rhs, &bc, true);
    let (x, _) = pcg(&system.matrix, &system.rhs, inner_tol(opts.tol))?;
    Ok(system.expand(&x))
}

/// Degree-5 seven-point rule on the reference triangle: barycentric points
/// and weights summing to one.
const QUAD7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_769_82;
    const B1: f64 = 0.470_142_064_105_115_1;
    const A2: f64 = 0.797_426_985_353_087_3;
    const B2: f64 = 0.101_286_507_323_456_3;
    const W1: f64 = 0.132_394_152_788_506_2;
    const W2: f64 = 0.125_939_180_544_827_2;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// Local P2 edge ordering: node 3 on edge (0,1), 4 on (1,2), 5 on (2,0).
const P2_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

fn p2_gradients(l: [f64; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let mut out = [[0.0; 2]; 6];
    for v in 0..3 {
        let f = 4.0 * l[v] - 1.0;
        out[v] = [f * g[v][0], f * g[v][1]];
    }
    for (e, &(a, b)) in P2_EDGES.iter().enumerate() {
        out[3 + e] = [4.0 * (l[a] * g[b][0] + l[b] * g[a][0]), 4.0 * (l[a] * g[b][1] + l[b] * g[a][1])];
    }
    out
}

/// Least-squares recovery with P2 test functions. The P1 field `u` is lifted
/// to P2 with log-linear midpoint values `sqrt(u_a u_b)`, which reproduces
/// exponential profiles exactly along edges; without the lift the edge tests
/// see only one-sided gradient jumps of a P1 field and the recovery is biased.
fn recover_quadratic(mesh: &Arc<Mesh>, u: &[f64], opts: &RecoveryOptions) -> Result<Vec<f64>> {
    use std::collections::HashMap;
    let n = mesh.node_count();
    let mut vertex_row = vec![usize::MAX; n];
    let mut rows = 0usize;
    for (i, slot) in vertex_row.iter_mut().enumerate() {
        if !mesh.is_boundary(i) {
            *slot = rows;
            rows += 1;
        }
    }
    let mut edge_tris: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in mesh.triangles() {
        for &(a, b) in &P2_EDGES {
            *edge_tris.entry(edge_key(tri[a], tri[b])).or_default() += 1;
        }
    }
    let mut edges: Vec<_> = edge_tris.iter().filter(|(_, &c)| c == 2).map(|(&e, _)| e).collect();
    edges.sort_unstable();
    let mut edge_row = HashMap::new();
    for e in edges {
        edge_row.insert(e, rows);
        rows += 1;
    }
    // Midpoint rule, exact for the quadratic gradient products.
    let mids: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
    let mut r = vec![0.0; rows];
    let mut row_scale = vec![0.0; rows];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        let g = mesh.gradients(t);
        let mut uloc = [0.0; 6];
        for v in 0..3 {
            uloc[v] = u[tri[v]];
        }
        for (e, &(a, b)) in P2_EDGES.iter().enumerate() {
            uloc[3 + e] = (u[tri[a]] * u[tri[b]]).sqrt();
        }
        let mut rows_here: Vec<(usize, usize)> = Vec::with_capacity(6);
        for v in 0..3 {
            if vertex_row[tri[v]] != usize::MAX {
                rows_here.push((vertex_row[tri[v]], v));
            }
        }
        for (e, &(a, b)) in P2_EDGES.iter().enumerate() {
            if let Some(&row) = edge_row.get(&edge_key(tri[a], tri[b])) {
                rows_here.push((row, 3 + e));
            }
        }
        if rows_here.is_empty() {
            continue;
        }
        // -∫ ∇u·∇η for each local test function.
        let mut stiff = [0.0; 6];
        for m in &mids {
            let gr = p2_gradients(*m, &g);
            let mut gu = [0.0; 2];
            for b in 0..6 {
                gu[0] += uloc[b] * gr[b][0];
                gu[1] += uloc[b] * gr[b][1];
            }
            for a in 0..6 {
                stiff[a] += area / 3.0 * (gu[0] * gr[a][0] + gu[1] * gr[a][1]);
            }
        }
        // ∫ λ_j u η for each local test function and vertex j.
        let mut massl = [[0.0; 3]; 6];
        for (l, w) in QUAD7.iter() {
            let nv = p2_values(*l);
            let uq: f64 = (0..6).map(|b| uloc[b] * nv[b]).sum();
            for a in 0..6 {
                for j in 0..3 {
                    massl[a][j] += w * area * l[j] * uq * nv[a];
                }
            }
        }
        let umean = (uloc[0] + uloc[1] + uloc[2]) / 3.0;
        for &(row, a) in &rows_here {
            r[row] -= stiff[a];
            row_scale[row] += umean * area;
            for j in 0..3 {
                by_row[row].push((tri[j], massl[a][j]));
            }
        }
    }
    let mut normal = Vec::new();
    let mut rhs = vec![0.0; n];
    for (row, entries) in by_row.iter_mut().enumerate() {
        entries.sort_unstable_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for &(c, v) in entries.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        let s = 1.0 / row_scale[row];
        for &(ci, vi) in &merged {
            rhs[ci] += vi * s * r[row] * s;
            for &(cj, vj) in &merged {
                normal.push((ci, cj, vi * vj * s * s));
            }
        }
    }
    let mut mat = CsrMatrix::from_triplets(n, normal);
    let diag = mat.diagonal();
    let mean = diag.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(Error::Singular("normal matrix has no positive diagonal".into()));
    }
    let lambda = opts.regularization * mean;
    for i in 0..n {
        let span = mat.row_ptr[i]..mat.row_ptr[i + 1];
        let k = mat.cols[span.clone()]
            .binary_search(&i)
            .map_err(|_| Error::Singular(format!("node {i} is not tested")))?;
        mat.vals[span.start + k] += lambda;
    }
    let (x, _) = pcg(&mat, &rhs, inner_tol(opts.tol)).map_err(|e| match e {
        Error::Breakdown { .. } | Error::NonConvergence { .. } => Error::Singular(e.to_string()),
        other => other,
    })?;
    Ok(x)
}

/// Discrete L2 norm of nodal values.
pub fn discrete_l2(values: &[f64]) -> f64 {
    norm(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, structured_square, DomainSpec};
    use std::f64::consts::PI;

    fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.dim();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).collect()).collect();
        let mut x = b.to_vec();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, p);
            x.swap(c, p);
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
                x[r] -= f * x[c];
            }
        }
        for c in (0..n).rev() {
            for k in c + 1..n {
                x[c] -= m[c][k] * x[k];
            }
            x[c] /= m[c][c];
        }
        x
    }

    #[test]
    fn triple_products() {
        let a = 0.3;
        assert!((triple(a, 0, 0, 0) - a / 10.0).abs() < 1e-15);
        assert!((triple(a, 0, 0, 1) - a / 30.0).abs() < 1e-15);
        assert!((triple(a, 0, 1, 2) - a / 60.0).abs() < 1e-15);
    }

    #[test]
    fn identity_solve() {
        let sys = SparseSystem {
            matrix: CsrMatrix::identity(5),
            rhs: vec![1.0, -2.0, 3.0, 0.5, 4.0],
            symmetric: true,
            free: (0..5).collect(),
            fixed: vec![0.0; 5],
        };
        let x = solve(&sys, 1e-10).unwrap();
        for (a, b) in x.iter().zip(&sys.rhs) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(solve(&sys, 1e-3).is_err());
    }

    #[test]
    fn patch_test_affine() {
        let mesh = build_mesh(DomainSpec::square(5.83), 0.5).unwrap();
        let g = |i: usize| {
            let p = mesh.nodes()[i];
            3.0 * p[0] - 2.0 * p[1] + 1.0
        };
        let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, g));
        let sys = assemble(&prob).unwrap();
        assert!(sys.symmetric);
        let x = sys.expand(&solve(&sys, 1e-12).unwrap());
        for (i, v) in x.iter().enumerate() {
            assert!((v - g(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_matches_dense_lu() {
        let mesh = structured_square([0.0, 0.0], 1.0, 5).unwrap();
        let f = vec![1.0; mesh.node_count()];
        let c = vec![0.5; mesh.node_count()];
        let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, |i| mesh.nodes()[i][0])).reaction(&c).forcing(&f);
        let sys = assemble(&prob).unwrap();
        let x = solve(&sys, 1e-12).unwrap();
        let y = dense_solve(&sys.matrix, &sys.rhs);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(sys.matrix.asymmetry() < 1e-14);
        assert!(sys.matrix.row_ptr_is_monotone());
    }

    #[test]
    fn convection_breaks_symmetry_and_bicgstab_solves() {
        let mesh = structured_square([0.0, 0.0], 1.0, 8).unwrap();
        let b = vec![[2.0, -1.0]; mesh.triangles().len()];
        let f = vec![-1.0; mesh.node_count()];
        let prob = EllipticProblem::new(&mesh, Dirichlet::homogeneous(&mesh)).convection(&b).forcing(&f);
        let sys = assemble(&prob).unwrap();
        assert!(!sys.symmetric);
        assert!(sys.matrix.asymmetry() > 1e-6);
        let x = solve(&sys, 1e-10).unwrap();
        let y = dense_solve(&sys.matrix, &sys.rhs);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn manufactured_solution_converges() {
        // Δu - u = f with u = sin(πx/10) sin(πz/10).
        let w = PI / 10.0;
        let exact = |p: [f64; 2]| (w * p[0]).sin() * (w * p[1]).sin();
        let mut errs = Vec::new();
        for n in [10, 20, 40] {
            let mesh = structured_square([0.0, 0.0], 5.83, n).unwrap();
            let c = vec![1.0; mesh.node_count()];
            let f: Vec<f64> = mesh.nodes().iter().map(|&p| -(2.0 * w * w + 1.0) * exact(p)).collect();
            let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, |i| exact(mesh.nodes()[i])))
                .reaction(&c)
                .forcing(&f);
            let sys = assemble(&prob).unwrap();
            let x = sys.expand(&solve(&sys, 1e-12).unwrap());
            let e: Vec<f64> = x.iter().zip(mesh.nodes()).map(|(v, &p)| v - exact(p)).collect();
            let l2 = mass_apply(&mesh, &e).iter().zip(&e).map(|(a, b)| a * b).sum::<f64>().sqrt();
            errs.push(l2);
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn upwinding_gives_m_matrix_and_keeps_constants() {
        let mesh = crate::mesh::structured_square([0.0, 0.0], 1.0, 8).unwrap();
        let b = vec![[30.0, -12.0]; mesh.triangles().len()];
        let c = vec![5.0; mesh.node_count()];
        let plain = CsrMatrix::from_triplets(mesh.node_count(), operator_triplets(&mesh, Some(&c), Some(&b), true));
        assert!((0..plain.dim()).any(|i| plain.row(i).any(|(j, v)| j != i && v > 0.0)));
        let up = discrete_upwind(&plain);
        for i in 0..up.dim() {
            let mut sum_plain = 0.0;
            let mut sum_up = 0.0;
            for (j, v) in up.row(i) {
                assert!(j == i || v <= 1e-15, "positive off-diagonal {v}");
                sum_up += v;
            }
            for (_, v) in plain.row(i) {
                sum_plain += v;
            }
            assert!((sum_up - sum_plain).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_maximum_principle() {
        let mesh = build_mesh(DomainSpec::square(3.0), 0.3).unwrap();
        let c = vec![2.0; mesh.node_count()];
        let f = vec![-0.5; mesh.node_count()];
        let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, |_| 0.1)).reaction(&c).forcing(&f);
        let sys = assemble(&prob).unwrap();
        let x = sys.expand(&solve(&sys, 1e-12).unwrap());
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn scaled_solve_keeps_relative_accuracy() {
        // Decay across the square spans about 25 decades.
        let mesh = structured_square([0.0, 0.0], 5.83, 20).unwrap();
        let k = 5.0f64;
        let exact = |p: [f64; 2]| (-k * (20.0 - p[0])).exp();
        let c = vec![k * k; mesh.node_count()];
        let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, |i| exact(mesh.nodes()[i]))).reaction(&c);
        let sys = assemble(&prob).unwrap();
        let g: Vec<f64> = mesh.nodes().iter().map(|&p| exact(p)).collect();
        let x = solve_scaled(&sys, 1e-10, &g).unwrap();
        let y = dense_solve(&sys.matrix, &sys.rhs);
        for (a, b) in x.iter().zip(&y) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_recovery_inverts_forward_assembly() {
        let mesh = Arc::new(build_mesh(DomainSpec::square(5.83), 0.23).unwrap());
        let k2 = 2.403;
        let a: Vec<f64> = mesh
            .nodes()
            .iter()
            .map(|p| if p[0].hypot(p[1]) < 2.5 { 3.0 * k2 } else { k2 })
            .collect();
        let bc = |i: usize| {
            let p = mesh.nodes()[i];
            (-(k2 as f64).sqrt() * (20.0 - p[0])).exp()
        };
        let prob = EllipticProblem::new(&mesh, Dirichlet::boundary(&mesh, bc)).reaction(&a);
        let sys = assemble(&prob).unwrap();
        let g: Vec<f64> = (0..mesh.node_count()).map(bc).collect();
        let u = sys.expand(&solve_scaled(&sys, 1e-13, &g).unwrap());
        let uf = ScalarField::new(mesh.clone(), u, Units::Intensity).unwrap();
        let rec = recover_coefficient(&uf, k2, &RecoveryOptions::default()).unwrap();
        for (r, t) in rec.values().iter().zip(&a) {
            assert!((r - t).abs() / t < 1e-6, "{r} vs {t}");
        }
        assert!(rec.min() >= k2);
    }

    #[test]
    fn recovery_rejects_nonpositive_u() {
        let mesh = Arc::new(build_mesh(DomainSpec::square(2.0), 0.4).unwrap());
        let mut v = vec![1.0; mesh.node_count()];
        v[7] = 0.0;
        let uf = ScalarField::new(mesh, v, Units::Intensity).unwrap();
        assert!(matches!(recover_coefficient(&uf, 1.0, &RecoveryOptions::default()), Err(Error::Positivity { .. })));
    }

    #[test]
    fn quadratic_recovery_of_constant() {
        // u = exp(kx) solves Δu = k² u exactly.
        let mesh = Arc::new(build_mesh(DomainSpec::square(5.83), 0.23).unwrap());
        let k2: f64 = 2.403;
        let uf = ScalarField::from_fn(mesh, Units::Intensity, |p| (k2.sqrt() * p[0]).exp()).unwrap();
        let opts = RecoveryOptions { test_space: TestSpace::Quadratic, ..Default::default() };
        let rec = recover_coefficient(&uf, 0.5 * k2, &opts).unwrap();
        let interior: Vec<f64> = (0..rec.values().len())
            .filter(|&i| {
                let p = rec.mesh().nodes()[i];
                p[0].abs() < 4.0 && p[1].abs() < 4.0
            })
            .map(|i| rec.values()[i])
            .collect();
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((mean - k2).abs() / k2 < 0.05, "mean {mean}");
    }
}
