//! Triangulations of the four computational domains and P1 fields on them.
//!
//! Squares are structured `n x n` grids with every cell cut along the
//! `(i, j) -> (i+1, j+1)` diagonal. Disks are built from concentric rings with
//! `6 i` nodes on ring `i`. The square-minus-disk annulus starts from the
//! square grid: nodes within half a grid step of the circle are projected
//! onto it, cells cut by the circle pick the diagonal that keeps the cut
//! clean, and every triangle with a vertex left inside the disk is dropped.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::Point;

/// Fraction of the grid step within which nodes are projected onto the circle
/// before the disk is cut out of the annulus grid.
const SNAP_FRACTION: f64 = 0.5;

/// Geometric tolerance used when locating points, mm.
pub const LOCATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Interior,
    Outer,
    Inner,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundaryTag::Interior => "interior",
            BoundaryTag::Outer => "outer",
            BoundaryTag::Inner => "inner",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainSpec {
    Disk { center: Point, radius: f64 },
    Square { center: Point, half_width: f64 },
    SquareMinusDisk { center: Point, half_width: f64, radius: f64 },
}

impl DomainSpec {
    pub fn disk(radius: f64) -> Self {
        DomainSpec::Disk { center: [0.0, 0.0], radius }
    }

    pub fn square(half_width: f64) -> Self {
        DomainSpec::Square { center: [0.0, 0.0], half_width }
    }

    pub fn annulus(half_width: f64, radius: f64) -> Self {
        DomainSpec::SquareMinusDisk { center: [0.0, 0.0], half_width, radius }
    }

    pub fn center(&self) -> Point {
        match *self {
            DomainSpec::Disk { center, .. }
            | DomainSpec::Square { center, .. }
            | DomainSpec::SquareMinusDisk { center, .. } => center,
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            DomainSpec::Disk { radius, .. } => 2.0 * radius,
            DomainSpec::Square { half_width, .. } | DomainSpec::SquareMinusDisk { half_width, .. } => {
                2.0 * half_width
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let c = self.center();
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(Error::Mesh("domain center must be finite".into()));
        }
        match *self {
            DomainSpec::Disk { radius, .. } if !ok(radius) => {
                Err(Error::Mesh(format!("disk radius must be positive, got {radius}")))
            }
            DomainSpec::Square { half_width, .. } if !ok(half_width) => {
                Err(Error::Mesh(format!("square half-width must be positive, got {half_width}")))
            }
            DomainSpec::SquareMinusDisk { half_width, radius, .. } => {
                if !ok(half_width) || !ok(radius) {
                    Err(Error::Mesh("annulus radius and half-width must be positive".into()))
                } else if radius >= half_width {
                    Err(Error::Mesh(format!(
                        "disk of radius {radius} is not strictly inside the square of half-width {half_width}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Point membership in the closed domain, with tolerance `tol`.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let c = self.center();
        let (dx, dz) = (p[0] - c[0], p[1] - c[1]);
        let in_square = |hw: f64| dx.abs() <= hw + tol && dz.abs() <= hw + tol;
        match *self {
            DomainSpec::Disk { radius, .. } => dx.hypot(dz) <= radius + tol,
            DomainSpec::Square { half_width, .. } => in_square(half_width),
            DomainSpec::SquareMinusDisk { half_width, radius, .. } => {
                in_square(half_width) && dx.hypot(dz) >= radius - tol
            }
        }
    }
}

/// Conforming P1 triangulation with per-node boundary tags.
#[derive(Debug, Clone)]
pub struct Mesh {
    spec: DomainSpec,
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    tags: Vec<BoundaryTag>,
    h: f64,
    locator: Locator,
}

impl Mesh {
    /// Builds a mesh from raw arrays, checking the structural invariants.
    pub fn from_parts(
        spec: DomainSpec,
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        tags: Vec<BoundaryTag>,
        h: f64,
    ) -> Result<Self> {
        if tags.len() != nodes.len() {
            return Err(Error::Mesh("tag count differs from node count".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nodes.len()) {
                return Err(Error::Mesh(format!("triangle {t} references a missing node")));
            }
            let area = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::Mesh(format!("triangle {t} has non-positive area {area:.3e}")));
            }
        }
        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &triangles {
            for (a, b) in tri_edges(tri) {
                *edge_count.entry(edge_key(a, b)).or_default() += 1;
            }
        }
        if let Some((e, _)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::Mesh(format!("edge {e:?} is shared by more than two triangles")));
        }
        let locator = Locator::new(&nodes, &triangles, h);
        Ok(Self { spec, nodes, triangles, tags, h, locator })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn tags(&self) -> &[BoundaryTag] {
        &self.tags
    }

    pub fn tag(&self, node: usize) -> BoundaryTag {
        self.tags[node]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.tags[node] != BoundaryTag::Interior
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Gradients of the three barycentric coordinates on triangle `t`.
    pub fn gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let two_area = 2.0 * signed_area(pa, pb, pc);
        [
            [(pb[1] - pc[1]) / two_area, (pc[0] - pb[0]) / two_area],
            [(pc[1] - pa[1]) / two_area, (pa[0] - pc[0]) / two_area],
            [(pa[1] - pb[1]) / two_area, (pb[0] - pa[0]) / two_area],
        ]
    }

    /// Constant gradient of the P1 interpolant of `values` on triangle `t`.
    pub fn field_gradient(&self, t: usize, values: &[f64]) -> [f64; 2] {
        let g = self.gradients(t);
        let tri = self.triangles[t];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += values[tri[k]] * g[k][0];
            out[1] += values[tri[k]] * g[k][1];
        }
        out
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.triangles[t];
        [
            (self.nodes[a][0] + self.nodes[b][0] + self.nodes[c][0]) / 3.0,
            (self.nodes[a][1] + self.nodes[b][1] + self.nodes[c][1]) / 3.0,
        ]
    }

    pub fn max_edge(&self) -> f64 {
        let mut m: f64 = 0.0;
        for tri in &self.triangles {
            for (a, b) in tri_edges(tri) {
                m = m.max(dist(self.nodes[a], self.nodes[b]));
            }
        }
        m
    }

    /// Edges in sorted `(lo, hi)` form, each listed once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set: HashMap<(usize, usize), ()> = HashMap::new();
        let mut out = Vec::new();
        for tri in &self.triangles {
            for (a, b) in tri_edges(tri) {
                let key = edge_key(a, b);
                if set.insert(key, ()).is_none() {
                    out.push(key);
                }
            }
        }
        out
    }

    /// Triangle containing `p` and the barycentric coordinates of `p` in it.
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        self.locator.locate(&self.nodes, &self.triangles, p)
    }

    /// P1 interpolation of nodal `values` at `p`.
    pub fn interpolate(&self, values: &[f64], p: Point) -> Option<f64> {
        let (t, l) = self.locate(p)?;
        let tri = self.triangles[t];
        Some(l[0] * values[tri[0]] + l[1] * values[tri[1]] + l[2] * values[tri[2]])
    }

    pub fn has_tag(&self, tag: BoundaryTag) -> bool {
        self.tags.iter().any(|&t| t == tag)
    }

    /// Node indices with the given tag, in index order.
    pub fn nodes_with_tag(&self, tag: BoundaryTag) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.tags[i] == tag).collect()
    }
}

/// Nodal values of a scalar function on a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Intensity,
    LogIntensity,
    Coefficient,
    Dimensionless,
}

impl Units {
    pub fn as_str(&self) -> &'static str {
        match self {
            Units::Intensity => "intensity",
            Units::LogIntensity => "log-intensity",
            Units::Coefficient => "coefficient 1/mm^2",
            Units::Dimensionless => "dimensionless",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalarField {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
    units: Units,
}

impl ScalarField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>, units: Units) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::Inconsistent(format!(
                "field has {} values for {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: "field", index });
        }
        Ok(Self { mesh, values, units })
    }

    pub fn constant(mesh: Arc<Mesh>, value: f64, units: Units) -> Result<Self> {
        let n = mesh.node_count();
        Self::new(mesh, vec![value; n], units)
    }

    pub fn from_fn(mesh: Arc<Mesh>, units: Units, f: impl Fn(Point) -> f64) -> Result<Self> {
        let values = mesh.nodes().iter().map(|&p| f(p)).collect();
        Self::new(mesh, values, units)
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, units: Units, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.mesh.clone(), self.values.iter().map(|&v| f(v)).collect(), units)
    }

    pub fn interpolate(&self, p: Point) -> Option<f64> {
        self.mesh.interpolate(&self.values, p)
    }
}

/// Builds the triangulation of `spec` with nominal edge length `target_h`.
pub fn build_mesh(spec: DomainSpec, target_h: f64) -> Result<Mesh> {
    spec.validate()?;
    if !(target_h > 0.0) || !target_h.is_finite() {
        return Err(Error::Mesh(format!("target_h must be positive, got {target_h}")));
    }
    if target_h * 8.0 > spec.diameter() {
        return Err(Error::Mesh(format!(
            "target_h {target_h} is too coarse for a domain of diameter {}",
            spec.diameter()
        )));
    }
    match spec {
        DomainSpec::Square { center, half_width } => {
            let n = cells_for(half_width, target_h);
            structured_square(center, half_width, n)
        }
        DomainSpec::Disk { center, radius } => ring_disk(center, radius, target_h),
        DomainSpec::SquareMinusDisk { center, half_width, radius } => {
            cut_annulus(center, half_width, radius, target_h)
        }
    }
}

fn cells_for(half_width: f64, target_h: f64) -> usize {
    (2.0 * half_width / target_h - 1e-9).ceil().max(1.0) as usize
}

/// Square of the given half-width meshed as an `n x n` grid of split cells.
pub fn structured_square(center: Point, half_width: f64, n: usize) -> Result<Mesh> {
    let spec = DomainSpec::Square { center, half_width };
    spec.validate()?;
    if n < 2 {
        return Err(Error::Mesh("a structured square needs at least 2 cells per side".into()));
    }
    let (nodes, triangles) = grid_arrays(center, half_width, n);
    let tags = (0..nodes.len())
        .map(|k| {
            let (i, j) = (k % (n + 1), k / (n + 1));
            if i == 0 || j == 0 || i == n || j == n {
                BoundaryTag::Outer
            } else {
                BoundaryTag::Interior
            }
        })
        .collect();
    let h = 2.0 * half_width / n as f64;
    Mesh::from_parts(spec, nodes, triangles, tags, h)
}

fn grid_arrays(center: Point, half_width: f64, n: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let step = 2.0 * half_width / n as f64;
    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            // Pin the last row/column to the exact boundary coordinate.
            let x = if i == n { half_width } else { -half_width + i as f64 * step };
            let z = if j == n { half_width } else { -half_width + j as f64 * step };
            nodes.push([center[0] + x, center[1] + z]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    (nodes, triangles)
}

fn ring_disk(center: Point, radius: f64, target_h: f64) -> Result<Mesh> {
    // Zipped ring diagonals reach about 1.73 times the ring spacing.
    let m = (radius / (0.85 * target_h) - 1e-9).ceil().max(1.0) as usize;
    let mut nodes = vec![center];
    let mut ring_start = vec![0usize];
    for i in 1..=m {
        ring_start.push(nodes.len());
        let r = radius * i as f64 / m as f64;
        let count = 6 * i;
        for j in 0..count {
            let th = 2.0 * PI * j as f64 / count as f64;
            nodes.push([center[0] + r * th.cos(), center[1] + r * th.sin()]);
        }
    }
    let mut triangles = Vec::new();
    for j in 0..6 {
        triangles.push([0, 1 + j, 1 + (j + 1) % 6]);
    }
    for i in 2..=m {
        let (inner_n, outer_n) = (6 * (i - 1), 6 * i);
        let (s_in, s_out) = (ring_start[i - 1], ring_start[i]);
        let (mut a, mut b) = (0usize, 0usize);
        // Zip the two rings by angle; each step emits one triangle.
        while a < inner_n || b < outer_n {
            let next_in = (a + 1) as f64 / inner_n as f64;
            let next_out = (b + 1) as f64 / outer_n as f64;
            let ia = s_in + a % inner_n;
            let ob = s_out + b % outer_n;
            if b < outer_n && (a >= inner_n || next_out <= next_in) {
                let ob1 = s_out + (b + 1) % outer_n;
                triangles.push([ia, ob, ob1]);
                b += 1;
            } else {
                let ia1 = s_in + (a + 1) % inner_n;
                triangles.push([ia, ob, ia1]);
                a += 1;
            }
        }
    }
    let mut tags = vec![BoundaryTag::Interior; nodes.len()];
    for t in tags.iter_mut().skip(ring_start[m]) {
        *t = BoundaryTag::Outer;
    }
    let spec = DomainSpec::Disk { center, radius };
    Mesh::from_parts(spec, nodes, triangles, tags, radius / m as f64)
}

fn cut_annulus(center: Point, half_width: f64, radius: f64, target_h: f64) -> Result<Mesh> {
    // Snapping stretches cut cells by up to half a step; a 15% finer grid
    // keeps the longest edge within 1.5 target_h.
    let n = cells_for(half_width, 0.85 * target_h);
    let step = 2.0 * half_width / n as f64;
    let (mut nodes, _) = grid_arrays(center, half_width, n);
    let rel = |p: Point| [p[0] - center[0], p[1] - center[1]];
    let radial = |p: Point| {
        let d = rel(p);
        d[0].hypot(d[1])
    };
    let project = |p: Point| {
        let d = rel(p);
        let r = d[0].hypot(d[1]);
        [center[0] + radius * d[0] / r, center[1] + radius * d[1] / r]
    };

    // Every grid edge crossing the circle has an endpoint within half a step
    // of it, so after this pass no axis-aligned edge joins an unsnapped inner
    // node to an unsnapped outer node.
    let snap_tol = SNAP_FRACTION * step * (1.0 + 1e-9);
    let mut side = vec![0i8; nodes.len()]; // -1 inside, 0 on circle, 1 outside
    for (k, p) in nodes.iter_mut().enumerate() {
        let r = radial(*p);
        if (r - radius).abs() <= snap_tol && r > 0.0 {
            *p = project(*p);
        } else {
            side[k] = if r < radius { -1 } else { 1 };
        }
    }

    // Choose each cell's diagonal so that it never joins an inner and an
    // outer node (one of the two always qualifies), preferring the shorter
    // one where snapping distorted the cell.
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let crosses = |a: usize, b: usize| side[a] * side[b] < 0;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            let flip = if crosses(v00, v11) {
                true
            } else if crosses(v10, v01) {
                false
            } else {
                dist(nodes[v10], nodes[v01]) < dist(nodes[v00], nodes[v11]) - 1e-12
            };
            if flip {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            } else {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
    }
    let kept: Vec<[usize; 3]> = triangles
        .into_iter()
        .filter(|tri| {
            if tri.iter().any(|&v| side[v] < 0) {
                return false;
            }
            let c = [
                (nodes[tri[0]][0] + nodes[tri[1]][0] + nodes[tri[2]][0]) / 3.0,
                (nodes[tri[0]][1] + nodes[tri[1]][1] + nodes[tri[2]][1]) / 3.0,
            ];
            radial(c) >= radius
        })
        .collect();

    // Compact away nodes no longer referenced.
    let mut map = vec![usize::MAX; nodes.len()];
    let mut new_nodes = Vec::new();
    let mut new_side = Vec::new();
    let mut new_tris = Vec::with_capacity(kept.len());
    for tri in &kept {
        let mut t = [0usize; 3];
        for (slot, &v) in t.iter_mut().zip(tri) {
            if map[v] == usize::MAX {
                map[v] = new_nodes.len();
                new_nodes.push(nodes[v]);
                new_side.push(side[v]);
            }
            *slot = map[v];
        }
        new_tris.push(t);
    }
    let boundary = boundary_flags(new_nodes.len(), &new_tris);
    let on_square = |p: Point| {
        let d = rel(p);
        let tol = 1e-9 * half_width.max(1.0);
        (d[0].abs() - half_width).abs() < tol || (d[1].abs() - half_width).abs() < tol
    };
    let mut tags = vec![BoundaryTag::Interior; new_nodes.len()];
    for k in 0..new_nodes.len() {
        if !boundary[k] {
            continue;
        }
        if on_square(new_nodes[k]) {
            tags[k] = BoundaryTag::Outer;
        } else if new_side[k] == 0 {
            tags[k] = BoundaryTag::Inner;
        } else {
            let p = new_nodes[k];
            return Err(Error::Mesh(format!("inner boundary node ({}, {}) is off the circle", p[0], p[1])));
        }
    }
    let spec = DomainSpec::SquareMinusDisk { center, half_width, radius };
    Mesh::from_parts(spec, new_nodes, new_tris, tags, step)
}

fn boundary_flags(n: usize, triangles: &[[usize; 3]]) -> Vec<bool> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in triangles {
        for (a, b) in tri_edges(tri) {
            *count.entry(edge_key(a, b)).or_default() += 1;
        }
    }
    let mut flags = vec![false; n];
    for ((a, b), c) in count {
        if c == 1 {
            flags[a] = true;
            flags[b] = true;
        }
    }
    flags
}

/// Boundary nodes carrying `tag`, ordered counterclockwise around the domain
/// center and starting from the node of smallest polar angle in `[0, 2π)`.
pub fn boundary_nodes(mesh: &Mesh, tag: BoundaryTag) -> Result<Vec<usize>> {
    if tag == BoundaryTag::Interior || !mesh.has_tag(tag) {
        return Err(Error::MissingTag(tag));
    }
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in mesh.triangles() {
        for (a, b) in tri_edges(tri) {
            *count.entry(edge_key(a, b)).or_default() += 1;
        }
    }
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&(a, b), &c) in &count {
        if c == 1 && mesh.tag(a) == tag && mesh.tag(b) == tag {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
    }
    let members = mesh.nodes_with_tag(tag);
    for &v in &members {
        let deg = adj.get(&v).map_or(0, |n| n.len());
        if deg != 2 {
            return Err(Error::Mesh(format!("boundary node {v} has {deg} boundary neighbours")));
        }
    }
    let c = mesh.spec().center();
    let angle = |v: usize| {
        let p = mesh.nodes()[v];
        let a = (p[1] - c[1]).atan2(p[0] - c[0]);
        if a < 0.0 {
            a + 2.0 * PI
        } else {
            a
        }
    };
    let start = *members
        .iter()
        .min_by(|&&a, &&b| angle(a).total_cmp(&angle(b)).then(a.cmp(&b)))
        .expect("tag present");
    let mut order = vec![start];
    let mut prev = usize::MAX;
    let mut cur = start;
    loop {
        let nb = &adj[&cur];
        let next = if nb[0] != prev { nb[0] } else { nb[1] };
        if next == start {
            break;
        }
        if order.len() > members.len() {
            return Err(Error::Mesh("boundary loop does not close".into()));
        }
        order.push(next);
        prev = cur;
        cur = next;
    }
    if order.len() != members.len() {
        return Err(Error::Mesh(format!(
            "boundary tag {tag} forms more than one loop ({} of {} nodes reached)",
            order.len(),
            members.len()
        )));
    }
    // Orientation by the polygon's signed area about the center.
    let mut area2 = 0.0;
    for k in 0..order.len() {
        let p = mesh.nodes()[order[k]];
        let q = mesh.nodes()[order[(k + 1) % order.len()]];
        area2 += (p[0] - c[0]) * (q[1] - c[1]) - (q[0] - c[0]) * (p[1] - c[1]);
    }
    if area2 < 0.0 {
        order[1..].reverse();
    }
    Ok(order)
}

/// Interpolates `src` onto the nodes of `dst`; every node must be covered.
pub fn transfer_field(src: &ScalarField, dst: &Arc<Mesh>) -> Result<ScalarField> {
    let mesh = src.mesh();
    let mut out = Vec::with_capacity(dst.node_count());
    for (k, &p) in dst.nodes().iter().enumerate() {
        match mesh.interpolate(src.values(), p) {
            Some(v) => out.push(v),
            None => return Err(Error::OutOfDomain { node: k, x: p[0], z: p[1] }),
        }
    }
    ScalarField::new(dst.clone(), out, src.units())
}

/// Like [`transfer_field`], but nodes outside the source mesh take `fill`.
pub fn transfer_field_or(src: &ScalarField, dst: &Arc<Mesh>, fill: f64) -> Result<ScalarField> {
    let mesh = src.mesh();
    let out = dst
        .nodes()
        .iter()
        .map(|&p| mesh.interpolate(src.values(), p).unwrap_or(fill))
        .collect();
    ScalarField::new(dst.clone(), out, src.units())
}

pub fn write_field_csv(field: &ScalarField, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "x,z,value").map_err(io)?;
    for (p, v) in field.mesh().nodes().iter().zip(field.values()) {
        writeln!(w, "{},{},{}", p[0], p[1], v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a field CSV written by [`write_field_csv`] back onto `mesh`; node
/// coordinates must match row by row.
pub fn read_field_csv(path: &Path, mesh: Arc<Mesh>, units: Units) -> Result<ScalarField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(mesh.node_count());
    let parse_err = |row: usize, msg: String| Error::Parse { path: path.to_path_buf(), row, msg };
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if row == 0 {
            if line.trim() != "x,z,value" {
                return Err(parse_err(1, format!("expected header `x,z,value`, found `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(parse_err(row + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let mut nums = [0.0; 3];
        for (slot, c) in nums.iter_mut().zip(&cols) {
            *slot = c.trim().parse().map_err(|_| parse_err(row + 1, format!("invalid number `{c}`")))?;
        }
        let k = values.len();
        let Some(p) = mesh.nodes().get(k) else {
            return Err(parse_err(row + 1, "more rows than mesh nodes".into()));
        };
        if (p[0] - nums[0]).abs() > 1e-6 || (p[1] - nums[1]).abs() > 1e-6 {
            return Err(parse_err(
                row + 1,
                format!("node ({}, {}) does not match mesh node ({}, {})", nums[0], nums[1], p[0], p[1]),
            ));
        }
        values.push(nums[2]);
    }
    if values.len() != mesh.node_count() {
        return Err(parse_err(values.len() + 1, format!("expected {} rows", mesh.node_count())));
    }
    ScalarField::new(mesh, values, units)
}

/// Writes an 8-bit binary PGM sampled on a `width x width` grid over the
/// mesh bounding box. Pixels outside the mesh are black; inside, values are
/// mapped linearly from `[min, max]` of the field to `[1, 255]`. The range
/// is recorded in `<path>.txt`.
pub fn write_field_pgm(field: &ScalarField, path: &Path, width: usize) -> Result<()> {
    let mesh = field.mesh();
    let (lo, hi) = bounding_box(mesh.nodes());
    let (vmin, vmax) = (field.min(), field.max());
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let w = width.max(2);
    let mut pixels = Vec::with_capacity(w * w);
    for row in 0..w {
        // Row 0 is the top of the image (largest z).
        let z = hi[1] - (hi[1] - lo[1]) * row as f64 / (w - 1) as f64;
        for col in 0..w {
            let x = lo[0] + (hi[0] - lo[0]) * col as f64 / (w - 1) as f64;
            let px = match field.interpolate([x, z]) {
                Some(v) => 1 + (254.0 * ((v - vmin) / span).clamp(0.0, 1.0)).round() as u8,
                None => 0,
            };
            pixels.push(px);
        }
    }
    let io = |e| Error::io(path, e);
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write!(f, "P5\n{w} {w}\n255\n").map_err(io)?;
    f.write_all(&pixels).map_err(io)?;
    f.flush().map_err(io)?;
    let side = path.with_extension("pgm.txt");
    let mut s = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    let io2 = |e| Error::io(&side, e);
    writeln!(s, "min = {vmin}").map_err(io2)?;
    writeln!(s, "max = {vmax}").map_err(io2)?;
    writeln!(s, "x_range = {} {}", lo[0], hi[0]).map_err(io2)?;
    writeln!(s, "z_range = {} {}", lo[1], hi[1]).map_err(io2)?;
    writeln!(s, "mapping = 1 + round(254 * (value - min) / (max - min)); 0 = outside").map_err(io2)?;
    s.flush().map_err(io2)
}

pub(crate) fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (lo, hi)
}

pub(crate) fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn tri_edges(tri: &[usize; 3]) -> [(usize, usize); 3] {
    [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Uniform bucket grid over the mesh bounding box.
#[derive(Debug, Clone)]
struct Locator {
    origin: Point,
    cell: f64,
    nx: usize,
    nz: usize,
    buckets: Vec<Vec<u32>>,
}

impl Locator {
    fn new(nodes: &[Point], triangles: &[[usize; 3]], h: f64) -> Self {
        let (lo, hi) = bounding_box(nodes);
        let cell = if h > 0.0 { h } else { 1.0 };
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize).max(1);
        let nz = (((hi[1] - lo[1]) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * nz];
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        for (t, tri) in triangles.iter().enumerate() {
            let (tlo, thi) = bounding_box(&[nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]]);
            let i0 = clampi((tlo[0] - lo[0] - LOCATE_TOL) / cell, nx);
            let i1 = clampi((thi[0] - lo[0] + LOCATE_TOL) / cell, nx);
            let j0 = clampi((tlo[1] - lo[1] - LOCATE_TOL) / cell, nz);
            let j1 = clampi((thi[1] - lo[1] + LOCATE_TOL) / cell, nz);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t as u32);
                }
            }
        }
        Self { origin: lo, cell, nx, nz, buckets }
    }

    fn locate(&self, nodes: &[Point], triangles: &[[usize; 3]], p: Point) -> Option<(usize, [f64; 3])> {
        let fx = (p[0] - self.origin[0]) / self.cell;
        let fz = (p[1] - self.origin[1]) / self.cell;
        let slack = LOCATE_TOL / self.cell;
        if fx < -slack || fz < -slack || fx > self.nx as f64 + slack || fz > self.nz as f64 + slack {
            return None;
        }
        let i = (fx.floor().max(0.0) as usize).min(self.nx - 1);
        let j = (fz.floor().max(0.0) as usize).min(self.nz - 1);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[j * self.nx + i] {
            let t = t as usize;
            let tri = triangles[t];
            let (a, b, c) = (nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            let area = signed_area(a, b, c);
            let l = [signed_area(p, b, c) / area, signed_area(a, p, c) / area, signed_area(a, b, p) / area];
            let worst = l[0].min(l[1]).min(l[2]);
            if worst >= 0.0 {
                return Some((t, l));
            }
            // Distance-like violation: barycentric deficit times the altitude scale.
            let scale = 2.0 * area / longest_edge(a, b, c);
            let miss = -worst * scale;
            if miss <= LOCATE_TOL && best.as_ref().map_or(true, |b| miss < b.2) {
                best = Some((t, l, miss));
            }
        }
        best.map(|(t, l, _)| {
            let clipped = [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)];
            let s = clipped[0] + clipped[1] + clipped[2];
            (t, [clipped[0] / s, clipped[1] / s, clipped[2] / s])
        })
    }
}

fn longest_edge(a: Point, b: Point, c: Point) -> f64 {
    dist(a, b).max(dist(b, c)).max(dist(c, a))
}
