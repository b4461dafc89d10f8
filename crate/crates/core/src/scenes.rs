//! Phantom scenes and the default source geometry.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, ScalarField, Units};
use crate::specfun::SourcePoint;
use crate::Point;

/// Calibrated background absorption `k²`, 1/mm².
pub const DEFAULT_K2: f64 = 2.403;
/// Radius of the imaged disk Ω, mm.
pub const OMEGA_RADIUS: f64 = 4.63;
/// Half-width of the square Ω₁, mm.
pub const OMEGA1_HALF_WIDTH: f64 = 5.83;
/// Half-width of the square Ω₀, mm.
pub const OMEGA0_HALF_WIDTH: f64 = 23.32;
/// Multiple of `k²` standing in for a perfect absorber.
pub const SATURATION_FACTOR: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Contrast {
    Ratio(f64),
    Infinite,
}

impl Contrast {
    /// Multiple of the background used when rendering the scene.
    pub fn factor(&self) -> f64 {
        match *self {
            Contrast::Ratio(r) => r,
            Contrast::Infinite => SATURATION_FACTOR,
        }
    }

    /// Ratio used when scoring a reconstruction; `None` for the absorber.
    pub fn target(&self) -> Option<f64> {
        match *self {
            Contrast::Ratio(r) => Some(r),
            Contrast::Infinite => None,
        }
    }
}

impl std::fmt::Display for Contrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Contrast::Ratio(r) => write!(f, "{r}"),
            Contrast::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Contrast {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") {
            return Ok(Contrast::Infinite);
        }
        let v: f64 = t.parse().map_err(|_| format!("invalid contrast `{t}`"))?;
        if !(v >= 1.0) || !v.is_finite() {
            return Err(format!("contrast must be >= 1 or inf, got {t}"));
        }
        Ok(Contrast::Ratio(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion {
    pub center: Point,
    pub radius: f64,
    pub contrast: Contrast,
}

impl Inclusion {
    pub fn contains(&self, p: Point) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) <= self.radius * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    pub background_k2: f64,
    pub inclusions: Vec<Inclusion>,
}

impl PhantomScene {
    pub fn homogeneous(k2: f64) -> Self {
        Self { background_k2: k2, inclusions: Vec::new() }
    }

    pub fn with(mut self, center: Point, radius: f64, contrast: Contrast) -> Self {
        self.inclusions.push(Inclusion { center, radius, contrast });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.background_k2 > 0.0) || !self.background_k2.is_finite() {
            return Err(Error::Domain(format!("background_k2 must be positive, got {}", self.background_k2)));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            if !(inc.radius > 0.0) {
                return Err(Error::Domain(format!("inclusion {i} has non-positive radius")));
            }
            if let Contrast::Ratio(r) = inc.contrast {
                if !(r >= 1.0) {
                    return Err(Error::Domain(format!("inclusion {i} has contrast {r} < 1")));
                }
            }
            if inc.center[0].hypot(inc.center[1]) + inc.radius > OMEGA_RADIUS {
                return Err(Error::Domain(format!("inclusion {i} is not inside the disk of radius {OMEGA_RADIUS}")));
            }
            for (j, other) in self.inclusions.iter().enumerate().skip(i + 1) {
                let d = (inc.center[0] - other.center[0]).hypot(inc.center[1] - other.center[1]);
                if d < inc.radius + other.radius {
                    return Err(Error::Domain(format!("inclusions {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// True coefficient at a point.
    pub fn coefficient(&self, p: Point) -> f64 {
        let k2 = self.background_k2;
        self.inclusions.iter().find(|inc| inc.contains(p)).map_or(k2, |inc| inc.contrast.factor() * k2)
    }
}

/// Nodal `a(x)`: `k²` outside inclusions, `contrast · k²` inside or on the rim.
pub fn build_scene(scene: &PhantomScene, mesh: &Arc<Mesh>) -> Result<ScalarField> {
    scene.validate()?;
    ScalarField::from_fn(mesh.clone(), Units::Coefficient, |p| scene.coefficient(p))
}

/// Source identifiers 1..=6 with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLayout {
    /// Sources along the line, ordered by decreasing distance from the origin.
    pub line: Vec<(usize, SourcePoint)>,
    /// Additional sources used only for the first tail estimate.
    pub tail: Vec<(usize, SourcePoint)>,
}

impl SourceLayout {
    pub fn all(&self) -> Vec<(usize, SourcePoint)> {
        let mut v: Vec<_> = self.line.iter().chain(&self.tail).copied().collect();
        v.sort_by_key(|e| e.0);
        v
    }

    /// The line source farthest from the origin, at `s = s̄`.
    pub fn far(&self) -> (usize, SourcePoint) {
        self.line[0]
    }

    /// Sources feeding the asymptotic tail: the far line source plus the rest.
    pub fn tail_sources(&self) -> Vec<(usize, SourcePoint)> {
        let mut v = vec![self.far()];
        v.extend(self.tail.iter().copied());
        v
    }

    pub fn line_spacing(&self) -> f64 {
        if self.line.len() < 2 {
            return 0.0;
        }
        self.line[0].1.s - self.line[1].1.s
    }

    pub fn validate(&self) -> Result<()> {
        if self.line.len() < 2 {
            return Err(Error::Domain("at least two line sources are required".into()));
        }
        for w in self.line.windows(2) {
            if !(w[0].1.s > w[1].1.s) {
                return Err(Error::Domain("line sources must be ordered by decreasing distance".into()));
            }
        }
        let h = self.line_spacing();
        for w in self.line.windows(2) {
            if ((w[0].1.s - w[1].1.s) - h).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::Domain("line sources must be equally spaced".into()));
            }
        }
        let mut ids: Vec<usize> = self.all().iter().map(|e| e.0).collect();
        ids.dedup();
        if ids.len() != self.line.len() + self.tail.len() {
            return Err(Error::Domain("source ids must be unique".into()));
        }
        for (id, sp) in self.all() {
            let p = sp.position;
            if p[0].abs().max(p[1].abs()) <= OMEGA1_HALF_WIDTH {
                return Err(Error::Domain(format!("source {id} lies inside the square Ω₁")));
            }
            if p[0].abs().max(p[1].abs()) >= OMEGA0_HALF_WIDTH {
                return Err(Error::Domain(format!("source {id} lies outside the square Ω₀")));
            }
        }
        Ok(())
    }
}

/// Line sources 1–3 at x = 20, 14, 8 on the positive x axis and tail sources
/// 4–6 at distance 20 on the other three sides; unit amplitudes.
pub fn default_layout() -> SourceLayout {
    let sp = |x: f64, z: f64| SourcePoint::new([x, z], 1.0).expect("valid default source");
    SourceLayout {
        line: vec![(1, sp(20.0, 0.0)), (2, sp(14.0, 0.0)), (3, sp(8.0, 0.0))],
        tail: vec![(4, sp(0.0, 20.0)), (5, sp(-20.0, 0.0)), (6, sp(0.0, -20.0))],
    }
}

/// Experiment groups: one 5 mm inclusion at the center, one 3 mm inclusion
/// off center, and two 3 mm inclusions.
pub fn group_scene(group: u8, contrast: Contrast, k2: f64) -> Result<PhantomScene> {
    let base = PhantomScene::homogeneous(k2);
    let scene = match group {
        1 => base.with([0.0, 0.0], 2.5, contrast),
        2 => base.with([0.0, 1.5], 1.5, contrast),
        3 => base.with([0.0, 2.2], 1.5, contrast).with([0.0, -2.2], 1.5, contrast),
        _ => return Err(Error::Domain(format!("unknown experiment group {group}"))),
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};

    #[test]
    fn homogeneous_and_contrast_values() {
        let mesh = Arc::new(build_mesh(DomainSpec::square(OMEGA1_HALF_WIDTH), 0.23).unwrap());
        let a = build_scene(&PhantomScene::homogeneous(DEFAULT_K2), &mesh).unwrap();
        assert!(a.values().iter().all(|&v| v == DEFAULT_K2));
        let s = group_scene(1, Contrast::Ratio(3.0), DEFAULT_K2).unwrap();
        assert!((s.coefficient([0.0, 0.0]) - 7.209).abs() < 1e-12);
        assert_eq!(s.coefficient([3.0, 0.0]), DEFAULT_K2);
        let inf = group_scene(1, Contrast::Infinite, DEFAULT_K2).unwrap();
        assert!((inf.coefficient([0.5, 0.5]) - 48.06).abs() < 1e-9);
        let a = build_scene(&inf, &mesh).unwrap();
        assert!(a.min() >= DEFAULT_K2);
    }

    #[test]
    fn rim_nodes_take_inclusion_value() {
        let s = group_scene(1, Contrast::Ratio(2.0), 1.0).unwrap();
        assert_eq!(s.coefficient([2.5, 0.0]), 2.0);
    }

    #[test]
    fn overlap_and_placement_are_rejected() {
        let s = PhantomScene::homogeneous(1.0).with([0.0, 0.0], 1.5, Contrast::Ratio(2.0)).with([1.0, 0.0], 1.5, Contrast::Ratio(2.0));
        assert!(s.validate().is_err());
        let s = PhantomScene::homogeneous(1.0).with([4.0, 0.0], 1.5, Contrast::Ratio(2.0));
        assert!(s.validate().is_err());
        assert!("0.5".parse::<Contrast>().is_err());
        assert_eq!("INF".parse::<Contrast>().unwrap(), Contrast::Infinite);
    }

    #[test]
    fn default_layout_geometry() {
        let l = default_layout();
        l.validate().unwrap();
        assert!((l.line_spacing() - 6.0).abs() < 1e-12);
        assert_eq!(l.far().0, 1);
        assert_eq!(l.far().1.s, 20.0);
        for (_, sp) in l.all() {
            assert!(sp.s > OMEGA1_HALF_WIDTH);
            assert!(sp.position[0].abs() < OMEGA0_HALF_WIDTH && sp.position[1].abs() < OMEGA0_HALF_WIDTH);
        }
        let ids: Vec<usize> = l.tail_sources().iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![1, 4, 5, 6]);
    }

    #[test]
    fn groups_are_constructible() {
        for g in 1..=3 {
            group_scene(g, Contrast::Ratio(4.0), DEFAULT_K2).unwrap();
        }
        let g1 = group_scene(1, Contrast::Ratio(2.0), DEFAULT_K2).unwrap();
        assert_eq!(g1.inclusions[0].radius * 2.0, 5.0);
        let g3 = group_scene(3, Contrast::Ratio(2.0), DEFAULT_K2).unwrap();
        assert_eq!(g3.inclusions.len(), 2);
        assert!(g3.inclusions.iter().all(|i| i.radius * 2.0 == 3.0));
    }
}
