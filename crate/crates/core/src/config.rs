//! Flat `key = value` experiment files with repeatable `[inclusion]` blocks.
//!
//! ```text
//! background_k2 = 2.403
//! noise = 0.02
//! seed = 42
//!
//! [inclusion]
//! center_x = 0
//! center_z = 0
//! radius = 2.5
//! contrast = 3
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fem::TestSpace;
use crate::scenes::{Contrast, Inclusion, PhantomScene, SourceLayout};
use crate::specfun::SourcePoint;
use crate::stripping::StripOptions;
use crate::tail::{PInfForm, TailEdge, TailFormula, TailOptions};

/// Every recognized key, its unit and default, for `--help`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("background_k2", "1/mm^2", "required; background absorption k^2"),
    ("noise", "relative", "0.02; multiplicative Gaussian noise level"),
    ("seed", "-", "42; noise generator seed"),
    ("eps", "relative", "1e-5; stopping threshold of the tail refinement"),
    ("max_iterations", "-", "100; cap on tail refinement iterations"),
    ("tail_formula", "-", "consistent | printed"),
    ("tail_edge", "-", "far | near; edge of the square read by the first tail"),
    ("p_inf_form", "-", "logarithmic | linearized; how the edge term enters ln u"),
    ("test_space", "-", "linear | quadratic; test functions of the coefficient recovery"),
    ("regularization", "relative", "1e-8; Tikhonov weight of the quadratic recovery"),
    ("forward_h", "mm", "0.6; mesh size of the reconstruction forward solves on the outer square"),
    ("synth_h", "mm", "0.25; mesh size used to synthesize data"),
    ("omega1_h", "mm", "0.23; mesh size of the inner square"),
    ("annulus_h", "mm", "0.3; mesh size of the smoothing annulus"),
    ("omega_h", "mm", "0.23; mesh size of the output disk"),
    ("line_sources", "mm", "20 14 8; equally spaced distances of the sources on the +x axis"),
    ("tail_distance", "mm", "20; distance of the three extra sources on the other axes"),
    ("s_substeps", "-", "24; interpolated positions per source interval used for stripping (1 = none)"),
    ("retain_a1", "-", "true; keep the quadratic term of the stripping equation via one fixed-point pass"),
    ("calibrate_k2", "-", "false; re-estimate k^2 from the far source before reconstructing"),
    ("k2_min", "1/mm^2", "1.0; lower end of the k^2 search"),
    ("k2_max", "1/mm^2", "5.0; upper end of the k^2 search"),
    ("output_dir", "path", "out; where reconstruct writes its files"),
    ("[inclusion] center_x", "mm", "inclusion center"),
    ("[inclusion] center_z", "mm", "inclusion center"),
    ("[inclusion] radius", "mm", "inclusion radius"),
    ("[inclusion] contrast", "-", "ratio >= 1 to the background, or inf"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scene: PhantomScene,
    pub noise: f64,
    pub seed: u64,
    pub tail: TailOptions,
    pub forward_h: f64,
    pub synth_h: f64,
    pub omega1_h: f64,
    pub annulus_h: f64,
    pub omega_h: f64,
    pub line_sources: Vec<f64>,
    pub tail_distance: f64,
    /// Positions per source interval at which the line data are
    /// interpolated before stripping; 1 strips on the source spacing itself.
    pub s_substeps: usize,
    pub strip: StripOptions,
    pub calibrate_k2: bool,
    pub k2_interval: (f64, f64),
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Default settings around a given scene.
    pub fn new(scene: PhantomScene) -> Self {
        Self {
            scene,
            noise: 0.02,
            seed: 42,
            tail: TailOptions::default(),
            forward_h: 0.6,
            synth_h: 0.25,
            omega1_h: 0.23,
            annulus_h: 0.3,
            omega_h: 0.23,
            line_sources: vec![20.0, 14.0, 8.0],
            tail_distance: 20.0,
            s_substeps: 24,
            strip: StripOptions::default(),
            calibrate_k2: false,
            k2_interval: (1.0, 5.0),
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn k2(&self) -> f64 {
        self.scene.background_k2
    }

    /// Line sources get ids 1.. in the order given, the extra sources follow
    /// at `(0, d)`, `(-d, 0)`, `(0, -d)`.
    pub fn layout(&self) -> Result<SourceLayout> {
        let sp = |x: f64, z: f64| SourcePoint::new([x, z], 1.0);
        let mut line = Vec::new();
        for (i, &s) in self.line_sources.iter().enumerate() {
            line.push((i + 1, sp(s, 0.0)?));
        }
        let d = self.tail_distance;
        let base = line.len();
        let tail = vec![(base + 1, sp(0.0, d)?), (base + 2, sp(-d, 0.0)?), (base + 3, sp(0.0, -d)?)];
        let layout = SourceLayout { line, tail };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.5], got {}", self.noise));
        }
        for (name, h) in [
            ("forward_h", self.forward_h),
            ("synth_h", self.synth_h),
            ("omega1_h", self.omega1_h),
            ("annulus_h", self.annulus_h),
            ("omega_h", self.omega_h),
        ] {
            if !(h >= 0.05 && h <= 3.0) {
                return bad(format!("{name} must lie in [0.05, 3] mm, got {h}"));
            }
        }
        let (lo, hi) = self.k2_interval;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad(format!("need 0 < k2_min < k2_max, got {lo}, {hi}"));
        }
        if !(1..=200).contains(&self.s_substeps) {
            return bad(format!("s_substeps must lie in [1, 200], got {}", self.s_substeps));
        }
        self.tail.validate()?;
        crate::stripping::SGrid::from_layout(&self.layout()?)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(PhantomScene::homogeneous(f64::NAN));
        let mut k2_seen = false;
        let mut block: Option<(usize, PartialInclusion)> = None;
        let mut inclusions = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| Error::Config { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if line != "[inclusion]" {
                    return Err(err(format!("unknown section `{line}`")));
                }
                if let Some((l, b)) = block.take() {
                    inclusions.push(b.finish(l)?);
                }
                block = Some((line_no, PartialInclusion::default()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("`{key}` expects a number, got `{v}`")));

            if let Some((_, b)) = block.as_mut() {
                match key {
                    "center_x" => b.center_x = Some(num(value)?),
                    "center_z" => b.center_z = Some(num(value)?),
                    "radius" => b.radius = Some(num(value)?),
                    "contrast" => b.contrast = Some(value.parse().map_err(err)?),
                    _ => return Err(err(format!("unknown inclusion key `{key}`"))),
                }
                continue;
            }
            match key {
                "background_k2" => {
                    cfg.scene.background_k2 = num(value)?;
                    k2_seen = true;
                }
                "noise" => cfg.noise = num(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| err(format!("`seed` expects an unsigned integer, got `{value}`")))?,
                "eps" => cfg.tail.eps = num(value)?,
                "max_iterations" => {
                    cfg.tail.max_iterations = value.parse().map_err(|_| err(format!("`max_iterations` expects an integer, got `{value}`")))?
                }
                "tail_formula" => cfg.tail.formula = value.parse::<TailFormula>().map_err(err)?,
                "tail_edge" => cfg.tail.edge = value.parse::<TailEdge>().map_err(err)?,
                "p_inf_form" => cfg.tail.form = value.parse::<PInfForm>().map_err(err)?,
                "test_space" => cfg.tail.recovery.test_space = value.parse::<TestSpace>().map_err(err)?,
                "regularization" => cfg.tail.recovery.regularization = num(value)?,
                "forward_h" => cfg.forward_h = num(value)?,
                "synth_h" => cfg.synth_h = num(value)?,
                "omega1_h" => cfg.omega1_h = num(value)?,
                "annulus_h" => cfg.annulus_h = num(value)?,
                "omega_h" => cfg.omega_h = num(value)?,
                "line_sources" => {
                    cfg.line_sources = value
                        .split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|t| !t.is_empty())
                        .map(num)
                        .collect::<Result<_>>()?
                }
                "tail_distance" => cfg.tail_distance = num(value)?,
                "s_substeps" => {
                    cfg.s_substeps = value.parse().map_err(|_| err(format!("`s_substeps` expects an integer, got `{value}`")))?
                }
                "retain_a1" => {
                    cfg.strip.retain_a1 = value.parse().map_err(|_| err(format!("`retain_a1` expects true or false, got `{value}`")))?
                }
                "calibrate_k2" => {
                    cfg.calibrate_k2 = value.parse().map_err(|_| err(format!("`calibrate_k2` expects true or false, got `{value}`")))?
                }
                "k2_min" => cfg.k2_interval.0 = num(value)?,
                "k2_max" => cfg.k2_interval.1 = num(value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        if let Some((l, b)) = block.take() {
            inclusions.push(b.finish(l)?);
        }
        if !k2_seen {
            return Err(Error::Config { line: 0, msg: "missing required key `background_k2`".into() });
        }
        cfg.scene.inclusions = inclusions;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Text form that [`PipelineConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("background_k2", self.k2().to_string());
        kv("noise", self.noise.to_string());
        kv("seed", self.seed.to_string());
        kv("eps", self.tail.eps.to_string());
        kv("max_iterations", self.tail.max_iterations.to_string());
        kv("tail_formula", self.tail.formula.to_string());
        kv("tail_edge", self.tail.edge.to_string());
        kv("p_inf_form", self.tail.form.to_string());
        kv("test_space", self.tail.recovery.test_space.to_string());
        kv("regularization", self.tail.recovery.regularization.to_string());
        kv("forward_h", self.forward_h.to_string());
        kv("synth_h", self.synth_h.to_string());
        kv("omega1_h", self.omega1_h.to_string());
        kv("annulus_h", self.annulus_h.to_string());
        kv("omega_h", self.omega_h.to_string());
        kv("line_sources", self.line_sources.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
        kv("tail_distance", self.tail_distance.to_string());
        kv("s_substeps", self.s_substeps.to_string());
        kv("retain_a1", self.strip.retain_a1.to_string());
        kv("calibrate_k2", self.calibrate_k2.to_string());
        kv("k2_min", self.k2_interval.0.to_string());
        kv("k2_max", self.k2_interval.1.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        for inc in &self.scene.inclusions {
            s.push_str(&format!(
                "\n[inclusion]\ncenter_x = {}\ncenter_z = {}\nradius = {}\ncontrast = {}\n",
                inc.center[0], inc.center[1], inc.radius, inc.contrast
            ));
        }
        s
    }
}

#[derive(Default)]
struct PartialInclusion {
    center_x: Option<f64>,
    center_z: Option<f64>,
    radius: Option<f64>,
    contrast: Option<Contrast>,
}

impl PartialInclusion {
    fn finish(self, line: usize) -> Result<Inclusion> {
        let missing = |k: &str| Error::Config { line, msg: format!("inclusion is missing `{k}`") };
        Ok(Inclusion {
            center: [self.center_x.ok_or_else(|| missing("center_x"))?, self.center_z.ok_or_else(|| missing("center_z"))?],
            radius: self.radius.ok_or_else(|| missing("radius"))?,
            contrast: self.contrast.ok_or_else(|| missing("contrast"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{group_scene, DEFAULT_K2};

    const SAMPLE: &str = "\
# group 1
background_k2 = 2.403
noise = 0.02
seed = 42

[inclusion]
center_x = 0
center_z = 0
radius = 2.5
contrast = 3
";

    #[test]
    fn parses_sample() {
        let cfg = PipelineConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.scene, group_scene(1, Contrast::Ratio(3.0), DEFAULT_K2).unwrap());
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.layout().unwrap(), crate::scenes::default_layout());
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = PipelineConfig::parse(SAMPLE).unwrap();
        cfg.scene.inclusions.push(Inclusion { center: [0.0, -3.5], radius: 0.8, contrast: Contrast::Infinite });
        cfg.tail.edge = TailEdge::Near;
        cfg.tail.form = PInfForm::Linearized;
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_k2_is_named() {
        let e = PipelineConfig::parse("noise = 0.02\n").unwrap_err();
        assert!(e.to_string().contains("background_k2"), "{e}");
    }

    #[test]
    fn unknown_keys_report_line() {
        let e = PipelineConfig::parse("background_k2 = 2.4\nnosie = 0.1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        let e = PipelineConfig::parse("background_k2 = 2.4\n[inclusion]\ncenter = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = PipelineConfig::parse("background_k2 = 2.4\n[source]\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
    }

    #[test]
    fn incomplete_inclusion_and_ranges_are_rejected() {
        let e = PipelineConfig::parse("background_k2 = 2.4\n[inclusion]\ncenter_x = 0\n").unwrap_err();
        assert!(e.to_string().contains("center_z"), "{e}");
        assert!(PipelineConfig::parse("background_k2 = 2.4\nnoise = 2\n").is_err());
        assert!(PipelineConfig::parse("background_k2 = 2.4\nforward_h = 0\n").is_err());
        assert!(PipelineConfig::parse("background_k2 = 2.4\nline_sources = 20 14 9\n").is_err());
    }
}
