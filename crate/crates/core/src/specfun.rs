//! Modified Bessel functions of the second kind and the closed-form
//! free-space quantities built on them.
//!
//! `K0` is evaluated with two branches split at `y = 2`:
//!
//! * `y < 2`: the ascending series
//!   `K0(y) = -(ln(y/2) + γ) I0(y) + Σ_{k≥1} H_k (y²/4)^k / (k!)²`,
//!   summed until the terms drop below machine precision;
//! * `y ≥ 2`: Steed's continued fraction for the ratio `K1/K0` together with
//!   Temme's normalisation series (the `x ≥ 2` branch of the classical
//!   `bessik` routine). The fraction converges in a handful of terms for large
//!   arguments and carries no tabulated coefficients.
//!
//! Both branches deliver full double precision; the split point only affects
//! speed.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::Point;

/// Euler–Mascheroni constant.
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Boundary between the series and the continued-fraction branch.
const SERIES_LIMIT: f64 = 2.0;

/// Beyond this argument `exp(-y)` underflows and K0 is reported as zero.
const UNDERFLOW_LIMIT: f64 = 745.0;

const MAX_TERMS: usize = 500;

/// A light source position together with its unknown strength `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourcePoint {
    pub position: Point,
    /// Distance of the source from the origin, mm.
    pub s: f64,
    pub amplitude: f64,
}

impl SourcePoint {
    pub fn new(position: Point, amplitude: f64) -> Result<Self> {
        let s = position[0].hypot(position[1]);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "source at ({}, {}) must lie away from the origin",
                position[0], position[1]
            )));
        }
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(Error::Domain(format!("source amplitude must be positive, got {amplitude}")));
        }
        Ok(Self { position, s, amplitude })
    }

    pub fn with_amplitude(self, amplitude: f64) -> Result<Self> {
        Self::new(self.position, amplitude)
    }

    pub fn distance_to(&self, p: Point) -> f64 {
        (p[0] - self.position[0]).hypot(p[1] - self.position[1])
    }
}

/// Macdonald function `K0(y)` for `y > 0`.
pub fn bessel_k0(y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!("K0 requires a positive argument, got {y}")));
    }
    Ok(k0_k1(y).0)
}

/// `(K0(y), K1(y))` for `y > 0`; the caller checks the sign.
pub(crate) fn k0_k1(y: f64) -> (f64, f64) {
    if y >= UNDERFLOW_LIMIT {
        return (0.0, 0.0);
    }
    if y < SERIES_LIMIT {
        series(y)
    } else {
        steed(y)
    }
}

fn series(y: f64) -> (f64, f64) {
    let q = 0.25 * y * y;
    let log_half = (0.5 * y).ln();

    // I0, I1 and the harmonic-weighted sums share the same power terms.
    let mut i0 = 1.0;
    let mut i1 = 0.5 * y;
    let mut k0_sum = 0.0;
    let mut k1_sum = -2.0 * EULER_GAMMA + 1.0; // k = 0 term: ψ(1) + ψ(2)

    let mut term0 = 1.0; // q^k / (k!)^2
    let mut term1 = 1.0; // q^k / (k! (k+1)!)
    let mut harmonic = 0.0;
    for k in 1..MAX_TERMS {
        let kf = k as f64;
        term0 *= q / (kf * kf);
        term1 *= q / (kf * (kf + 1.0));
        let h_prev = harmonic;
        harmonic += 1.0 / kf;
        i0 += term0;
        i1 += 0.5 * y * term1;
        k0_sum += harmonic * term0;
        let digamma_pair = -2.0 * EULER_GAMMA + h_prev + 1.0 / kf + harmonic + 1.0 / (kf + 1.0);
        k1_sum += digamma_pair * term1;
        if term0 * harmonic.max(1.0) < f64::EPSILON * 1e-3 * k0_sum.abs().max(i0) {
            break;
        }
    }
    let k0 = -(log_half + EULER_GAMMA) * i0 + k0_sum;
    let k1 = 1.0 / y + log_half * i1 - 0.25 * y * k1_sum;
    (k0, k1)
}

fn steed(x: f64) -> (f64, f64) {
    let a1 = 0.25;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_TERMS {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    let h = a1 * h;
    let k0 = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

/// Free-space Green's function `u0 = K0(k|x - x0|) / 2π` of `Δu - k²u = -δ`.
pub fn fundamental_solution(x: Point, x0: Point, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("k must be positive, got {k}")));
    }
    let r = (x[0] - x0[0]).hypot(x[1] - x0[1]);
    if r == 0.0 {
        return Err(Error::Singularity { x: x0[0], z: x0[1] });
    }
    Ok(k0_k1(k * r).0 / (2.0 * PI))
}

/// Leading-order decay `e^{-ks} / (2 sqrt(2π s))` of the free-space solution.
pub fn w0_asymptotic(s: f64, k: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("w0 requires s > 0, got {s}")));
    }
    if !(k >= 0.0) {
        return Err(Error::Domain(format!("w0 requires k >= 0, got {k}")));
    }
    Ok((-k * s).exp() / (2.0 * (2.0 * PI * s).sqrt()))
}

#[cfg(test)]
pub(crate) fn bessel_k1(y: f64) -> f64 {
    k0_k1(y).1
}
