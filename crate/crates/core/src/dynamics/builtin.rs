//! The four planar example systems: a double-well gradient flow, a Bernoulli
//! lemniscate system, the Duffing oscillator and a radially symmetric system
//! with two attracting sets.
//!
//! All of them are of the form `b = -∇J + H` with `H · ∇J = 0` and use
//! additive identity noise.

use std::sync::Arc;

use super::geometry::{AttractorSpec, Geometry, Polyline};
use super::{LyapunovConstants, Model, Structure, SystemSpec};
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: [&str; 4] = ["gradient", "bernoulli", "duffing", "nonsymmetric"];

/// Number of segments used to sample the lemniscate.
pub const LEMNISCATE_SEGMENTS: usize = 720;

/// `J(x, y) = x⁴/4 + y²/2 - x²/2 + 1`, shared by the gradient and Duffing systems.
fn double_well(x: &[f64]) -> f64 {
    let (a, b) = (x[0], x[1]);
    a.powi(4) / 4.0 + b * b / 2.0 - a * a / 2.0 + 1.0
}

fn double_well_gradient(x: &[f64], out: &mut [f64]) {
    out[0] = x[0].powi(3) - x[0];
    out[1] = x[1];
}

/// `b = -∇J` for the double well.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientSystem;

impl Model for GradientSystem {
    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] - x[0] * x[0] * x[0];
        out[1] = -x[1];
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        out.copy_from_slice(&[1.0 - 3.0 * x[0] * x[0], 0.0, 0.0, -1.0]);
        true
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        Some(double_well(x))
    }

    fn potential_gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        double_well_gradient(x, out);
        true
    }
}

/// Duffing oscillator: `b = -∇J + (-y, x³ - x)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DuffingSystem;

impl Model for DuffingSystem {
    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let c = x[0] * x[0] * x[0] - x[0];
        out[0] = -c - x[1];
        out[1] = c - x[1];
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let dc = 3.0 * x[0] * x[0] - 1.0;
        out.copy_from_slice(&[-dc, -1.0, dc, -1.0]);
        true
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        Some(double_well(x))
    }

    fn potential_gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        double_well_gradient(x, out);
        true
    }
}

/// Stochastic Bernoulli system built on `O(x,y) = (x²+y²)² - 4(x²-y²)`:
/// `b = -∇U(O) + (∂_yΘ(O), -∂_xΘ(O))` with
/// `U(O) = O²/(2(1+O²)^{3/4})` and `Θ(O) = O/(1+O²)^{3/8}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BernoulliSystem;

struct LemniscateTerms {
    o: f64,
    ox: f64,
    oy: f64,
    oxx: f64,
    oxy: f64,
    oyy: f64,
}

impl LemniscateTerms {
    fn at(x: &[f64]) -> Self {
        let (a, b) = (x[0], x[1]);
        let r2 = a * a + b * b;
        Self {
            o: r2 * r2 - 4.0 * (a * a - b * b),
            ox: 4.0 * a * r2 - 8.0 * a,
            oy: 4.0 * b * r2 + 8.0 * b,
            oxx: 12.0 * a * a + 4.0 * b * b - 8.0,
            oxy: 8.0 * a * b,
            oyy: 4.0 * a * a + 12.0 * b * b + 8.0,
        }
    }
}

impl BernoulliSystem {
    fn u(o: f64) -> f64 {
        o * o / (2.0 * (1.0 + o * o).powf(0.75))
    }

    fn du(o: f64) -> f64 {
        let s = 1.0 + o * o;
        o * (1.0 + 0.25 * o * o) * s.powf(-1.75)
    }

    fn d2u(o: f64) -> f64 {
        let s = 1.0 + o * o;
        let o2 = o * o;
        s.powf(-2.75) * (1.0 - 1.75 * o2 - 0.125 * o2 * o2)
    }

    fn dtheta(o: f64) -> f64 {
        let s = 1.0 + o * o;
        (1.0 + 0.25 * o * o) * s.powf(-1.375)
    }

    fn d2theta(o: f64) -> f64 {
        let s = 1.0 + o * o;
        o * s.powf(-2.375) * (-2.25 - 0.1875 * o * o)
    }
}

impl Model for BernoulliSystem {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let t = LemniscateTerms::at(x);
        let du = Self::du(t.o);
        let dth = Self::dtheta(t.o);
        out[0] = -du * t.ox + dth * t.oy;
        out[1] = -du * t.oy - dth * t.ox;
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let t = LemniscateTerms::at(x);
        let (du, d2u) = (Self::du(t.o), Self::d2u(t.o));
        let (dth, d2th) = (Self::dtheta(t.o), Self::d2theta(t.o));
        out[0] = -d2u * t.ox * t.ox - du * t.oxx + d2th * t.oy * t.ox + dth * t.oxy;
        out[1] = -d2u * t.ox * t.oy - du * t.oxy + d2th * t.oy * t.oy + dth * t.oyy;
        out[2] = -d2u * t.oy * t.ox - du * t.oxy - d2th * t.ox * t.ox - dth * t.oxx;
        out[3] = -d2u * t.oy * t.oy - du * t.oyy - d2th * t.ox * t.oy - dth * t.oxy;
        true
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        Some(Self::u(LemniscateTerms::at(x).o))
    }

    fn potential_gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let t = LemniscateTerms::at(x);
        let du = Self::du(t.o);
        out[0] = du * t.ox;
        out[1] = du * t.oy;
        true
    }
}

/// Radially symmetric system `J = u³ - 1.515u² + 0.03u + 1`, `u = x² + y²`,
/// with drift `-∇J + (-∂_yJ, ∂_xJ)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NonSymmetricSystem;

impl NonSymmetricSystem {
    fn f(u: f64) -> f64 {
        ((u - 1.515) * u + 0.03) * u + 1.0
    }

    /// `f'(u) = 3(u - 1)(u - 0.01)`.
    fn df(u: f64) -> f64 {
        (3.0 * u - 3.03) * u + 0.03
    }

    fn d2f(u: f64) -> f64 {
        6.0 * u - 3.03
    }

    fn grad(x: &[f64]) -> (f64, f64) {
        let u = x[0] * x[0] + x[1] * x[1];
        let g = 2.0 * Self::df(u);
        (g * x[0], g * x[1])
    }
}

impl Model for NonSymmetricSystem {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (j1, j2) = Self::grad(x);
        out[0] = -j1 - j2;
        out[1] = j1 - j2;
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let u = x[0] * x[0] + x[1] * x[1];
        let (df, d2f) = (Self::df(u), Self::d2f(u));
        let h11 = 2.0 * df + 4.0 * d2f * x[0] * x[0];
        let h12 = 4.0 * d2f * x[0] * x[1];
        let h22 = 2.0 * df + 4.0 * d2f * x[1] * x[1];
        out.copy_from_slice(&[-h11 - h12, -h12 - h22, h11 - h12, h12 - h22]);
        true
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        Some(Self::f(x[0] * x[0] + x[1] * x[1]))
    }

    fn potential_gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let (j1, j2) = Self::grad(x);
        out[0] = j1;
        out[1] = j2;
        true
    }
}

/// The lemniscate `(x²+y²)² = 4(x²-y²)` (polar form `r² = 4cos 2θ`) as a closed
/// polyline with `LEMNISCATE_SEGMENTS` segments, traversed as a figure eight
/// through the standard rational parametrization.
pub fn lemniscate() -> Polyline {
    let n = LEMNISCATE_SEGMENTS;
    let mut pts: Vec<[f64; 2]> = (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let (s, c) = t.sin_cos();
            let denom = 1.0 + s * s;
            [2.0 * c / denom, 2.0 * s * c / denom]
        })
        .collect();
    pts.push(pts[0]);
    Polyline::closed(pts).expect("lemniscate samples form a closed curve")
}

fn points(coords: &[(f64, f64)], stable: &[bool]) -> Vec<AttractorSpec> {
    coords
        .iter()
        .zip(stable)
        .enumerate()
        .map(|(i, (&(x, y), &s))| AttractorSpec::new(i + 1, Geometry::Point(vec![x, y]), Some(s)))
        .collect()
}

/// Looks up a built-in system together with its equivalent sets.
pub fn builtin_system(name: &str) -> Result<(SystemSpec, Vec<AttractorSpec>)> {
    let qg = |model: Arc<dyn Model>, structure| {
        SystemSpec::new(name, model)
            .with_structure(structure)
            .with_constants(LyapunovConstants::quasi_gradient(1.0, 2.0))
    };
    let wells = [(0.0, 0.0), (-1.0, 0.0), (1.0, 0.0)];
    let out = match name {
        "gradient" => (
            qg(Arc::new(GradientSystem), Structure::Gradient),
            points(&wells, &[false, true, true]),
        ),
        "duffing" => (
            qg(Arc::new(DuffingSystem), Structure::QuasiGradient),
            points(&wells, &[false, true, true]),
        ),
        "bernoulli" => {
            let sys = SystemSpec::new(name, Arc::new(BernoulliSystem))
                .with_structure(Structure::QuasiGradient)
                .with_constants(LyapunovConstants::quasi_gradient(1.0, 3.0));
            let r = std::f64::consts::SQRT_2;
            let mut sets = vec![AttractorSpec::new(1, Geometry::SampledCurve(lemniscate()), Some(true))];
            sets.extend(points(&[(-r, 0.0), (r, 0.0)], &[false, false]).into_iter().map(|mut k| {
                k.label += 1;
                k
            }));
            (sys, sets)
        }
        "nonsymmetric" => (
            qg(Arc::new(NonSymmetricSystem), Structure::QuasiGradient),
            vec![
                AttractorSpec::new(1, Geometry::Point(vec![0.0, 0.0]), Some(true)),
                AttractorSpec::new(2, Geometry::circle([0.0, 0.0], 0.1)?, Some(false)),
                AttractorSpec::new(3, Geometry::circle([0.0, 0.0], 1.0)?, Some(true)),
            ],
        ),
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(out)
}
