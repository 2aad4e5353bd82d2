//! SDE systems `dX = b(X) dt + ε σ(X) dW`, their equivalent sets and the
//! Lyapunov-based stability certificate.

mod builtin;
mod geometry;
mod polynomial;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use builtin::{
    builtin_system, lemniscate, BernoulliSystem, DuffingSystem, GradientSystem,
    NonSymmetricSystem, BUILTIN_NAMES,
};
pub use geometry::{delta_one, distance_to_set, halton, AttractorSpec, Geometry, Polyline};
pub use polynomial::{Monomial, Polynomial, PolynomialSystem};

/// Finite-difference step used wherever an analytic derivative is missing.
pub const FD_STEP: f64 = 1e-6;

/// The deterministic part of a system: drift and, optionally, a potential.
pub trait Model: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Row-major Jacobian `∂b_i/∂x_j`; returns `false` if not available.
    fn drift_jacobian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    fn potential(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Gradient of the potential; returns `false` if there is no potential.
    fn potential_gradient(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

pub type DiffusionFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Diffusion coefficient `σ(x)`.
#[derive(Clone)]
pub enum Diffusion {
    Identity,
    /// Constant row-major d×d matrix.
    Constant(Vec<f64>),
    /// State dependent row-major d×d matrix.
    Field(Arc<DiffusionFn>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Identity => write!(f, "Identity"),
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::Field(_) => write!(f, "Field(..)"),
        }
    }
}

/// How the drift relates to the potential `J`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// `b = -∇J`.
    Gradient,
    /// `b = -∇J + H` with `H · ∇J = 0`.
    QuasiGradient,
    General,
}

/// Constants of the Lyapunov conditions `∇U·b ≤ -ζ|∇U|²`,
/// `∇U·x/|x| ≥ κ` for `|x| ≥ M`, and `|σ| ≤ λ̄`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConstants {
    pub zeta: f64,
    pub kappa: f64,
    pub radius: f64,
    pub lambda_bar: f64,
    pub lambda_under: f64,
}

impl LyapunovConstants {
    /// `ζ = 1, λ̄ = λ̲ = 1`: the values implied by `∇J·b = -|∇J|²` and `σ = I`.
    pub fn quasi_gradient(kappa: f64, radius: f64) -> Self {
        Self { zeta: 1.0, kappa, radius, lambda_bar: 1.0, lambda_under: 1.0 }
    }

    /// Multiplier `2ζ/λ̄²` of the potential difference in the quasi-potential lower bound.
    pub fn bound_factor(&self) -> f64 {
        2.0 * self.zeta / (self.lambda_bar * self.lambda_bar)
    }
}

#[derive(Clone, Debug)]
pub struct SystemSpec {
    name: String,
    model: Arc<dyn Model>,
    diffusion: Diffusion,
    structure: Structure,
    constants: Option<LyapunovConstants>,
}

impl SystemSpec {
    pub fn new(name: impl Into<String>, model: Arc<dyn Model>) -> Self {
        Self {
            name: name.into(),
            model,
            diffusion: Diffusion::Identity,
            structure: Structure::General,
            constants: None,
        }
    }

    pub fn with_diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn with_constants(mut self, constants: LyapunovConstants) -> Self {
        self.constants = Some(constants);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn is_quasi_gradient(&self) -> bool {
        matches!(self.structure, Structure::Gradient | Structure::QuasiGradient)
    }

    pub fn constants(&self) -> Option<LyapunovConstants> {
        self.constants
    }

    pub fn has_potential(&self) -> bool {
        let x = vec![0.0; self.dim()];
        self.model.potential(&x).is_some()
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        self.model.drift(x, out);
    }

    /// Drift Jacobian, analytic when the model supplies it and central finite
    /// differences otherwise. Returns `true` for the analytic route.
    pub fn drift_jacobian_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        if self.model.drift_jacobian(x, out) {
            return true;
        }
        let d = self.dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            xp[j] = x[j] + FD_STEP;
            self.model.drift(&xp, &mut fp);
            xp[j] = x[j] - FD_STEP;
            self.model.drift(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
            }
        }
        false
    }

    pub fn potential(&self, x: &[f64]) -> Option<f64> {
        self.model.potential(x)
    }

    pub fn potential_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.model.potential_gradient(x, &mut g).then_some(g)
    }

    fn require_potential(&self, x: &[f64]) -> Result<f64> {
        self.potential(x)
            .ok_or_else(|| Error::MissingPotential(self.name.clone()))
    }

    /// `σ(x)` as a row-major matrix.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match &self.diffusion {
            Diffusion::Identity => {
                let mut m = vec![0.0; d * d];
                (0..d).for_each(|i| m[i * d + i] = 1.0);
                m
            }
            Diffusion::Constant(m) => m.clone(),
            Diffusion::Field(f) => {
                let mut m = vec![0.0; d * d];
                f(x, &mut m);
                m
            }
        }
    }

    /// `(σσᵀ)⁻¹` at `x`, or `None` for the identity diffusion.
    pub fn precision(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        if matches!(self.diffusion, Diffusion::Identity) {
            return None;
        }
        let d = self.dim();
        let s = DMatrix::from_row_slice(d, d, &self.diffusion_matrix(x));
        let a = &s * s.transpose();
        let scale = (0..d).map(|i| a[(i, i)]).fold(0.0, f64::max);
        Some(match a.cholesky() {
            Some(ch) if (0..d).all(|i| ch.l_dirty()[(i, i)].powi(2) > 1e-12 * scale) => {
                let inv = ch.inverse();
                Ok((0..d * d).map(|k| inv[(k / d, k % d)]).collect())
            }
            _ => Err(Error::SingularDiffusion { node: 0, x: x.to_vec() }),
        })
    }
}

/// Evaluates `b(x)`.
pub fn eval_drift(sys: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != sys.dim() {
        return Err(Error::Dimension { expected: sys.dim(), got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { x: x.to_vec() });
    }
    let mut out = vec![0.0; sys.dim()];
    sys.drift_into(x, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { x: x.to_vec() });
    }
    Ok(out)
}

/// Sufficient test for stability of `K`: `J(y) > J(x)` for every sampled
/// `y ∈ (K)_δ ∖ K` and every sampled `x ∈ K`.
pub fn stability_certificate(
    sys: &SystemSpec,
    k: &AttractorSpec,
    delta: f64,
    n_samples: usize,
) -> Result<bool> {
    if !(delta > 0.0) || n_samples == 0 {
        return Err(Error::InvalidArgument("delta and n_samples must be positive".into()));
    }
    let on_set = k.geometry.samples(n_samples);
    let mut set_max = f64::NEG_INFINITY;
    for x in &on_set {
        set_max = set_max.max(sys.require_potential(x)?);
    }
    for y in k.geometry.ring_samples(delta, n_samples) {
        if sys.require_potential(&y)? <= set_max {
            return Ok(false);
        }
    }
    Ok(true)
}
