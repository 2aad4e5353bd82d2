//! Systems defined by polynomial coefficient tables, for configurations that
//! need something other than the compiled-in examples.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};

/// `coef · Π x_j^{powers[j]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coef: f64, powers: Vec<u32>) -> Self {
        Self { coef, powers }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.powers
            .iter()
            .zip(x)
            .fold(self.coef, |acc, (&p, &v)| acc * v.powi(p as i32))
    }

    fn partial(&self, x: &[f64], j: usize) -> f64 {
        let p = self.powers[j];
        if p == 0 {
            return 0.0;
        }
        self.powers.iter().zip(x).enumerate().fold(
            self.coef * p as f64,
            |acc, (k, (&q, &v))| {
                let q = if k == j { q - 1 } else { q };
                acc * v.powi(q as i32)
            },
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|m| m.eval(x)).sum()
    }

    pub fn partial(&self, x: &[f64], j: usize) -> f64 {
        self.terms.iter().map(|m| m.partial(x, j)).sum()
    }

    fn check(&self, dim: usize) -> Result<()> {
        for m in &self.terms {
            if m.powers.len() != dim {
                return Err(Error::Dimension { expected: dim, got: m.powers.len() });
            }
            if !m.coef.is_finite() {
                return Err(Error::InvalidArgument("non-finite polynomial coefficient".into()));
            }
        }
        Ok(())
    }
}

/// Drift components and an optional potential, each a polynomial in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialSystem {
    dim: usize,
    drift: Vec<Polynomial>,
    potential: Option<Polynomial>,
}

impl PolynomialSystem {
    pub fn new(dim: usize, drift: Vec<Polynomial>, potential: Option<Polynomial>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if drift.len() != dim {
            return Err(Error::Dimension { expected: dim, got: drift.len() });
        }
        for p in drift.iter().chain(potential.iter()) {
            p.check(dim)?;
        }
        Ok(Self { dim, drift, potential })
    }
}

impl Model for PolynomialSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.drift) {
            *o = p.eval(x);
        }
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim;
        for (i, p) in self.drift.iter().enumerate() {
            for j in 0..d {
                out[i * d + j] = p.partial(x, j);
            }
        }
        true
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        self.potential.as_ref().map(|p| p.eval(x))
    }

    fn potential_gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.potential {
            Some(p) => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = p.partial(x, j);
                }
                true
            }
            None => false,
        }
    }
}
