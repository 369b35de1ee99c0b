//! Semivariograms of the Brown–Resnick family and the dependence summaries
//! derived from them.
//!
//! `γ` is a semivariogram throughout: `Var(G(s₁) − G(s₂)) = 2γ(‖s₁ − s₂‖)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{pairwise_distances, SiteSet};
use crate::linalg::Matrix;
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `(h/β)^α`, `α ∈ (0, 2)`.
    Power,
    /// `α (1 − exp(−h/β))`, sill `α > 0`.
    BoundedExponential,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Power => "power",
            Family::BoundedExponential => "bounded-exponential",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "power" => Ok(Family::Power),
            "bounded-exponential" | "bounded_exponential" | "exponential" => {
                Ok(Family::BoundedExponential)
            }
            other => Err(Error::invalid(format!("unknown variogram family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramModel {
    family: Family,
    beta: f64,
    alpha: f64,
}

impl VariogramModel {
    pub fn new(family: Family, beta: f64, alpha: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid(format!("variogram scale beta must be > 0, got {beta}")));
        }
        let ok = match family {
            Family::Power => alpha > 0.0 && alpha < 2.0,
            Family::BoundedExponential => alpha.is_finite() && alpha > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("alpha = {alpha} is outside the {family} domain")));
        }
        Ok(VariogramModel { family, beta, alpha })
    }

    pub fn power(beta: f64, alpha: f64) -> Result<Self> {
        Self::new(Family::Power, beta, alpha)
    }

    pub fn bounded_exponential(beta: f64, sill: f64) -> Result<Self> {
        Self::new(Family::BoundedExponential, beta, sill)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn semivariogram(&self, h: f64) -> Result<f64> {
        if h.is_nan() || h < 0.0 {
            return Err(Error::invalid(format!("distance must be >= 0, got {h}")));
        }
        Ok(self.eval(h))
    }

    pub(crate) fn eval(&self, h: f64) -> f64 {
        if h == 0.0 {
            return 0.0;
        }
        match self.family {
            Family::Power => (h / self.beta).powf(self.alpha),
            Family::BoundedExponential => -self.alpha * (-h / self.beta).exp_m1(),
        }
    }

    /// `(∂γ/∂β, ∂γ/∂α)` at distance `h`.
    pub fn param_gradient(&self, h: f64) -> [f64; 2] {
        if h == 0.0 {
            return [0.0, 0.0];
        }
        let (b, a) = (self.beta, self.alpha);
        match self.family {
            Family::Power => {
                let g = (h / b).powf(a);
                [-a / b * g, g * (h / b).ln()]
            }
            Family::BoundedExponential => {
                let e = (-h / b).exp();
                [-a * e * h / (b * b), -(-h / b).exp_m1()]
            }
        }
    }
}

/// Entrywise semivariogram of the site distances.
pub fn gamma_matrix(model: &VariogramModel, sites: &SiteSet) -> Matrix {
    let mut g = pairwise_distances(sites);
    let d = g.rows();
    for i in 0..d {
        for j in 0..d {
            g[(i, j)] = model.eval(g[(i, j)]);
        }
    }
    g
}

/// Covariance of the increments `G(s_i) − G(s_anchor)` over the non-anchor sites.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredSigma {
    pub anchor: usize,
    pub matrix: Matrix,
}

impl AnchoredSigma {
    /// Site index of row `k` of the matrix.
    pub fn site_of(&self, k: usize) -> usize {
        if k < self.anchor {
            k
        } else {
            k + 1
        }
    }

    pub fn from_gamma(gamma: &Matrix, anchor: usize) -> Result<Self> {
        let d = gamma.rows();
        if d < 2 {
            return Err(Error::invalid("anchored covariance needs at least two sites"));
        }
        if anchor >= d {
            return Err(Error::invalid(format!("anchor {anchor} out of range for {d} sites")));
        }
        let others: Vec<usize> = (0..d).filter(|&i| i != anchor).collect();
        let matrix = Matrix::from_fn(d - 1, d - 1, |a, b| {
            let (i, j) = (others[a], others[b]);
            gamma[(i, anchor)] + gamma[(j, anchor)] - gamma[(i, j)]
        });
        Ok(AnchoredSigma { anchor, matrix })
    }
}

pub fn anchored_sigma(model: &VariogramModel, sites: &SiteSet, anchor: usize) -> Result<AnchoredSigma> {
    AnchoredSigma::from_gamma(&gamma_matrix(model, sites), anchor)
}

/// Bivariate extremal coefficient `2Φ(√(γ(h)/2))` of the max-risk process.
pub fn extremal_coefficient_pair(model: &VariogramModel, h: f64) -> Result<f64> {
    Ok(2.0 * normal_cdf((model.semivariogram(h)? / 2.0).sqrt()))
}

/// `χ(h) = 2 − θ(h)`, computed as `2Φ(−√(γ/2))` to keep precision in the tail.
pub fn theoretical_chi(model: &VariogramModel, h: f64) -> Result<f64> {
    Ok(2.0 * normal_cdf(-(model.semivariogram(h)? / 2.0).sqrt()))
}
