//! Per-site semiparametric margins: empirical body spliced with a generalized
//! Pareto tail above the `q`-quantile, and the transforms to and from the
//! standard Pareto scale.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::csvio::{self, csv_err, fmt_f64, parse_cell};
use crate::error::{Error, Result};
use crate::geometry::DataMatrix;
use crate::optimize::NelderMead;
use crate::stats::{plotting_cdf, plotting_quantile, sorted};

pub const DEFAULT_Q: f64 = 0.95;
pub const MIN_EXCESSES: usize = 10;
const XI_BOUNDS: (f64, f64) = (-0.99, 5.0);
const XI_SERIES: f64 = 1e-6;

/// Fitted generalized Pareto parameters for threshold excesses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub sigma: f64,
    pub xi: f64,
    /// Mean log-likelihood per excess at the optimum.
    pub mean_loglik: f64,
}

/// `log σ + (1 + 1/ξ) log(1 + ξ y/σ)`, infinite outside the support.
fn gpd_nll_term(y: f64, sigma: f64, xi: f64) -> f64 {
    let t = y / sigma;
    if xi.abs() < XI_SERIES {
        return sigma.ln() + t + xi * (t - 0.5 * t * t);
    }
    let a = xi * t;
    if a <= -1.0 {
        return f64::INFINITY;
    }
    sigma.ln() + (1.0 + 1.0 / xi) * a.ln_1p()
}

/// Mean GPD log-likelihood of `excesses`.
pub fn gpd_mean_loglik(excesses: &[f64], sigma: f64, xi: f64) -> f64 {
    if sigma <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -excesses.iter().map(|&y| gpd_nll_term(y, sigma, xi)).sum::<f64>() / excesses.len() as f64
}

pub fn gpd_survival(y: f64, sigma: f64, xi: f64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    if xi.abs() < XI_SERIES {
        return (-y / sigma).exp();
    }
    let a = xi * y / sigma;
    if a <= -1.0 {
        0.0
    } else {
        (-a.ln_1p() / xi).exp()
    }
}

/// Inverse of [`gpd_survival`] for a survival level `t ∈ (0, 1]`.
pub fn gpd_survival_inverse(t: f64, sigma: f64, xi: f64) -> f64 {
    if xi.abs() < XI_SERIES {
        -sigma * t.ln()
    } else {
        sigma * (-xi * t.ln()).exp_m1() / xi
    }
}

/// Maximum likelihood over `(log σ, ξ)` with `ξ ∈ (−0.99, 5)`, from a
/// moment-based start followed by three simplex restarts.
pub fn fit_gpd_mle(excesses: &[f64]) -> Result<GpdFit> {
    if excesses.len() < MIN_EXCESSES {
        return Err(Error::TooFewExceedances {
            found: excesses.len(),
            required: MIN_EXCESSES,
        });
    }
    if let Some(bad) = excesses.iter().find(|&&y| !(y.is_finite() && y > 0.0)) {
        return Err(Error::invalid(format!("excesses must be positive and finite, got {bad}")));
    }
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let var = excesses.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 1e-14 * mean * mean {
        return Err(Error::Degenerate("all excesses are equal".into()));
    }

    let objective = |p: &[f64]| {
        let (sigma, xi) = (p[0].exp(), p[1]);
        if xi <= XI_BOUNDS.0 || xi >= XI_BOUNDS.1 {
            return f64::INFINITY;
        }
        -gpd_mean_loglik(excesses, sigma, xi)
    };

    let r = mean * mean / var;
    let xi0 = (0.5 * (1.0 - r)).clamp(-0.5, 2.0);
    let sigma0 = (0.5 * mean * (r + 1.0)).max(1e-3 * mean);
    let nm = NelderMead {
        max_iters: 4000,
        ftol_abs: 1e-15,
        ftol_rel: 1e-15,
        xtol: 1e-10,
        initial_step: 0.2,
    };

    let mut best = nm.minimize(objective, &[sigma0.ln(), xi0]);
    let alt = nm.minimize(objective, &[mean.ln(), 0.0]);
    if alt.fx < best.fx {
        best = alt;
    }
    for _ in 0..3 {
        let again = nm.minimize(objective, &best.x);
        let improved = again.fx <= best.fx;
        let converged = again.converged;
        if improved {
            best = again;
        }
        if converged && improved {
            break;
        }
    }
    if !best.converged || !best.fx.is_finite() {
        return Err(Error::NoConvergence {
            iterations: best.iterations,
            message: format!(
                "GPD fit stalled at sigma={}, xi={}, nll={}",
                best.x[0].exp(),
                best.x[1],
                best.fx
            ),
        });
    }
    let xi = best.x[1];
    if xi <= XI_BOUNDS.0 + 1e-6 {
        return Err(Error::Degenerate(format!("shape estimate hit the lower bound ({xi})")));
    }
    Ok(GpdFit {
        sigma: best.x[0].exp(),
        xi,
        mean_loglik: -best.fx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tail {
    Gpd { sigma: f64, xi: f64 },
    /// Empirical distribution for body and tail alike.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginMode {
    #[default]
    GpdTail,
    Empirical,
}

/// Empirical body below `u` (plotting positions `k/(n+1)`), GPD tail above,
/// spliced continuously at probability `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModel {
    pub site_id: String,
    pub q: f64,
    pub u: f64,
    pub tail: Tail,
    body: Vec<f64>,
}

impl MarginalModel {
    pub fn fit(site_id: impl Into<String>, values: &[f64], q: f64, mode: MarginMode) -> Result<Self> {
        let site_id = site_id.into();
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("tail probability q must be in (0,1), got {q}")));
        }
        let body = sorted(values);
        if body.is_empty() {
            return Err(Error::invalid(format!("site `{site_id}` has no observations")));
        }
        let u = plotting_quantile(&body, q);
        let tail = match mode {
            MarginMode::Empirical => Tail::Empirical,
            MarginMode::GpdTail => {
                let excesses: Vec<f64> = body.iter().filter(|&&x| x > u).map(|&x| x - u).collect();
                let fit = fit_gpd_mle(&excesses).map_err(|e| match e {
                    Error::TooFewExceedances { found, required } => Error::invalid(format!(
                        "site `{site_id}` has {found} excesses above its {q} quantile (need {required})"
                    )),
                    other => other,
                })?;
                Tail::Gpd {
                    sigma: fit.sigma,
                    xi: fit.xi,
                }
            }
        };
        Ok(MarginalModel { site_id, q, u, tail, body })
    }

    /// Rebuilds a model from stored parameters and its full sorted sample.
    pub fn from_parts(site_id: String, q: f64, u: f64, tail: Tail, mut body: Vec<f64>) -> Result<Self> {
        body.sort_by(f64::total_cmp);
        if body.is_empty() {
            return Err(Error::invalid(format!("site `{site_id}` has an empty body sample")));
        }
        if let Tail::Gpd { sigma, .. } = tail {
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::invalid(format!("site `{site_id}`: sigma must be > 0")));
            }
        }
        Ok(MarginalModel { site_id, q, u, tail, body })
    }

    pub fn body(&self) -> &[f64] {
        &self.body
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == self.u {
            return self.q;
        }
        match self.tail {
            Tail::Gpd { sigma, xi } if x > self.u => {
                1.0 - (1.0 - self.q) * gpd_survival(x - self.u, sigma, xi)
            }
            _ => plotting_cdf(&self.body, x),
        }
    }

    /// `1/(1 − F(x))`; infinite beyond a bounded tail's endpoint.
    pub fn to_standard_pareto(&self, x: f64) -> f64 {
        match self.tail {
            Tail::Gpd { sigma, xi } if x > self.u => {
                1.0 / ((1.0 - self.q) * gpd_survival(x - self.u, sigma, xi))
            }
            _ => 1.0 / (1.0 - self.cdf(x)),
        }
    }

    pub fn from_standard_pareto(&self, z: f64) -> Result<f64> {
        if z.is_nan() || z < 1.0 {
            return Err(Error::invalid(format!("standard Pareto value must be >= 1, got {z}")));
        }
        let p = 1.0 - 1.0 / z;
        match self.tail {
            Tail::Gpd { sigma, xi } if p > self.q => {
                let t = 1.0 / (z * (1.0 - self.q));
                Ok(self.u + gpd_survival_inverse(t, sigma, xi))
            }
            _ => Ok(plotting_quantile(&self.body, p)),
        }
    }
}

/// Fits one model per column; `q_override` maps site ids to their own `q`.
pub fn fit_margins(
    data: &DataMatrix,
    q: f64,
    q_override: &HashMap<String, f64>,
    mode: MarginMode,
) -> Result<Vec<MarginalModel>> {
    let results: Vec<Result<MarginalModel>> = (0..data.ncols())
        .into_par_iter()
        .map(|j| {
            let id = &data.site_ids()[j];
            let qj = q_override.get(id).copied().unwrap_or(q);
            MarginalModel::fit(id.clone(), &data.column(j), qj, mode)
        })
        .collect();
    let mut models = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => models.push(m),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if failures.is_empty() {
        Ok(models)
    } else {
        Err(Error::invalid(format!("marginal fit failed: {}", failures.join("; "))))
    }
}

/// Data on the standard Pareto scale, every entry ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedMatrix {
    pub data: DataMatrix,
    pub margins: Vec<MarginalModel>,
}

pub fn standardize(data: &DataMatrix, margins: Vec<MarginalModel>) -> Result<StandardizedMatrix> {
    if margins.len() != data.ncols() {
        return Err(Error::invalid("one marginal model per column is required"));
    }
    for (m, id) in margins.iter().zip(data.site_ids()) {
        if &m.site_id != id {
            return Err(Error::invalid(format!("margin for `{}` given for column `{id}`", m.site_id)));
        }
    }
    let z = data.map_columns(|j, x| margins[j].to_standard_pareto(x));
    for i in 0..z.nrows() {
        for (j, &v) in z.row(i).iter().enumerate() {
            if !v.is_nan() && !(v.is_finite() && v >= 1.0) {
                return Err(Error::invalid(format!(
                    "row {i}, site `{}`: value lies outside the fitted tail support",
                    data.site_ids()[j]
                )));
            }
        }
    }
    Ok(StandardizedMatrix { data: z, margins })
}

impl StandardizedMatrix {
    /// Wraps data that are already on the standard Pareto scale.
    pub fn assume_standardized(data: DataMatrix) -> Result<Self> {
        for i in 0..data.nrows() {
            if data.row(i).iter().any(|&v| !v.is_nan() && !(v >= 1.0 && v.is_finite())) {
                return Err(Error::invalid(format!("row {i} has values below 1; data are not standardized")));
            }
        }
        Ok(StandardizedMatrix {
            data,
            margins: Vec::new(),
        })
    }
}

/// Writes `id,q,u,sigma,xi` and the companion `id,value` body file.
pub fn save_margins(
    models_path: impl AsRef<Path>,
    body_path: impl AsRef<Path>,
    models: &[MarginalModel],
    comment: Option<&str>,
) -> Result<()> {
    let (mp, bp) = (models_path.as_ref(), body_path.as_ref());
    let mut w = csvio::writer(mp, comment)?;
    w.write_record(["id", "q", "u", "sigma", "xi"]).map_err(|e| csv_err(mp, e))?;
    for m in models {
        let (s, x) = match m.tail {
            Tail::Gpd { sigma, xi } => (fmt_f64(sigma), fmt_f64(xi)),
            Tail::Empirical => (csvio::MISSING.into(), csvio::MISSING.into()),
        };
        w.write_record([m.site_id.clone(), fmt_f64(m.q), fmt_f64(m.u), s, x])
            .map_err(|e| csv_err(mp, e))?;
    }
    csvio::flush(mp, w)?;

    let mut w = csvio::writer(bp, comment)?;
    w.write_record(["id", "value"]).map_err(|e| csv_err(bp, e))?;
    for m in models {
        for &v in &m.body {
            w.write_record([m.site_id.as_str(), &fmt_f64(v)]).map_err(|e| csv_err(bp, e))?;
        }
    }
    csvio::flush(bp, w)
}

pub fn load_margins(models_path: impl AsRef<Path>, body_path: impl AsRef<Path>) -> Result<Vec<MarginalModel>> {
    let (mp, bp) = (models_path.as_ref(), body_path.as_ref());
    let parse_err = |path: &Path, line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut bodies: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csvio::reader(bp)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(bp, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = parse_cell(&rec[1])
            .map_err(|m| parse_err(bp, line, m))?
            .ok_or_else(|| parse_err(bp, line, "missing body value".into()))?;
        bodies.entry(rec[0].to_string()).or_default().push(v);
    }

    let mut rdr = csvio::reader(mp)?;
    let mut models = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(mp, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |k: usize| parse_cell(&rec[k]).map_err(|m| parse_err(mp, line, m));
        let req = |k: usize| cell(k)?.ok_or_else(|| parse_err(mp, line, "missing value".into()));
        let id = rec[0].to_string();
        let tail = match (cell(3)?, cell(4)?) {
            (Some(sigma), Some(xi)) => Tail::Gpd { sigma, xi },
            _ => Tail::Empirical,
        };
        let body = bodies
            .remove(&id)
            .ok_or_else(|| parse_err(bp, 0, format!("no body sample for site `{id}`")))?;
        models.push(MarginalModel::from_parts(id, req(1)?, req(2)?, tail, body)?);
    }
    Ok(models)
}
