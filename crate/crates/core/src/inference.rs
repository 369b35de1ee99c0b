//! Brown–Resnick intensity, r-Pareto likelihood for risks with unit
//! normalizer, and the weighted gradient score.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::csvio::{self, csv_err, fmt_f64};
use crate::error::{Error, Result};
use crate::gaussfield::factor;
use crate::geometry::{pairwise_distances, SiteSet};
use crate::linalg::Matrix;
use crate::optimize::NelderMead;
use crate::rpareto::{ParetoEpisode, RiskFunctional};
use crate::variogram::{AnchoredSigma, Family, VariogramModel};

/// Proxy exponent used in place of the maximum where a smooth risk is needed.
pub const MAX_PROXY_P: f64 = 10.0;

/// `log λ` with its first and diagonal second partial derivatives in `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityDerivatives {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

/// Intensity of the Brown–Resnick exponent measure for one parameter value,
/// with everything that does not depend on `z` precomputed.
#[derive(Debug, Clone)]
pub struct BrIntensity {
    anchor: usize,
    others: Vec<usize>,
    /// `γ(s_k, s_anchor)` for the non-anchor sites.
    gamma_anchor: Vec<f64>,
    q: Matrix,
    constant: f64,
    /// Per parameter `(β, α)`: quantities for the parameter derivatives.
    dparam: [ParamDerivative; 2],
}

#[derive(Debug, Clone)]
struct ParamDerivative {
    dzhat: Vec<f64>,
    /// `Q dẑ`
    q_dzhat: Vec<f64>,
    /// `dQ = −Q dΣ Q`
    dq: Matrix,
    trace_q_dsigma: f64,
    sum_dq: f64,
}

impl BrIntensity {
    pub fn new(model: &VariogramModel, sites: &SiteSet, anchor: usize) -> Result<Self> {
        let h = pairwise_distances(sites);
        let d = sites.len();
        if d < 2 {
            return Err(Error::invalid("the intensity needs at least two sites"));
        }
        let gamma = Matrix::from_fn(d, d, |i, j| model.eval(h[(i, j)]));
        let sigma = AnchoredSigma::from_gamma(&gamma, anchor)?;
        let chol = factor(&sigma)?;
        let q = chol.inverse()?;
        let n = d - 1;
        let others: Vec<usize> = (0..n).map(|k| sigma.site_of(k)).collect();
        let gamma_anchor = others.iter().map(|&i| gamma[(i, anchor)]).collect();
        let constant = -0.5 * chol.log_det()? - 0.5 * n as f64 * (2.0 * PI).ln();

        let dparam = [0, 1].map(|p| {
            let dgamma = Matrix::from_fn(d, d, |i, j| model.param_gradient(h[(i, j)])[p]);
            let dsigma = AnchoredSigma::from_gamma(&dgamma, anchor)
                .expect("same shape as gamma")
                .matrix;
            let qds = q.matmul(&dsigma);
            let mut dq = qds.matmul(&q);
            for v in dq.as_mut_slice() {
                *v = -*v;
            }
            let dzhat: Vec<f64> = others.iter().map(|&i| dgamma[(i, anchor)]).collect();
            ParamDerivative {
                q_dzhat: q.mul_vec(&dzhat),
                dzhat,
                sum_dq: dq.as_slice().iter().sum(),
                trace_q_dsigma: qds.trace(),
                dq,
            }
        });
        Ok(BrIntensity {
            anchor,
            others,
            gamma_anchor,
            q,
            constant,
            dparam,
        })
    }

    pub fn dim(&self) -> usize {
        self.others.len() + 1
    }

    fn zhat(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} components, got {}", self.dim(), z.len())));
        }
        if let Some(v) = z.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("intensity needs positive finite components, got {v}")));
        }
        let la = z[self.anchor].ln();
        Ok(self
            .others
            .iter()
            .zip(&self.gamma_anchor)
            .map(|(&i, &g)| z[i].ln() - la + g)
            .collect())
    }

    fn radial(&self, z: &[f64]) -> f64 {
        -2.0 * z[self.anchor].ln() - self.others.iter().map(|&i| z[i].ln()).sum::<f64>()
    }

    pub fn log_intensity(&self, z: &[f64]) -> Result<f64> {
        let zh = self.zhat(z)?;
        let q = self.q.mul_vec(&zh);
        Ok(self.constant + self.radial(z) - 0.5 * dot(&zh, &q))
    }

    pub fn derivatives(&self, z: &[f64]) -> Result<IntensityDerivatives> {
        let zh = self.zhat(z)?;
        let q = self.q.mul_vec(&zh);
        let value = self.constant + self.radial(z) - 0.5 * dot(&zh, &q);
        let d = self.dim();
        let (mut grad, mut hess_diag) = (vec![0.0; d], vec![0.0; d]);
        let s: f64 = q.iter().sum();
        let t: f64 = self.q.as_slice().iter().sum();
        for (k, &i) in self.others.iter().enumerate() {
            grad[i] = -(1.0 + q[k]) / z[i];
            hess_diag[i] = (1.0 + q[k] - self.q[(k, k)]) / (z[i] * z[i]);
        }
        let za = z[self.anchor];
        grad[self.anchor] = (s - 2.0) / za;
        hess_diag[self.anchor] = (2.0 - s - t) / (za * za);
        Ok(IntensityDerivatives { value, grad, hess_diag })
    }

    /// `(∂/∂β, ∂/∂α) log λ(z)`.
    pub fn log_intensity_param_grad(&self, z: &[f64]) -> Result<[f64; 2]> {
        let zh = self.zhat(z)?;
        let q = self.q.mul_vec(&zh);
        Ok(self.dparam.each_ref().map(|dp| {
            -0.5 * dp.trace_q_dsigma - dot(&q, &dp.dzhat) - 0.5 * dot(&zh, &dp.dq.mul_vec(&zh))
        }))
    }

    /// Gradient-score contribution of one field and its `(β, α)` gradient.
    fn score_term(&self, z: &[f64], w: &[f64], dw: &[f64]) -> Result<(f64, [f64; 2])> {
        let zh = self.zhat(z)?;
        let q = self.q.mul_vec(&zh);
        let d = self.dim();
        let s: f64 = q.iter().sum();
        let t: f64 = self.q.as_slice().iter().sum();
        let za = z[self.anchor];

        let mut value = 0.0;
        let mut add = |j: usize, g: f64, h: f64| {
            value += 2.0 * w[j] * dw[j] * g + w[j] * w[j] * (h + 0.5 * g * g);
        };
        let mut gs = vec![0.0; d];
        for (k, &i) in self.others.iter().enumerate() {
            let g = -(1.0 + q[k]) / z[i];
            gs[i] = g;
            add(i, g, (1.0 + q[k] - self.q[(k, k)]) / (z[i] * z[i]));
        }
        let ga = (s - 2.0) / za;
        gs[self.anchor] = ga;
        add(self.anchor, ga, (2.0 - s - t) / (za * za));

        let grad = self.dparam.each_ref().map(|dp| {
            let dqv: Vec<f64> = dp.dq.mul_vec(&zh).iter().zip(&dp.q_dzhat).map(|(a, b)| a + b).collect();
            let mut acc = 0.0;
            let mut add = |j: usize, dg: f64, dh: f64| {
                acc += 2.0 * w[j] * dw[j] * dg + w[j] * w[j] * (dh + gs[j] * dg);
            };
            for (k, &i) in self.others.iter().enumerate() {
                add(i, -dqv[k] / z[i], (dqv[k] - dp.dq[(k, k)]) / (z[i] * z[i]));
            }
            let ds: f64 = dqv.iter().sum();
            add(self.anchor, ds / za, (-ds - dp.sum_dq) / (za * za));
            acc
        });
        Ok((value, grad))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn br_log_intensity(z: &[f64], model: &VariogramModel, sites: &SiteSet, anchor: usize) -> Result<f64> {
    BrIntensity::new(model, sites, anchor)?.log_intensity(z)
}

/// Weight functions for the gradient score.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    /// `w_j = 1 − exp(−(z_j/u − 1))` above `u`, zero below.
    Marginal { u: f64 },
    /// `w_j = z_j (1 − exp(−(r(z)/u − 1)))` above `u`, zero below; `r` must be
    /// differentiable (the maximum is replaced by an `ℓ_10` norm).
    Risk { riskf: RiskFunctional, u: f64 },
    Constant(f64),
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Marginal { u: 1.0 }
    }
}

impl WeightSpec {
    pub fn risk(riskf: &RiskFunctional, u: f64) -> Result<Self> {
        let riskf = match riskf {
            RiskFunctional::Max => RiskFunctional::LpNorm(MAX_PROXY_P),
            RiskFunctional::Min | RiskFunctional::OrderStat(_) => {
                return Err(Error::invalid(format!("{riskf:?} has no smooth proxy for risk weights")))
            }
            other => other.clone(),
        };
        Ok(WeightSpec::Risk { riskf, u })
    }

    /// Weights and their diagonal derivatives `∂w_j/∂z_j` at `z`.
    pub fn eval(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = z.len();
        match self {
            WeightSpec::Constant(c) => Ok((vec![*c; d], vec![0.0; d])),
            WeightSpec::Marginal { u } => {
                let mut w = vec![0.0; d];
                let mut dw = vec![0.0; d];
                for (j, &v) in z.iter().enumerate() {
                    if v == *u {
                        return Err(Error::NonDifferentiableWeight { index: j, value: v });
                    }
                    if v > *u {
                        let e = (-(v / u - 1.0)).exp();
                        w[j] = 1.0 - e;
                        dw[j] = e / u;
                    }
                }
                Ok((w, dw))
            }
            WeightSpec::Risk { riskf, u } => {
                let r = riskf.eval(z);
                if r == *u {
                    return Err(Error::NonDifferentiableWeight { index: d, value: r });
                }
                if r < *u {
                    return Ok((vec![0.0; d], vec![0.0; d]));
                }
                let grad = riskf
                    .gradient(z)
                    .ok_or_else(|| Error::invalid(format!("{riskf:?} is not differentiable")))?;
                let e = (-(r / u - 1.0)).exp();
                let w = z.iter().map(|&v| v * (1.0 - e)).collect();
                let dw = z.iter().zip(&grad).map(|(&v, &g)| (1.0 - e) + v * e * g / u).collect();
                Ok((w, dw))
            }
        }
    }

    /// `marginal[:u]`, `risk[:u]` or `constant:c`.
    pub fn parse(spec: &str, riskf: &RiskFunctional) -> Result<Self> {
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            match a {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| Error::invalid(format!("bad weight parameter `{s}`"))),
            }
        };
        match head {
            "marginal" => Ok(WeightSpec::Marginal { u: num(arg, 1.0)? }),
            "risk" => WeightSpec::risk(riskf, num(arg, 1.0)?),
            "constant" => Ok(WeightSpec::Constant(num(arg, 1.0)?)),
            _ => Err(Error::invalid(format!("unknown weight function `{spec}`"))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            WeightSpec::Marginal { u } => format!("marginal:{}", fmt_f64(*u)),
            WeightSpec::Risk { u, .. } => format!("risk:{}", fmt_f64(*u)),
            WeightSpec::Constant(c) => format!("constant:{}", fmt_f64(*c)),
        }
    }
}

fn require_unit_normalizer(riskf: &RiskFunctional) -> Result<()> {
    if riskf.is_linear() {
        Ok(())
    } else {
        Err(Error::UnsupportedRiskForMle(format!("{riskf:?}")))
    }
}

fn require_nonempty(episodes: &[ParetoEpisode]) -> Result<()> {
    if episodes.is_empty() {
        Err(Error::invalid("no episodes"))
    } else {
        Ok(())
    }
}

/// Sum of per-episode terms computed in parallel and added in episode order.
fn ordered_sum<T: Send>(terms: Vec<Result<T>>, mut add: impl FnMut(T)) -> Result<()> {
    for t in terms {
        add(t?);
    }
    Ok(())
}

/// `Σ_k log λ(Z_k)`; the normalizer is 1 for site, mean and weighted-sum risks.
pub fn rpareto_loglik(episodes: &[ParetoEpisode], intensity: &BrIntensity, riskf: &RiskFunctional) -> Result<f64> {
    require_unit_normalizer(riskf)?;
    require_nonempty(episodes)?;
    let terms: Vec<Result<f64>> = episodes.par_iter().map(|e| intensity.log_intensity(&e.z)).collect();
    let mut total = 0.0;
    ordered_sum(terms, |v| total += v)?;
    Ok(total)
}

pub fn rpareto_loglik_param_grad(
    episodes: &[ParetoEpisode],
    intensity: &BrIntensity,
    riskf: &RiskFunctional,
) -> Result<[f64; 2]> {
    require_unit_normalizer(riskf)?;
    require_nonempty(episodes)?;
    let terms: Vec<Result<[f64; 2]>> = episodes
        .par_iter()
        .map(|e| intensity.log_intensity_param_grad(&e.z))
        .collect();
    let mut total = [0.0; 2];
    ordered_sum(terms, |g| {
        total[0] += g[0];
        total[1] += g[1];
    })?;
    Ok(total)
}

/// Weights at every episode, checked once before any objective evaluation.
pub fn episode_weights(episodes: &[ParetoEpisode], weights: &WeightSpec) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    episodes.iter().map(|e| weights.eval(&e.z)).collect()
}

fn score_with_grad(intensity: &BrIntensity, episodes: &[ParetoEpisode], w: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, [f64; 2])> {
    let terms: Vec<Result<(f64, [f64; 2])>> = episodes
        .par_iter()
        .zip(w)
        .map(|(e, (w, dw))| {
            if w.iter().all(|&v| v == 0.0) {
                return Ok((0.0, [0.0; 2]));
            }
            intensity.score_term(&e.z, w, dw)
        })
        .collect();
    let (mut v, mut g) = (0.0, [0.0; 2]);
    ordered_sum(terms, |(a, b)| {
        v += a;
        g[0] += b[0];
        g[1] += b[1];
    })?;
    Ok((v, g))
}

/// Weighted gradient score `Σ_k Σ_j [2 w_j ∂_j w_j ∂_j log λ + w_j² ∂²_jj log λ + ½ w_j² (∂_j log λ)²]`.
pub fn gradient_score(episodes: &[ParetoEpisode], intensity: &BrIntensity, weights: &WeightSpec) -> Result<f64> {
    require_nonempty(episodes)?;
    Ok(score_with_grad(intensity, episodes, &episode_weights(episodes, weights)?)?.0)
}

/// `(∂/∂β, ∂/∂α)` of [`gradient_score`].
pub fn gradient_score_param_grad(
    episodes: &[ParetoEpisode],
    intensity: &BrIntensity,
    weights: &WeightSpec,
) -> Result<[f64; 2]> {
    require_nonempty(episodes)?;
    Ok(score_with_grad(intensity, episodes, &episode_weights(episodes, weights)?)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    LogLik,
    GradScore,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::LogLik => "loglik",
            Objective::GradScore => "gradscore",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loglik" => Ok(Objective::LogLik),
            "gradscore" | "score" => Ok(Objective::GradScore),
            other => Err(Error::invalid(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: Family,
    pub max_iters: usize,
    pub weights: WeightSpec,
    /// Risk defining the episodes; the log-likelihood needs a linear one.
    pub riskf: RiskFunctional,
    /// Risk threshold the episodes were extracted at, recorded in the result.
    pub u: f64,
    pub anchor: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            family: Family::Power,
            max_iters: 2000,
            weights: WeightSpec::default(),
            riskf: RiskFunctional::Mean,
            u: 1.0,
            anchor: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub family: Family,
    pub beta: f64,
    pub alpha: f64,
    /// `−ℓ` for the log-likelihood, the score itself otherwise.
    pub objective_value: f64,
    pub objective: Objective,
    pub iterations: usize,
    pub converged: bool,
    pub n_u: usize,
    pub u: f64,
    /// Best objective value after each simplex iteration.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn model(&self) -> Result<VariogramModel> {
        VariogramModel::new(self.family, self.beta, self.alpha)
    }

    fn fields(&self) -> Vec<(String, String)> {
        [
            ("family", self.family.to_string()),
            ("beta", fmt_f64(self.beta)),
            ("alpha", fmt_f64(self.alpha)),
            ("objective", self.objective.to_string()),
            ("objective_value", fmt_f64(self.objective_value)),
            ("iterations", self.iterations.to_string()),
            ("converged", self.converged.to_string()),
            ("n_u", self.n_u.to_string()),
            ("u", fmt_f64(self.u)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn save_kv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        csvio::write_kv(path.as_ref(), comment, &self.fields())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let fields = self.fields();
        let mut w = csvio::writer(path, comment)?;
        w.write_record(fields.iter().map(|(k, _)| k)).map_err(|e| csv_err(path, e))?;
        w.write_record(fields.iter().map(|(_, v)| v)).map_err(|e| csv_err(path, e))?;
        csvio::flush(path, w)
    }

    /// Reads the `key=value` form; the trace is not stored.
    pub fn load_kv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let kv = csvio::read_kv(path)?;
        let get = |k: &str| {
            kv.iter()
                .rev()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("missing key `{k}`"),
                })
        };
        let bad = |k: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("bad value for `{k}`"),
        };
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
        Ok(FitResult {
            family: get("family")?.parse()?,
            beta: num("beta")?,
            alpha: num("alpha")?,
            objective: get("objective")?.parse()?,
            objective_value: num("objective_value")?,
            iterations: get("iterations")?.parse().map_err(|_| bad("iterations"))?,
            converged: get("converged")?.parse().map_err(|_| bad("converged"))?,
            n_u: get("n_u")?.parse().map_err(|_| bad("n_u"))?,
            u: num("u")?,
            trace: Vec::new(),
        })
    }
}

fn to_unconstrained(family: Family, beta: f64, alpha: f64) -> [f64; 2] {
    let a = match family {
        Family::Power => {
            let p = alpha / 2.0;
            (p / (1.0 - p)).ln()
        }
        Family::BoundedExponential => alpha.ln(),
    };
    [beta.ln(), a]
}

fn from_unconstrained(family: Family, x: &[f64]) -> (f64, f64) {
    let alpha = match family {
        Family::Power => 2.0 / (1.0 + (-x[1]).exp()),
        Family::BoundedExponential => x[1].exp(),
    };
    (x[0].exp(), alpha)
}

/// Simplex minimization of `−ℓ` or the gradient score over
/// `(log β, logit(α/2))` (`(log β, log α)` for the bounded family).
pub fn fit(
    episodes: &[ParetoEpisode],
    sites: &SiteSet,
    init: (f64, f64),
    objective: Objective,
    opts: &FitOptions,
) -> Result<FitResult> {
    require_nonempty(episodes)?;
    VariogramModel::new(opts.family, init.0, init.1)?;
    if objective == Objective::LogLik {
        require_unit_normalizer(&opts.riskf)?;
    }
    if let Some(e) = episodes.iter().find(|e| e.z.len() != sites.len()) {
        return Err(Error::invalid(format!("episode `{}` has {} components for {} sites", e.label, e.z.len(), sites.len())));
    }
    let weights = match objective {
        Objective::GradScore => episode_weights(episodes, &opts.weights)?,
        Objective::LogLik => Vec::new(),
    };

    let eval = |x: &[f64]| -> f64 {
        let (beta, alpha) = from_unconstrained(opts.family, x);
        let Ok(model) = VariogramModel::new(opts.family, beta, alpha) else {
            return f64::INFINITY;
        };
        let Ok(intensity) = BrIntensity::new(&model, sites, opts.anchor) else {
            return f64::INFINITY;
        };
        let v = match objective {
            Objective::LogLik => rpareto_loglik(episodes, &intensity, &opts.riskf).map(|l| -l),
            Objective::GradScore => score_with_grad(&intensity, episodes, &weights).map(|s| s.0),
        };
        v.unwrap_or(f64::INFINITY)
    };

    let nm = NelderMead {
        max_iters: opts.max_iters,
        ftol_abs: 1e-10,
        ftol_rel: 1e-12,
        xtol: 1e-7,
        initial_step: 0.2,
    };
    let x0 = to_unconstrained(opts.family, init.0, init.1);
    let m = nm.minimize(eval, &x0);
    if !m.fx.is_finite() {
        return Err(Error::NoConvergence {
            iterations: m.iterations,
            message: format!("{objective} objective is not finite near the initial value"),
        });
    }
    let (beta, alpha) = from_unconstrained(opts.family, &m.x);
    Ok(FitResult {
        family: opts.family,
        beta,
        alpha,
        objective_value: m.fx,
        objective,
        iterations: m.iterations,
        converged: m.converged,
        n_u: episodes.len(),
        u: opts.u,
        trace: m.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::rpareto::{BrownResnick, Origin};
    use crate::stats::normal_cdf;
    use rand::Rng;

    fn random_z(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| 0.3 + 5.0 * rng.random::<f64>()).collect()
    }

    fn two_sites(h: f64) -> SiteSet {
        SiteSet::from_coords(vec![[0.0, 0.0], [h, 0.0]]).unwrap()
    }

    /// Hüsler–Reiss exponent measure with `a = √(2γ)`.
    fn hr_exponent(z1: f64, z2: f64, a: f64) -> f64 {
        let l = (z2 / z1).ln();
        normal_cdf(a / 2.0 + l / a) / z1 + normal_cdf(a / 2.0 - l / a) / z2
    }

    #[test]
    fn bivariate_intensity_matches_mixed_derivative() {
        let model = VariogramModel::power(1.0, 1.5).unwrap();
        let sites = two_sites(0.8);
        let a = (2.0 * model.semivariogram(0.8).unwrap()).sqrt();
        let br = BrIntensity::new(&model, &sites, 0).unwrap();
        let mut rng = stream(1, 0);
        let h = 1e-4;
        for _ in 0..20 {
            let z = random_z(&mut rng, 2).iter().map(|v| v + 0.5).collect::<Vec<_>>();
            let v = |dx: f64, dy: f64| hr_exponent(z[0] + dx, z[1] + dy, a);
            let mixed = (v(h, h) - v(h, -h) - v(-h, h) + v(-h, -h)) / (4.0 * h * h);
            let lam = br.log_intensity(&z).unwrap().exp();
            assert!((lam + mixed).abs() <= 1e-5 * lam, "{lam} vs {}", -mixed);
        }
    }

    #[test]
    fn homogeneity_and_anchor_exchange() {
        let model = VariogramModel::power(1.3, 1.2).unwrap();
        let sites = SiteSet::grid(3, 2).unwrap();
        let brs: Vec<BrIntensity> = (0..6).map(|a| BrIntensity::new(&model, &sites, a).unwrap()).collect();
        let mut rng = stream(2, 0);
        for _ in 0..20 {
            let z = random_z(&mut rng, 6);
            let l = brs[0].log_intensity(&z).unwrap();
            let zt: Vec<f64> = z.iter().map(|v| 3.0 * v).collect();
            let lt = brs[0].log_intensity(&zt).unwrap();
            assert!((lt - (l - 7.0 * 3f64.ln())).abs() <= 1e-8 * l.abs().max(1.0));
            for b in &brs[1..] {
                assert!((b.log_intensity(&z).unwrap() - l).abs() <= 1e-10 * l.abs().max(1.0));
            }
        }
        assert!(brs[0].log_intensity(&[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn z_partials_match_finite_differences() {
        let model = VariogramModel::power(1.0, 1.5).unwrap();
        let sites = SiteSet::grid(2, 2).unwrap();
        let br = BrIntensity::new(&model, &sites, 1).unwrap();
        let mut rng = stream(3, 0);
        let h = 1e-5;
        for _ in 0..20 {
            let z = random_z(&mut rng, 4);
            let d = br.derivatives(&z).unwrap();
            for j in 0..4 {
                let at = |t: f64| {
                    let mut x = z.clone();
                    x[j] += t;
                    br.log_intensity(&x).unwrap()
                };
                let g = (at(h) - at(-h)) / (2.0 * h);
                let hh = (at(h) - 2.0 * d.value + at(-h)) / (h * h);
                assert!((g - d.grad[j]).abs() <= 1e-4 * d.grad[j].abs().max(1e-2), "g {j}");
                let step = 1e-3;
                let hh2 = (at(step) - 2.0 * d.value + at(-step)) / (step * step);
                assert!((hh2 - d.hess_diag[j]).abs() <= 1e-4 * d.hess_diag[j].abs().max(1.0), "h {j} {hh}");
            }
        }
    }

    fn ensemble(n: usize, seed: u64) -> (SiteSet, Vec<ParetoEpisode>) {
        let sites = SiteSet::grid(3, 3).unwrap();
        let f = BrownResnick::new(VariogramModel::power(1.0, 1.5).unwrap(), sites.clone()).unwrap();
        let eps = (0..n)
            .map(|i| f.sample_simple_pareto_site(4, &mut stream(seed, i as u64)))
            .collect();
        (sites, eps)
    }

    #[test]
    fn loglik_examples() {
        let (sites, eps) = ensemble(30, 4);
        let model = VariogramModel::power(1.0, 1.5).unwrap();
        let br = BrIntensity::new(&model, &sites, 0).unwrap();
        let site = RiskFunctional::Site(4);
        let one = rpareto_loglik(&eps[..1], &br, &site).unwrap();
        assert_eq!(one, br.log_intensity(&eps[0].z).unwrap());
        let twice: Vec<ParetoEpisode> = eps.iter().chain(&eps).cloned().collect();
        let l = rpareto_loglik(&eps, &br, &site).unwrap();
        assert!((rpareto_loglik(&twice, &br, &site).unwrap() - 2.0 * l).abs() <= 1e-12 * l.abs());
        assert!(matches!(rpareto_loglik(&eps, &br, &RiskFunctional::Max), Err(Error::UnsupportedRiskForMle(_))));
    }

    #[test]
    fn zero_weights_give_zero_score() {
        let (sites, eps) = ensemble(10, 5);
        let br = BrIntensity::new(&VariogramModel::power(1.0, 1.5).unwrap(), &sites, 0).unwrap();
        assert_eq!(gradient_score(&eps, &br, &WeightSpec::Constant(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn weight_at_threshold_is_rejected() {
        let w = WeightSpec::Marginal { u: 1.0 };
        assert!(matches!(w.eval(&[2.0, 1.0]), Err(Error::NonDifferentiableWeight { index: 1, .. })));
        let (w, dw) = WeightSpec::Marginal { u: 1.0 }.eval(&[0.5, 2.0]).unwrap();
        assert_eq!((w[0], dw[0]), (0.0, 0.0));
        assert!((w[1] - (1.0 - (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn risk_weight_derivatives() {
        for riskf in [RiskFunctional::Mean, RiskFunctional::Max, RiskFunctional::Site(1)] {
            let ws = WeightSpec::risk(&riskf, 1.0).unwrap();
            let z = vec![1.5, 2.5, 0.7];
            let (w, dw) = ws.eval(&z).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut a = z.clone();
                let mut b = z.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (ws.eval(&a).unwrap().0[j] - ws.eval(&b).unwrap().0[j]) / (2.0 * h);
                assert!((fd - dw[j]).abs() < 1e-6, "{riskf:?} {j}");
                assert!(w[j] >= 0.0);
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let (sites, eps) = ensemble(40, 6);
        let site = RiskFunctional::Site(4);
        for weights in [WeightSpec::Marginal { u: 1.0 }, WeightSpec::risk(&site, 1.0).unwrap()] {
            for (b, a) in [(1.0, 1.5), (0.7, 0.9)] {
                let at = |b: f64, a: f64| BrIntensity::new(&VariogramModel::power(b, a).unwrap(), &sites, 2).unwrap();
                let br = at(b, a);
                let g = gradient_score_param_grad(&eps, &br, &weights).unwrap();
                let lg = rpareto_loglik_param_grad(&eps, &br, &site).unwrap();
                let h = 1e-6;
                let s = |b, a| gradient_score(&eps, &at(b, a), &weights).unwrap();
                let l = |b, a| rpareto_loglik(&eps, &at(b, a), &site).unwrap();
                let fd = [(s(b + h, a) - s(b - h, a)) / (2.0 * h), (s(b, a + h) - s(b, a - h)) / (2.0 * h)];
                let lfd = [(l(b + h, a) - l(b - h, a)) / (2.0 * h), (l(b, a + h) - l(b, a - h)) / (2.0 * h)];
                for k in 0..2 {
                    assert!((fd[k] - g[k]).abs() <= 1e-3 * g[k].abs().max(1.0), "score {k}: {} vs {}", fd[k], g[k]);
                    assert!((lfd[k] - lg[k]).abs() <= 1e-4 * lg[k].abs().max(1.0), "loglik {k}");
                }
            }
        }
    }

    #[test]
    fn fit_trace_is_monotone_and_fixed_point_is_stable() {
        let (sites, eps) = ensemble(200, 7);
        let opts = FitOptions {
            riskf: RiskFunctional::Site(4),
            ..FitOptions::default()
        };
        let first = fit(&eps, &sites, (1.0, 1.5), Objective::LogLik, &opts).unwrap();
        assert!(first.converged);
        assert!(first.trace.windows(2).all(|w| w[1] <= w[0]));
        let again = fit(&eps, &sites, (first.beta, first.alpha), Objective::LogLik, &opts).unwrap();
        assert!(again.converged && again.iterations <= first.iterations);
        assert!((again.beta - first.beta).abs() < 1e-4 && (again.alpha - first.alpha).abs() < 1e-4);
    }

    #[test]
    fn fit_result_roundtrip() {
        let r = FitResult {
            family: Family::Power,
            beta: 1.25,
            alpha: 1.5,
            objective_value: -12.5,
            objective: Objective::GradScore,
            iterations: 42,
            converged: true,
            n_u: 100,
            u: 2.0,
            trace: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fit.txt");
        r.save_kv(&p, Some("seed=1")).unwrap();
        assert_eq!(FitResult::load_kv(&p).unwrap(), r);
        r.save_csv(dir.path().join("fit.csv"), None).unwrap();
    }

    #[test]
    fn loglik_fit_rejects_max_risk() {
        let (sites, mut eps) = ensemble(5, 8);
        let opts = FitOptions {
            riskf: RiskFunctional::Max,
            ..FitOptions::default()
        };
        assert!(matches!(fit(&eps, &sites, (1.0, 1.0), Objective::LogLik, &opts), Err(Error::UnsupportedRiskForMle(_))));
        eps.clear();
        assert!(fit(&eps, &sites, (1.0, 1.0), Objective::GradScore, &opts).is_err());
        let _ = Origin::Empirical;
    }
}
