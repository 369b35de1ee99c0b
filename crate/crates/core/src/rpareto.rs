//! Risk functionals, Brown–Resnick Pareto process samplers, and empirical
//! episode extraction and lifting.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::csvio::{self, csv_err, fmt_f64, parse_cell};
use crate::error::{Error, Result};
use crate::gaussfield::{factor, sample_anchored_increments, CholFactor};
use crate::geometry::SiteSet;
use crate::linalg::Matrix;
use crate::margins::StandardizedMatrix;
use crate::rng::stream;
use crate::variogram::{anchored_sigma, gamma_matrix, VariogramModel};

pub const DEFAULT_MAX_ITERS: u64 = 1_000_000;

/// A 1-homogeneous map from a field on the sites to a scalar severity.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskFunctional {
    /// Value at one site (by index).
    Site(usize),
    /// `Σ π_k z_k` with `π ≥ 0`, `Σ π = 1`.
    WeightedSum(Vec<f64>),
    Mean,
    Max,
    Min,
    /// `k`-th smallest component, `k ∈ 1..=D`.
    OrderStat(usize),
    /// `(Σ z_k^p)^(1/p)`.
    LpNorm(f64),
}

impl RiskFunctional {
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::invalid("risk functional needs at least one site"));
        }
        match self {
            RiskFunctional::Site(k) if *k >= d => {
                Err(Error::invalid(format!("site index {k} out of range for {d} sites")))
            }
            RiskFunctional::WeightedSum(pi) => {
                if pi.len() != d {
                    return Err(Error::invalid(format!("{} weights given for {d} sites", pi.len())));
                }
                if pi.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                    return Err(Error::invalid("risk weights must be nonnegative"));
                }
                let s: f64 = pi.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(format!("risk weights sum to {s}, not 1")));
                }
                Ok(())
            }
            RiskFunctional::OrderStat(k) if *k == 0 || *k > d => {
                Err(Error::invalid(format!("order statistic {k} outside 1..={d}")))
            }
            RiskFunctional::LpNorm(p) if !(p.is_finite() && *p > 0.0) => {
                Err(Error::invalid(format!("lp exponent must be > 0, got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `site:<id>`, `mean`, `max`, `min`, `order:<k>`, `lp:<p>` or
    /// `weighted:w1,...,wD`, and validates against `sites`.
    pub fn parse(spec: &str, sites: &SiteSet) -> Result<Self> {
        let spec = spec.trim();
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h.trim().to_ascii_lowercase(), Some(a.trim())),
            None => (spec.to_ascii_lowercase(), None),
        };
        let bad = || Error::invalid(format!("cannot parse risk functional `{spec}`"));
        let num = |a: Option<&str>| -> Result<f64> { a.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
        let r = match (head.as_str(), arg) {
            ("site", Some(id)) => RiskFunctional::Site(
                sites
                    .index_of(id)
                    .ok_or_else(|| Error::invalid(format!("risk site `{id}` is not a known site id")))?,
            ),
            ("mean", None) => RiskFunctional::Mean,
            ("max", None) => RiskFunctional::Max,
            ("min", None) => RiskFunctional::Min,
            ("order", a) => RiskFunctional::OrderStat(a.ok_or_else(bad)?.parse().map_err(|_| bad())?),
            ("lp", a) => RiskFunctional::LpNorm(num(a)?),
            ("weighted", Some(list)) => RiskFunctional::WeightedSum(
                list.split(',')
                    .map(|w| w.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(bad()),
        };
        r.validate(sites.len())?;
        Ok(r)
    }

    /// Inverse of [`RiskFunctional::parse`].
    pub fn describe(&self, sites: &SiteSet) -> String {
        match self {
            RiskFunctional::Site(k) => format!("site:{}", sites.ids()[*k]),
            RiskFunctional::WeightedSum(pi) => {
                let w: Vec<String> = pi.iter().map(|&p| fmt_f64(p)).collect();
                format!("weighted:{}", w.join(","))
            }
            RiskFunctional::Mean => "mean".into(),
            RiskFunctional::Max => "max".into(),
            RiskFunctional::Min => "min".into(),
            RiskFunctional::OrderStat(k) => format!("order:{k}"),
            RiskFunctional::LpNorm(p) => format!("lp:{}", fmt_f64(*p)),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            RiskFunctional::Site(k) => z[*k],
            RiskFunctional::WeightedSum(pi) => pi.iter().zip(z).map(|(p, v)| p * v).sum(),
            RiskFunctional::Mean => z.iter().sum::<f64>() / z.len() as f64,
            RiskFunctional::Max => z.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            RiskFunctional::Min => z.iter().cloned().fold(f64::INFINITY, f64::min),
            RiskFunctional::OrderStat(k) => {
                let mut s = z.to_vec();
                s.sort_by(f64::total_cmp);
                s[k - 1]
            }
            RiskFunctional::LpNorm(p) => {
                let m = z.iter().cloned().fold(0.0, f64::max);
                if m == 0.0 {
                    return 0.0;
                }
                m * z.iter().map(|&v| (v / m).powf(*p)).sum::<f64>().powf(1.0 / p)
            }
        }
    }

    /// `∇r(z)` where `r` is differentiable at `z`; `None` for the order-based variants.
    pub fn gradient(&self, z: &[f64]) -> Option<Vec<f64>> {
        let d = z.len();
        match self {
            RiskFunctional::Site(k) => {
                let mut g = vec![0.0; d];
                g[*k] = 1.0;
                Some(g)
            }
            RiskFunctional::WeightedSum(pi) => Some(pi.clone()),
            RiskFunctional::Mean => Some(vec![1.0 / d as f64; d]),
            RiskFunctional::LpNorm(p) => {
                let r = self.eval(z);
                Some(z.iter().map(|&v| (v / r).powf(p - 1.0)).collect())
            }
            RiskFunctional::Max | RiskFunctional::Min | RiskFunctional::OrderStat(_) => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            RiskFunctional::Site(_) | RiskFunctional::WeightedSum(_) | RiskFunctional::Mean
        )
    }

    /// `M` with `r(z) ≤ M · mean(z)` for every `z ≥ 0`.
    pub fn dominating_constant(&self, d: usize) -> f64 {
        let d = d as f64;
        match self {
            RiskFunctional::Mean | RiskFunctional::Min => 1.0,
            RiskFunctional::Max | RiskFunctional::OrderStat(_) | RiskFunctional::Site(_) => d,
            RiskFunctional::LpNorm(p) if *p >= 1.0 => d,
            RiskFunctional::LpNorm(p) => d.powf(1.0 / p),
            RiskFunctional::WeightedSum(pi) => d * pi.iter().cloned().fold(0.0, f64::max),
        }
    }
}

pub fn risk_eval(riskf: &RiskFunctional, z: &[f64]) -> f64 {
    riskf.eval(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Parametric,
    Empirical,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Parametric => "parametric",
            Origin::Empirical => "empirical",
        }
    }
}

/// `Z = R·Y` with `r(Y) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoEpisode {
    /// Episode number or the time label of the source row.
    pub label: String,
    pub r: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub origin: Origin,
}

impl ParetoEpisode {
    pub fn from_radius(label: String, r: f64, y: Vec<f64>, origin: Origin) -> Self {
        let z = y.iter().map(|&v| r * v).collect();
        ParetoEpisode { label, r, y, z, origin }
    }

    /// Splits a field into `R = r(Z)` and `Y = Z/R`.
    pub fn from_field(label: String, z: Vec<f64>, riskf: &RiskFunctional, origin: Origin) -> Result<Self> {
        let r = riskf.eval(&z);
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("episode `{label}` has risk {r}")));
        }
        let y = z.iter().map(|&v| v / r).collect();
        Ok(ParetoEpisode { label, r, y, z, origin })
    }
}

/// `(1 − U)^(−1/α)` for `U ∈ [0, 1)`.
pub fn pareto_quantile(u: f64, alpha: f64) -> f64 {
    (1.0 - u).powf(-1.0 / alpha)
}

pub fn sample_pareto_radius<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    pareto_quantile(rng.random::<f64>(), alpha)
}

/// Per-site `(μ, σ, ξ)` used by [`generalized_transform`].
#[derive(Debug, Clone, PartialEq)]
pub struct GevMarginalMap {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    xi: Vec<f64>,
}

impl GevMarginalMap {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.len() != xi.len() {
            return Err(Error::invalid("marginal map vectors differ in length"));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("marginal map scales must be > 0"));
        }
        if mu.iter().chain(&xi).any(|v| !v.is_finite()) {
            return Err(Error::invalid("marginal map parameters must be finite"));
        }
        Ok(GevMarginalMap { mu, sigma, xi })
    }

    pub fn constant(d: usize, mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        Self::new(vec![mu; d], vec![sigma; d], vec![xi; d])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn apply(&self, j: usize, z: f64) -> f64 {
        let (mu, sigma, xi) = (self.mu[j], self.sigma[j], self.xi[j]);
        let l = z.ln();
        if xi.abs() < 1e-12 {
            mu + sigma * l
        } else {
            mu + sigma * (xi * l).exp_m1() / xi
        }
    }
}

/// `μ + σ (Z^ξ − 1)/ξ` per site, `μ + σ log Z` when `ξ = 0`. No truncation of
/// small values is applied.
pub fn generalized_transform(episode: &ParetoEpisode, map: &GevMarginalMap) -> Result<Vec<f64>> {
    if map.len() != episode.z.len() {
        return Err(Error::invalid("marginal map and episode differ in dimension"));
    }
    Ok(episode.z.iter().enumerate().map(|(j, &z)| map.apply(j, z)).collect())
}

/// Brown–Resnick model on a fixed site set, with the increment factor cached.
#[derive(Debug, Clone)]
pub struct BrownResnick {
    model: VariogramModel,
    sites: SiteSet,
    gamma: Matrix,
    /// Factor of the increments anchored at site 0; `None` for a single site.
    base: Option<CholFactor>,
}

impl BrownResnick {
    pub fn new(model: VariogramModel, sites: SiteSet) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::invalid("site set is empty"));
        }
        let gamma = gamma_matrix(&model, &sites);
        let base = if sites.len() > 1 {
            Some(factor(&anchored_sigma(&model, &sites, 0)?)?)
        } else {
            None
        };
        Ok(BrownResnick { model, sites, gamma, base })
    }

    pub fn model(&self) -> &VariogramModel {
        &self.model
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    /// `Y_i = exp(W_i − W_{s₀} − γ(s_i, s₀))`, so `Y(s₀) = 1` and `E[Y_i] = 1`.
    pub fn sample_site_spectral<R: Rng + ?Sized>(&self, s0: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let Some(base) = &self.base else {
            return vec![1.0];
        };
        let mut w = Vec::with_capacity(d);
        w.push(0.0);
        w.extend(sample_anchored_increments(base, rng));
        let w0 = w[s0];
        (0..d)
            .map(|i| if i == s0 { 1.0 } else { (w[i] - w0 - self.gamma[(i, s0)]).exp() })
            .collect()
    }

    /// `Z = R·Y` with `Y` conditioned on site `s₀` and `R` standard Pareto.
    pub fn sample_simple_pareto_site<R: Rng + ?Sized>(&self, s0: usize, rng: &mut R) -> ParetoEpisode {
        let y = self.sample_site_spectral(s0, rng);
        let r = sample_pareto_radius(rng, 1.0);
        ParetoEpisode::from_radius(String::new(), r, y, Origin::Parametric)
    }

    /// Mixture weights `π̃` of a linear risk. Every site-conditioned spectral
    /// process has unit means, so `π̃ = π`.
    pub fn mixture_weights(&self, riskf: &RiskFunctional) -> Result<Vec<f64>> {
        riskf.validate(self.dim())?;
        let d = self.dim();
        match riskf {
            RiskFunctional::Mean => Ok(vec![1.0 / d as f64; d]),
            RiskFunctional::WeightedSum(pi) => Ok(pi.clone()),
            RiskFunctional::Site(k) => {
                let mut w = vec![0.0; d];
                w[*k] = 1.0;
                Ok(w)
            }
            other => Err(Error::invalid(format!("{other:?} is not a linear risk functional"))),
        }
    }

    /// Draws the mixture site `τ`, then `Y = Y^(τ)/r(Y^(τ))` and `Z = R·Y`.
    /// Also returns `τ`.
    pub fn sample_linear_risk_indexed<R: Rng + ?Sized>(
        &self,
        riskf: &RiskFunctional,
        rng: &mut R,
    ) -> Result<(ParetoEpisode, usize)> {
        let weights = self.mixture_weights(riskf)?;
        let support: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
        let tau = if support.len() == 1 {
            support[0]
        } else if matches!(riskf, RiskFunctional::Mean) {
            rng.random_range(0..self.dim())
        } else {
            WeightedIndex::new(&weights)
                .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?
                .sample(rng)
        };
        let spectral = self.sample_site_spectral(tau, rng);
        let norm = riskf.eval(&spectral);
        let y: Vec<f64> = spectral.iter().map(|&v| v / norm).collect();
        let r = sample_pareto_radius(rng, 1.0);
        Ok((ParetoEpisode::from_radius(String::new(), r, y, Origin::Parametric), tau))
    }

    pub fn sample_linear_risk<R: Rng + ?Sized>(&self, riskf: &RiskFunctional, rng: &mut R) -> Result<ParetoEpisode> {
        Ok(self.sample_linear_risk_indexed(riskf, rng)?.0)
    }

    /// Rejection from the mean-risk sampler: accept `Z₁` once
    /// `target(Z₁) ≥ M`, return `Z₁/M`. Also returns the number of draws used.
    pub fn sample_rejection<R: Rng + ?Sized>(
        &self,
        target: &RiskFunctional,
        rng: &mut R,
        max_iters: u64,
    ) -> Result<(ParetoEpisode, u64)> {
        target.validate(self.dim())?;
        let base = RiskFunctional::Mean;
        if *target == base {
            return Ok((self.sample_linear_risk(&base, rng)?, 1));
        }
        let m = target.dominating_constant(self.dim());
        for draws in 1..=max_iters {
            let ep = self.sample_linear_risk(&base, rng)?;
            if target.eval(&ep.z) >= m {
                let z = ep.z.iter().map(|&v| v / m).collect();
                return Ok((ParetoEpisode::from_field(String::new(), z, target, Origin::Parametric)?, draws));
            }
        }
        Err(Error::RejectionExhausted {
            max_iters,
            acceptance_rate: 0.0,
        })
    }

    /// Exact sampler for `riskf`: the site sampler for `Site`, the mixture for
    /// linear risks, rejection otherwise.
    pub fn sample_episode<R: Rng + ?Sized>(
        &self,
        riskf: &RiskFunctional,
        rng: &mut R,
        max_iters: u64,
    ) -> Result<(ParetoEpisode, u64)> {
        riskf.validate(self.dim())?;
        match riskf {
            RiskFunctional::Site(s0) => Ok((self.sample_simple_pareto_site(*s0, rng), 1)),
            RiskFunctional::Mean | RiskFunctional::WeightedSum(_) => Ok((self.sample_linear_risk(riskf, rng)?, 1)),
            _ => self.sample_rejection(riskf, rng, max_iters),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub episodes: Vec<ParetoEpisode>,
    /// Base draws consumed, equal to the episode count without rejection.
    pub draws: u64,
}

impl Ensemble {
    pub fn acceptance_rate(&self) -> f64 {
        self.episodes.len() as f64 / self.draws as f64
    }
}

/// `n` episodes, episode `i` drawn from RNG stream `i` of `seed`.
pub fn simulate_ensemble(
    field: &BrownResnick,
    riskf: &RiskFunctional,
    n: usize,
    seed: u64,
    max_iters: u64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    riskf.validate(field.dim())?;
    let drawn: Vec<Result<(ParetoEpisode, u64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let (mut ep, k) = field.sample_episode(riskf, &mut rng, max_iters)?;
            ep.label = (i + 1).to_string();
            Ok((ep, k))
        })
        .collect();
    let mut episodes = Vec::with_capacity(n);
    let mut draws = 0;
    for d in drawn {
        let (ep, k) = d?;
        episodes.push(ep);
        draws += k;
    }
    Ok(Ensemble { episodes, draws })
}

/// Rows whose risk exceeds `u`, rescaled to `Z = X/u`. Rows with missing cells
/// are skipped.
pub fn extract_episodes(data: &StandardizedMatrix, riskf: &RiskFunctional, u: f64) -> Result<Vec<ParetoEpisode>> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::invalid(format!("risk threshold must be > 0, got {u}")));
    }
    let m = &data.data;
    riskf.validate(m.ncols())?;
    let mut out = Vec::new();
    for i in m.complete_rows() {
        let row = m.row(i);
        if riskf.eval(row) > u {
            let label = m.times().map_or_else(|| (i + 1).to_string(), |t| t[i].clone());
            let z = row.iter().map(|&v| v / u).collect();
            out.push(ParetoEpisode::from_field(label, z, riskf, Origin::Empirical)?);
        }
    }
    Ok(out)
}

/// Pairs fresh radii with angular vectors resampled uniformly from `episodes`.
pub fn lift_resample<R: Rng + ?Sized>(
    episodes: &[ParetoEpisode],
    k: usize,
    rng: &mut R,
    alpha: f64,
) -> Result<Vec<ParetoEpisode>> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes to lift"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("tail index must be > 0, got {alpha}")));
    }
    Ok((0..k)
        .map(|i| {
            let j = rng.random_range(0..episodes.len());
            let r = sample_pareto_radius(rng, alpha);
            ParetoEpisode::from_radius((i + 1).to_string(), r, episodes[j].y.clone(), Origin::Empirical)
        })
        .collect())
}

/// Writes `episode,R,<id1>,...,<idD>` with the `Y` components.
pub fn save_episodes(path: impl AsRef<Path>, ids: &[String], episodes: &[ParetoEpisode], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csvio::writer(path, comment)?;
    let mut header = vec!["episode".to_string(), "R".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for ep in episodes {
        if ep.y.len() != ids.len() {
            return Err(Error::invalid("episode dimension differs from the site count"));
        }
        let mut rec = vec![ep.label.clone(), fmt_f64(ep.r)];
        rec.extend(ep.y.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    csvio::flush(path, w)
}

/// Reads an episode file; returns the site ids from its header and the episodes.
pub fn load_episodes(path: impl AsRef<Path>, origin: Origin) -> Result<(Vec<String>, Vec<ParetoEpisode>)> {
    let path = path.as_ref();
    let mut rdr = csvio::reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 3 || &header[0] != "episode" || &header[1] != "R" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header `episode,R,<ids>`".into(),
        });
    }
    let ids: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut episodes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| {
            parse_cell(&rec[k])
                .and_then(|v| v.ok_or_else(|| "missing value".to_string()))
                .map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                })
        };
        let r = num(1)?;
        let y = (2..rec.len()).map(num).collect::<Result<Vec<f64>>>()?;
        episodes.push(ParetoEpisode::from_radius(rec[0].to_string(), r, y, origin));
    }
    Ok((ids, episodes))
}

/// Ensemble metadata for the `key=value` sidecar.
pub fn ensemble_metadata(risk: &str, seed: u64, ensemble: &Ensemble, extra: &[(String, String)]) -> Vec<(String, String)> {
    let mut kv = vec![
        ("risk".to_string(), risk.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("episodes".to_string(), ensemble.episodes.len().to_string()),
        ("draws".to_string(), ensemble.draws.to_string()),
        ("acceptance_rate".to_string(), fmt_f64(ensemble.acceptance_rate())),
    ];
    kv.extend(extra.iter().cloned());
    kv
}

pub fn save_metadata(path: impl AsRef<Path>, comment: Option<&str>, pairs: &[(String, String)]) -> Result<()> {
    csvio::write_kv(path.as_ref(), comment, pairs)
}

/// Short human-readable summary of an ensemble.
pub fn summarize(ensemble: &Ensemble) -> String {
    let mut s = String::new();
    let n = ensemble.episodes.len();
    let mean_r = ensemble.episodes.iter().map(|e| e.r).sum::<f64>() / n as f64;
    let _ = write!(s, "{n} episodes, mean R {mean_r:.3}, acceptance rate {:.4}", ensemble.acceptance_rate());
    s
}
