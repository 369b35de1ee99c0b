//! Extremal-dependence diagnostics: empirical extremogram, comparison with the
//! model extremogram, and POT-stability checks of extracted episodes.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::csvio::{self, csv_err, fmt_f64};
use crate::error::{Error, Result};
use crate::geometry::{DataMatrix, SiteSet};
use crate::rng::stream;
use crate::rpareto::ParetoEpisode;
use crate::stats::{ks_pvalue, ks_statistic, pearson, ranks};
use crate::variogram::{theoretical_chi, VariogramModel};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.95, 0.98];
pub const DEFAULT_PERMUTATIONS: usize = 199;
const MIN_EXCEEDANCES: usize = 20;
const MIN_POT_EPISODES: usize = 30;
const MIN_LEVEL_EPISODES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremogramRow {
    /// Mean pair distance in the bin.
    pub h: f64,
    pub chi: f64,
    pub margp: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtremogramTable {
    pub rows: Vec<ExtremogramRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairChi {
    pub i: usize,
    pub j: usize,
    pub h: f64,
    pub chi: f64,
}

/// Column indicators of exceeding the `margp` quantile, rank-based so that any
/// strictly increasing transform of a column leaves them unchanged. Missing
/// cells are `None`.
fn exceedances(data: &DataMatrix, j: usize, margp: f64) -> Vec<Option<bool>> {
    let present: Vec<usize> = (0..data.nrows()).filter(|&i| data.get(i, j).is_some()).collect();
    let values: Vec<f64> = present.iter().map(|&i| data.row(i)[j]).collect();
    let r = ranks(&values);
    let np1 = (values.len() + 1) as f64;
    let mut out = vec![None; data.nrows()];
    for (k, &i) in present.iter().enumerate() {
        out[i] = Some(r[k] / np1 > margp);
    }
    out
}

/// Symmetrized `χ̂ = ½(#both/#i + #both/#j)` over rows where both sites are
/// observed; `None` when either site never exceeds.
fn chi_from_indicators(a: &[Option<bool>], b: &[Option<bool>]) -> Option<f64> {
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            na += *x as usize;
            nb += *y as usize;
            both += (*x && *y) as usize;
        }
    }
    (na > 0 && nb > 0).then(|| 0.5 * (both as f64 / na as f64 + both as f64 / nb as f64))
}

fn check_margp(margp: f64) -> Result<()> {
    if margp > 0.0 && margp < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("margp must be in (0,1), got {margp}")))
    }
}

/// `χ̂` for one pair of columns (a column with itself gives 1).
pub fn chi_pair(data: &DataMatrix, i: usize, j: usize, margp: f64) -> Result<Option<f64>> {
    check_margp(margp)?;
    Ok(chi_from_indicators(&exceedances(data, i, margp), &exceedances(data, j, margp)))
}

/// `χ̂` for every pair `i < j`; pairs involving a site without exceedances are
/// skipped with a warning.
pub fn pairwise_chi(data: &DataMatrix, sites: &SiteSet, margp: f64) -> Result<Vec<PairChi>> {
    check_margp(margp)?;
    if data.ncols() != sites.len() {
        return Err(Error::invalid("data columns and sites differ in number"));
    }
    let d = sites.len();
    let ind: Vec<Vec<Option<bool>>> = (0..d).into_par_iter().map(|j| exceedances(data, j, margp)).collect();
    for (j, col) in ind.iter().enumerate() {
        let n = col.iter().filter(|v| **v == Some(true)).count();
        if n == 0 {
            log::warn!("site `{}` has no exceedances at margp={margp}; its pairs are skipped", sites.ids()[j]);
        } else if n < MIN_EXCEEDANCES {
            log::warn!("site `{}` has only {n} exceedances at margp={margp}", sites.ids()[j]);
        }
    }
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    Ok(pairs
        .par_iter()
        .filter_map(|&(i, j)| {
            chi_from_indicators(&ind[i], &ind[j]).map(|chi| PairChi {
                i,
                j,
                h: sites.distance(i, j),
                chi,
            })
        })
        .collect())
}

/// Pairwise `χ̂` averaged within `n_bins` equal-width distance bins; empty
/// bins are dropped.
pub fn empirical_extremogram(data: &DataMatrix, sites: &SiteSet, margp: f64, n_bins: usize) -> Result<ExtremogramTable> {
    if n_bins == 0 {
        return Err(Error::invalid("at least one distance bin is required"));
    }
    let pairs = pairwise_chi(data, sites, margp)?;
    let hmax = pairs.iter().map(|p| p.h).fold(0.0, f64::max);
    let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
    for p in &pairs {
        let b = if hmax > 0.0 {
            ((p.h / hmax * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        acc[b].0 += p.h;
        acc[b].1 += p.chi;
        acc[b].2 += 1;
    }
    Ok(ExtremogramTable {
        rows: acc
            .into_iter()
            .filter(|a| a.2 > 0)
            .map(|(h, chi, n)| ExtremogramRow {
                h: h / n as f64,
                chi: chi / n as f64,
                margp,
                pairs: n,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiComparison {
    pub h: f64,
    pub chi_empirical: f64,
    /// NaN when no model is available.
    pub chi_model: f64,
    pub margp: f64,
    pub pairs: usize,
}

pub fn chi_comparison(model: Option<&VariogramModel>, table: &ExtremogramTable) -> Result<Vec<ChiComparison>> {
    table
        .rows
        .iter()
        .map(|r| {
            Ok(ChiComparison {
                h: r.h,
                chi_empirical: r.chi,
                chi_model: match model {
                    Some(m) => theoretical_chi(m, r.h)?,
                    None => f64::NAN,
                },
                margp: r.margp,
                pairs: r.pairs,
            })
        })
        .collect()
}

pub fn save_extremogram(path: impl AsRef<Path>, rows: &[ChiComparison], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csvio::writer(path, comment)?;
    w.write_record(["margp", "h", "chi_empirical", "chi_model", "pairs"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            fmt_f64(r.margp),
            fmt_f64(r.h),
            fmt_f64(r.chi_empirical),
            fmt_f64(r.chi_model),
            r.pairs.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    csvio::flush(path, w)
}

/// Scatter of empirical bins (one shade per threshold) with the model curve.
pub fn extremogram_svg(rows: &[ChiComparison], model: Option<&VariogramModel>, comment: Option<&str>) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let hmax = rows.iter().map(|r| r.h).fold(0.0, f64::max).max(1e-12) * 1.05;
    let px = |x: f64| pad + x / hmax * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    if let Some(c) = comment {
        let _ = writeln!(s, "<!-- {} -->", c.replace("--", "- -"));
    }
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{pad}" y1="{0}" x2="{1}" y2="{0}"/><line x1="{pad}" y1="{0}" x2="{pad}" y2="{pad}"/></g>"#,
        h - pad,
        w - pad
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.1}</text>"#,
            pad - 6.0,
            py(v) + 4.0
        );
        let hv = hmax * v;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{hv:.3}</text>"#,
            px(hv),
            h - pad + 16.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">h</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" font-size="13">χ</text>"#, h / 2.0);

    let mut levels: Vec<f64> = rows.iter().map(|r| r.margp).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for (k, &lv) in levels.iter().enumerate() {
        let shade = if levels.len() > 1 {
            200 - (150 * k / (levels.len() - 1))
        } else {
            80
        };
        let _ = writeln!(s, r#"<g fill="rgb({shade},{shade},{shade})">"#);
        for r in rows.iter().filter(|r| r.margp == lv) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, px(r.h), py(r.chi_empirical));
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="rgb({shade},{shade},{shade})">u={lv}</text>"#,
            w - pad - 60.0,
            pad + 14.0 * k as f64
        );
    }
    if let Some(m) = model {
        let pts: Vec<String> = (0..=200)
            .filter_map(|k| {
                let x = hmax * k as f64 / 200.0;
                theoretical_chi(m, x).ok().map(|c| format!("{:.2},{:.2}", px(x), py(c)))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotLevel {
    pub u: f64,
    pub n: usize,
    /// KS distance of `R/u | R > u` from the standard Pareto law.
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    /// Spearman correlation of `R` with each angular coordinate.
    pub rank_corr: Vec<f64>,
    pub perm_pvalue: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotReport {
    pub levels: Vec<PotLevel>,
}

fn pot_level(episodes: &[&ParetoEpisode], u: f64, n_perm: usize, seed: u64) -> PotLevel {
    let n = episodes.len();
    let d = episodes.first().map_or(0, |e| e.y.len());
    if n < MIN_LEVEL_EPISODES {
        return PotLevel {
            u,
            n,
            ks_stat: f64::NAN,
            ks_pvalue: f64::NAN,
            rank_corr: vec![f64::NAN; d],
            perm_pvalue: vec![f64::NAN; d],
        };
    }
    let r: Vec<f64> = episodes.iter().map(|e| e.r / u).collect();
    let ks = ks_statistic(&r, |x| if x <= 1.0 { 0.0 } else { 1.0 - 1.0 / x });
    let rr = ranks(&r);
    let per_coord: Vec<(f64, f64)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let ry = ranks(&episodes.iter().map(|e| e.y[j]).collect::<Vec<_>>());
            if ry.iter().all(|&v| v == ry[0]) {
                return (f64::NAN, f64::NAN);
            }
            let rho = pearson(&rr, &ry);
            let mut rng = stream(seed, j as u64);
            let mut perm = rr.clone();
            let mut hits = 0usize;
            for _ in 0..n_perm {
                perm.shuffle(&mut rng);
                if pearson(&perm, &ry).abs() >= rho.abs() - 1e-12 {
                    hits += 1;
                }
            }
            (rho, (1 + hits) as f64 / (1 + n_perm) as f64)
        })
        .collect();
    PotLevel {
        u,
        n,
        ks_stat: ks,
        ks_pvalue: ks_pvalue(ks, n),
        rank_corr: per_coord.iter().map(|c| c.0).collect(),
        perm_pvalue: per_coord.iter().map(|c| c.1).collect(),
    }
}

/// Checks at the extraction level (`u = 1`) and at every higher level of
/// `u_grid`: the rescaled radius against the standard Pareto law, and rank
/// independence between radius and angular coordinates.
pub fn pot_stability_report(episodes: &[ParetoEpisode], u_grid: &[f64], n_perm: usize, seed: u64) -> Result<PotReport> {
    if episodes.len() < MIN_POT_EPISODES {
        return Err(Error::invalid(format!(
            "POT-stability checks need at least {MIN_POT_EPISODES} episodes, got {}",
            episodes.len()
        )));
    }
    if let Some(u) = u_grid.iter().find(|&&u| !(u >= 1.0 && u.is_finite())) {
        return Err(Error::invalid(format!("POT-stability levels must be >= 1, got {u}")));
    }
    let mut grid = vec![1.0];
    grid.extend(u_grid.iter().copied().filter(|&u| u != 1.0));
    let levels = grid
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            let sub: Vec<&ParetoEpisode> = episodes.iter().filter(|e| e.r > u || (u == 1.0 && e.r >= u)).collect();
            pot_level(&sub, u, n_perm, seed.wrapping_add(k as u64 * 1_000_003))
        })
        .collect();
    Ok(PotReport { levels })
}

/// Long format: one row per level and angular coordinate.
pub fn save_pot_report(path: impl AsRef<Path>, ids: &[String], report: &PotReport, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csvio::writer(path, comment)?;
    w.write_record(["u", "n", "ks_stat", "ks_pvalue", "site", "spearman", "perm_pvalue"])
        .map_err(|e| csv_err(path, e))?;
    for lv in &report.levels {
        for (j, id) in ids.iter().enumerate().take(lv.rank_corr.len()) {
            w.write_record([
                fmt_f64(lv.u),
                lv.n.to_string(),
                fmt_f64(lv.ks_stat),
                fmt_f64(lv.ks_pvalue),
                id.clone(),
                fmt_f64(lv.rank_corr[j]),
                fmt_f64(lv.perm_pvalue[j]),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    csvio::flush(path, w)
}
