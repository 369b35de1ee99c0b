//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use rpareto::diagnostics::chi_pair;
use rpareto::geometry::{save_data, save_sites, DataMatrix, SiteSet};
use rpareto::inference::{fit, BrIntensity, FitOptions, Objective, WeightSpec};
use rpareto::margins::{standardize, MarginMode, MarginalModel};
use rpareto::rng::stream;
use rpareto::rpareto::{sample_pareto_radius, BrownResnick, ParetoEpisode, RiskFunctional, DEFAULT_MAX_ITERS};
use rpareto::stats::{ks_statistic, normal_cdf, plotting_quantile, sorted};
use rpareto::synthetic::{generate, SyntheticSpec};
use rpareto::variogram::{theoretical_chi, VariogramModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn power(beta: f64, alpha: f64) -> VariogramModel {
    VariogramModel::power(beta, alpha).unwrap()
}

fn within_time(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

fn radius_law() -> Outcome {
    let t = Instant::now();
    let n = 100_000;
    let mut rng = stream(1, 0);
    let r: Vec<f64> = (0..n).map(|_| sample_pareto_radius(&mut rng, 1.0)).collect();
    let elapsed = t.elapsed();
    let mut worst = 0.0f64;
    for u in [2.0, 5.0, 10.0] {
        let p = 1.0 / u;
        let hat = r.iter().filter(|&&v| v > u).count() as f64 / n as f64;
        worst = worst.max((hat - p).abs() / (p * (1.0 - p) / n as f64).sqrt());
    }
    let ks = ks_statistic(&r, |x| 1.0 - 1.0 / x);
    let band = 1.63 / (n as f64).sqrt();
    outcome(
        worst <= 3.0 && ks <= band && within_time(elapsed, Duration::from_secs(1)),
        format!("max |z| {worst:.2} <= 3, KS {ks:.5} <= {band:.5}, {elapsed:.2?}"),
    )
}

fn spectral_normalization() -> Outcome {
    let sites = SiteSet::grid(5, 5).unwrap();
    let field = BrownResnick::new(power(1.0, 1.5), sites).unwrap();
    let s0 = 12;
    let n = 100_000u64;
    let sums: Vec<f64> = (0..n)
        .into_par_iter()
        .fold(
            || vec![0.0; 25],
            |mut acc, i| {
                let y = field.sample_site_spectral(s0, &mut stream(2, i));
                acc.iter_mut().zip(&y).for_each(|(a, v)| *a += v);
                acc
            },
        )
        .reduce(|| vec![0.0; 25], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let mut worst = 0.0f64;
    for i in (0..25).filter(|&i| i != s0) {
        let g = field.gamma()[(i, s0)];
        let se = ((2.0 * g).exp_m1() / n as f64).sqrt();
        worst = worst.max((sums[i] / n as f64 - 1.0).abs() / se);
    }
    let anchor_ok = (sums[s0] - n as f64).abs() < 1e-6;
    outcome(
        worst <= 4.0 && anchor_ok,
        format!("conditioning site {}, max |mean - 1|/SE over 24 sites {worst:.2} <= 4", s0 + 1),
    )
}

fn site_episodes(n: u64, seed: u64) -> (BrownResnick, Vec<ParetoEpisode>) {
    let field = BrownResnick::new(power(1.0, 1.5), SiteSet::grid(5, 5).unwrap()).unwrap();
    let eps = (0..n)
        .into_par_iter()
        .map(|i| field.sample_simple_pareto_site(12, &mut stream(seed, i)))
        .collect();
    (field, eps)
}

fn pot_stability() -> Outcome {
    let t = Instant::now();
    let n = 100_000;
    let (_, eps) = site_episodes(n, 3);
    let all = sorted(&eps.iter().map(|e| e.z[12]).collect::<Vec<_>>());
    // Bonferroni over 99 levels at the 1% level
    let zcrit = 3.89;
    let mut worst = 0.0f64;
    for u in [2.0, 5.0] {
        let cond = sorted(&all.iter().filter(|&&z| z > u).map(|z| z / u).collect::<Vec<_>>());
        for k in 1..=99 {
            let p = k as f64 / 100.0;
            let (qa, qb) = (plotting_quantile(&all, p), plotting_quantile(&cond, p));
            let q = 1.0 / (1.0 - p);
            let se = q * q * (p * (1.0 - p) * (1.0 / all.len() as f64 + 1.0 / cond.len() as f64)).sqrt();
            worst = worst.max((qa - qb).abs() / se);
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= zcrit && within_time(elapsed, Duration::from_secs(10)),
        format!("max QQ |z| {worst:.2} <= {zcrit} over 2x99 levels, {elapsed:.2?}"),
    )
}

fn homogeneity() -> Outcome {
    let n = 100_000;
    let (_, eps) = site_episodes(n, 4);
    let nf = n as f64;
    let p0 = eps.iter().filter(|e| e.z[12] > 2.0).count() as f64 / nf;
    let mut worst = 0.0f64;
    for u in [2.0, 5.0] {
        let p1 = eps.iter().filter(|e| e.z[12] > 2.0 * u).count() as f64 / nf;
        // {z > 2u} ⊂ {z > 2}: Cov(p̂1, p̂0) = (p1 − p1 p0)/n
        let var = p1 * (1.0 - p1) / nf + p0 * (1.0 - p0) / (nf * u * u) - 2.0 * (p1 - p1 * p0) / (nf * u);
        worst = worst.max((p1 - p0 / u).abs() / var.sqrt());
    }
    outcome(worst <= 3.0, format!("max |P(uA) - P(A)/u|/SE {worst:.2} <= 3"))
}

fn two_sites(h: f64) -> BrownResnick {
    BrownResnick::new(power(1.0, 1.5), SiteSet::from_coords(vec![[0.0, 0.0], [h, 0.0]]).unwrap()).unwrap()
}

fn cross_sampler() -> Outcome {
    let t = Instant::now();
    let field = two_sites(1.0);
    // site-risk draws with uniform conditioning site, kept when no earlier
    // site exceeds 1: together they follow the max-exceedance law
    let direct: Vec<Vec<f64>> = (0..1_000_000u64)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = stream(5, i);
            let tau = rng.random_range(0..2);
            let ep = field.sample_simple_pareto_site(tau, &mut rng);
            (ep.z[..tau].iter().all(|&v| v <= 1.0)).then_some(ep.z)
        })
        .collect();
    let rejected: Vec<Vec<f64>> = (0..300_000u64)
        .into_par_iter()
        .map(|i| field.sample_rejection(&RiskFunctional::Max, &mut stream(6, i), DEFAULT_MAX_ITERS).unwrap().0.z)
        .collect();
    let mut worst = 0.0f64;
    for u in [1.0, 1.5, 3.0] {
        let frac = |s: &[Vec<f64>]| s.iter().filter(|z| z[0] > u && z[1] > u).count() as f64 / s.len() as f64;
        let (a, b) = (frac(&direct), frac(&rejected));
        let se = (a * (1.0 - a) / direct.len() as f64 + b * (1.0 - b) / rejected.len() as f64).sqrt();
        worst = worst.max((a - b).abs() / se);
    }

    let mut chi_worst = 0.0f64;
    let n = 200_000u64;
    for (k, h) in [0.25, 0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        let f = two_sites(h);
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| f.sample_rejection(&RiskFunctional::Max, &mut stream(7 + k as u64, i), DEFAULT_MAX_ITERS).unwrap().0.z)
            .collect();
        let data = DataMatrix::from_rows(vec!["1".into(), "2".into()], rows, None).unwrap();
        let chi_hat = chi_pair(&data, 0, 1, 0.98).unwrap().unwrap();
        let chi = theoretical_chi(&power(1.0, 1.5), h).unwrap();
        let se = (chi * (1.0 - chi) / (0.02 * n as f64)).sqrt().max(1e-3);
        chi_worst = chi_worst.max((chi_hat - chi).abs() / se);
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 3.0 && chi_worst <= 3.0 && within_time(elapsed, Duration::from_secs(120)),
        format!(
            "joint exceedance max |z| {worst:.2} ({} direct draws kept), chi max |z| {chi_worst:.2} at 5 distances, {elapsed:.2?}",
            direct.len()
        ),
    )
}

fn hr_exponent(z1: f64, z2: f64, a: f64) -> f64 {
    let l = (z2 / z1).ln();
    normal_cdf(a / 2.0 + l / a) / z1 + normal_cdf(a / 2.0 - l / a) / z2
}

fn intensity_oracle() -> Outcome {
    let model = power(1.0, 1.5);
    let h = 1.3;
    let sites = SiteSet::from_coords(vec![[0.0, 0.0], [h, 0.0]]).unwrap();
    let a = (2.0 * model.semivariogram(h).unwrap()).sqrt();
    let br = BrIntensity::new(&model, &sites, 0).unwrap();
    let mut rng = stream(8, 0);
    let step = 1e-4;
    let (mut worst_fd, mut worst_hom) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let z = [0.5 + 10.0 * rng.random::<f64>(), 0.5 + 10.0 * rng.random::<f64>()];
        let v = |dx: f64, dy: f64| hr_exponent(z[0] + dx, z[1] + dy, a);
        let mixed = (v(step, step) - v(step, -step) - v(-step, step) + v(-step, -step)) / (4.0 * step * step);
        let lam = br.log_intensity(&z).unwrap().exp();
        worst_fd = worst_fd.max((lam + mixed).abs() / lam);
        let l = br.log_intensity(&z).unwrap();
        let lt = br.log_intensity(&[3.0 * z[0], 3.0 * z[1]]).unwrap();
        worst_hom = worst_hom.max((lt - (l - 3.0 * 3f64.ln())).abs() / l.abs().max(1.0));
    }
    outcome(
        worst_fd <= 1e-5 && worst_hom <= 1e-8,
        format!("max rel. error vs finite differences {worst_fd:.2e} <= 1e-5, homogeneity {worst_hom:.2e} <= 1e-8"),
    )
}

fn parameter_recovery() -> Outcome {
    let t = Instant::now();
    let sites = SiteSet::grid(5, 5).unwrap();
    let risk = RiskFunctional::Site(12);
    let score_opts = FitOptions {
        riskf: risk.clone(),
        weights: WeightSpec::default(),
        ..FitOptions::default()
    };
    let hits: usize = (0..100u64)
        .into_par_iter()
        .map(|rep| {
            let (_, eps) = site_episodes(500, 1000 + rep);
            let r = fit(&eps, &sites, (1.0, 1.5), Objective::GradScore, &score_opts).unwrap();
            usize::from((0.85..=1.15).contains(&r.beta) && (1.35..=1.65).contains(&r.alpha))
        })
        .sum();
    let (_, big) = site_episodes(5000, 99);
    let gs = fit(&big, &sites, (1.0, 1.5), Objective::GradScore, &score_opts).unwrap();
    let ll = fit(&big, &sites, (1.0, 1.5), Objective::LogLik, &score_opts).unwrap();
    let rel = ((ll.beta - gs.beta) / gs.beta).abs().max(((ll.alpha - gs.alpha) / gs.alpha).abs());
    let elapsed = t.elapsed();
    outcome(
        hits >= 90 && rel <= 0.10 && within_time(elapsed, Duration::from_secs(300)),
        format!(
            "{hits}/100 score fits in bounds, score ({:.3}, {:.3}) vs loglik ({:.3}, {:.3}) differ by {:.1}% on 5000 episodes, {elapsed:.2?}",
            gs.beta,
            gs.alpha,
            ll.beta,
            ll.alpha,
            100.0 * rel
        ),
    )
}

fn margins_round_trip() -> Outcome {
    let mut rng = stream(9, 0);
    let n = 5000;
    let d = 4;
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    // GPD(σ = 1 + j, ξ = 0.2) shifted by j
                    j as f64 + (1.0 + j as f64) * ((1.0 - u).powf(-0.2) - 1.0) / 0.2
                })
                .collect()
        })
        .collect();
    let mut worst_rt = 0.0f64;
    let mut models = Vec::new();
    for (j, c) in cols.iter().enumerate() {
        let m = MarginalModel::fit(j.to_string(), c, 0.95, MarginMode::GpdTail).unwrap();
        for _ in 0..1000 {
            let z = 20.0 + 1000.0 * rng.random::<f64>();
            let back = m.to_standard_pareto(m.from_standard_pareto(z).unwrap());
            worst_rt = worst_rt.max((back - z).abs() / z);
            let x = m.u + 30.0 * rng.random::<f64>();
            let xb = m.from_standard_pareto(m.to_standard_pareto(x)).unwrap();
            worst_rt = worst_rt.max((xb - x).abs());
        }
        models.push(m);
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let data = DataMatrix::from_rows((0..d).map(|j| j.to_string()).collect(), rows, None).unwrap();
    let z = standardize(&data, models).unwrap();
    let mut worst_tail = 0.0f64;
    for j in 0..d {
        let col = z.data.column(j);
        for zz in [2.0, 5.0, 10.0] {
            let p = 1.0 / zz;
            let frac = col.iter().filter(|&&v| v > zz).count() as f64 / n as f64;
            worst_tail = worst_tail.max((frac - p).abs() / (p * (1.0 - p) / n as f64).sqrt());
        }
    }
    outcome(
        worst_rt <= 1e-8 && worst_tail <= 2.576,
        format!("round-trip error {worst_rt:.2e} <= 1e-8, tail check max |z| {worst_tail:.2} <= 2.576"),
    )
}

fn run_pipeline(bin: &Path, input: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let sites = input.join("sites.csv");
    let data = input.join("data.csv");
    let std = out.join("transform/standardized.csv");
    let fit_txt = out.join("fit/fit.txt");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["--sites".into(), path(&sites), "--risk".into(), "max".into(), "--n".into(), "200".into(), "--beta".into(), "4".into()]),
        ("transform", vec!["--sites".into(), path(&sites), "--data".into(), path(&data)]),
        ("fit", vec!["--sites".into(), path(&sites), "--data".into(), path(&std)]),
        ("diagnose", vec!["--sites".into(), path(&sites), "--data".into(), path(&data), "--fit".into(), path(&fit_txt), "--episodes".into(), path(&out.join("fit/fit_episodes.csv"))]),
    ];
    for (cmd, args) in steps {
        let status = Command::new(bin)
            .args(["--seed", "11", "--threads", &threads.to_string(), "--out-dir", &path(&out.join(cmd)), cmd])
            .args(&args)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{cmd} exited with {status}"));
        }
    }
    Ok(())
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in std::fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in std::fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let name = f.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            out.push((name, std::fs::read(&f).unwrap()));
        }
    }
    out.sort();
    out
}

fn end_to_end_determinism() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_rpareto"));
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    std::fs::create_dir_all(&input).unwrap();
    let (sites, data) = generate(&SyntheticSpec::default(), 2024).unwrap();
    save_sites(input.join("sites.csv"), &sites, None).unwrap();
    save_data(input.join("data.csv"), &data, None).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = run_pipeline(bin, &input, &a, 1).and_then(|_| run_pipeline(bin, &input, &b, 4)) {
        return outcome(false, e);
    }
    let (fa, fb) = (files(&a), files(&b));
    let same = fa == fb;
    let stamped = fa.iter().all(|(_, bytes)| bytes.starts_with(b"# seed=11 config=") || bytes.starts_with(b"<svg"));
    outcome(
        same && stamped && fa.len() >= 10,
        format!("{} output files byte-identical across runs with 1 and 4 threads: {same}", fa.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("radius law", radius_law),
        ("spectral normalization", spectral_normalization),
        ("POT-stability", pot_stability),
        ("homogeneity", homogeneity),
        ("cross-sampler oracle", cross_sampler),
        ("intensity oracle", intensity_oracle),
        ("parameter recovery", parameter_recovery),
        ("margins round trip", margins_round_trip),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.pass);
        println!("criterion {} {name}: {} ({})", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
