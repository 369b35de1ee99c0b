use proptest::prelude::*;
use rayon::prelude::*;

use rpareto::geometry::{DataMatrix, SiteSet};
use rpareto::inference::{gradient_score, rpareto_loglik, BrIntensity, WeightSpec};
use rpareto::margins::{MarginMode, MarginalModel, StandardizedMatrix};
use rpareto::rng::stream;
use rpareto::rpareto::{
    extract_episodes, risk_eval, BrownResnick, ParetoEpisode, RiskFunctional, DEFAULT_MAX_ITERS,
};
use rpareto::variogram::{gamma_matrix, VariogramModel};

fn power(beta: f64, alpha: f64) -> VariogramModel {
    VariogramModel::power(beta, alpha).unwrap()
}

fn site_ensemble(field: &BrownResnick, s0: usize, n: u64, seed: u64) -> Vec<ParetoEpisode> {
    (0..n)
        .into_par_iter()
        .map(|i| field.sample_simple_pareto_site(s0, &mut stream(seed, i)))
        .collect()
}

/// Log-density of N(mean, cov) through Gauss–Jordan elimination.
fn mvn_log_density(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut a: Vec<Vec<f64>> = cov
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            r
        })
        .collect();
    let mut log_det = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        log_det += piv.abs().ln();
        a[c].iter_mut().for_each(|v| *v /= piv);
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                let pivot_row = a[c].clone();
                a[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let quad: f64 = (0..n).map(|i| d[i] * (0..n).map(|j| a[i][n + j] * d[j]).sum::<f64>()).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

#[test]
fn site_loglik_factorizes_into_radial_and_gaussian_terms() {
    let sites = SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.5], [2.2, 1.0], [0.3, 1.7], [1.5, 2.5]]).unwrap();
    let model = power(1.3, 1.2);
    let s0 = 2;
    let field = BrownResnick::new(model, sites.clone()).unwrap();
    let eps = site_ensemble(&field, s0, 40, 17);
    let g = gamma_matrix(&model, &sites);
    let others: Vec<usize> = (0..5).filter(|&j| j != s0).collect();
    let cov: Vec<Vec<f64>> = others
        .iter()
        .map(|&i| others.iter().map(|&j| g[(i, s0)] + g[(j, s0)] - g[(i, j)]).collect())
        .collect();
    let mean: Vec<f64> = others.iter().map(|&j| -g[(j, s0)]).collect();
    let mut radial = 0.0;
    let mut gaussian = 0.0;
    for ep in &eps {
        radial -= 2.0 * ep.r.ln();
        let logs: Vec<f64> = others.iter().map(|&j| (ep.z[j] / ep.z[s0]).ln()).collect();
        gaussian += mvn_log_density(&logs, &mean, &cov) - others.iter().map(|&j| ep.y[j].ln()).sum::<f64>();
        gaussian -= (others.len() as f64) * ep.r.ln();
    }
    let br = BrIntensity::new(&model, &sites, s0).unwrap();
    let l = rpareto_loglik(&eps, &br, &RiskFunctional::Site(s0)).unwrap();
    assert!((l - (radial + gaussian)).abs() <= 1e-8 * l.abs().max(1.0), "{l} vs {}", radial + gaussian);
    let other_anchor = BrIntensity::new(&model, &sites, 0).unwrap();
    assert!((rpareto_loglik(&eps, &other_anchor, &RiskFunctional::Site(s0)).unwrap() - l).abs() <= 1e-8 * l.abs());
}

#[test]
fn true_parameters_score_in_the_bottom_of_a_grid() {
    let sites = SiteSet::grid(4, 4).unwrap();
    let field = BrownResnick::new(power(1.0, 1.5), sites.clone()).unwrap();
    let eps = site_ensemble(&field, 5, 1000, 21);
    let weights = WeightSpec::default();
    let score = |b: f64, a: f64| {
        gradient_score(&eps, &BrIntensity::new(&power(b, a), &sites, 0).unwrap(), &weights).unwrap()
    };
    let truth = score(1.0, 1.5);
    let grid: Vec<f64> = (0..21)
        .flat_map(|i| (0..21).map(move |k| (i, k)))
        .map(|(i, k)| score(0.5 * 4f64.powf(i as f64 / 20.0), 1.0 + 0.9 * k as f64 / 20.0))
        .collect();
    let below = grid.iter().filter(|&&v| v < truth).count();
    assert!(below as f64 <= 0.05 * grid.len() as f64, "{below} of {} grid points beat the truth", grid.len());
}

#[test]
fn conditioning_site_is_standard_pareto() {
    let field = BrownResnick::new(power(1.0, 1.5), SiteSet::grid(3, 3).unwrap()).unwrap();
    let n = 100_000;
    let eps = site_ensemble(&field, 4, n, 31);
    let p = eps.iter().filter(|e| e.z[4] > 3.0).count() as f64 / n as f64;
    let se = (2.0 / 9.0 / n as f64).sqrt();
    assert!((p - 1.0 / 3.0).abs() < 3.0 * se, "{p}");
}

fn any_risk(d: usize) -> impl Strategy<Value = RiskFunctional> {
    prop_oneof![
        (0..d).prop_map(RiskFunctional::Site),
        Just(RiskFunctional::Mean),
        Just(RiskFunctional::Max),
        Just(RiskFunctional::Min),
        (1..=d).prop_map(RiskFunctional::OrderStat),
        (0.3..4.0f64).prop_map(RiskFunctional::LpNorm),
        prop::collection::vec(0.05..1.0f64, d).prop_map(|w| {
            let s: f64 = w.iter().sum();
            RiskFunctional::WeightedSum(w.iter().map(|v| v / s).collect())
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_sampled_episode_is_normalized(
        riskf in any_risk(4),
        beta in 0.3..5.0f64,
        alpha in 0.2..1.9f64,
        seed in 0u64..1000,
    ) {
        let sites = SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.5], [2.0, 2.0]]).unwrap();
        let field = BrownResnick::new(power(beta, alpha), sites).unwrap();
        let mut rng = stream(seed, 0);
        for _ in 0..5 {
            let (ep, _) = field.sample_episode(&riskf, &mut rng, DEFAULT_MAX_ITERS).unwrap();
            prop_assert!(ep.r >= 1.0);
            prop_assert!((risk_eval(&riskf, &ep.y) - 1.0).abs() <= 1e-10);
            prop_assert!((risk_eval(&riskf, &ep.z) - ep.r).abs() <= 1e-10 * ep.r);
            for (z, y) in ep.z.iter().zip(&ep.y) {
                prop_assert!((z - ep.r * y).abs() <= 1e-12 * z.abs().max(1.0));
            }
        }
    }

    #[test]
    fn risk_is_one_homogeneous(
        riskf in any_risk(5),
        z in prop::collection::vec(0.0..50.0f64, 5),
        t in 0.01..100.0f64,
    ) {
        let scaled: Vec<f64> = z.iter().map(|v| t * v).collect();
        let (a, b) = (risk_eval(&riskf, &scaled), t * risk_eval(&riskf, &z));
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
    }

    #[test]
    fn log_intensity_homogeneity_and_anchor_exchange(
        z in prop::collection::vec(0.2..30.0f64, 4),
        t in 0.1..10.0f64,
        beta in 0.5..3.0f64,
        alpha in 0.3..1.9f64,
    ) {
        let sites = SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.2], [0.4, 1.3], [2.1, 1.9]]).unwrap();
        let model = power(beta, alpha);
        let base = BrIntensity::new(&model, &sites, 0).unwrap();
        let l = base.log_intensity(&z).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| t * v).collect();
        let lt = base.log_intensity(&scaled).unwrap();
        prop_assert!((lt - (l - 5.0 * t.ln())).abs() <= 1e-8 * l.abs().max(1.0));
        for anchor in 1..4 {
            let other = BrIntensity::new(&model, &sites, anchor).unwrap().log_intensity(&z).unwrap();
            prop_assert!((other - l).abs() <= 1e-10 * l.abs().max(1.0));
        }
    }

    #[test]
    fn marginal_transform_is_monotone(
        values in prop::collection::vec(-10.0..10.0f64, 60..200),
        probes in prop::collection::vec(-20.0..20.0f64, 2..20),
        q in 0.7..0.95f64,
    ) {
        let m = match MarginalModel::fit("s", &values, q, MarginMode::GpdTail) {
            Ok(m) => m,
            Err(_) => MarginalModel::fit("s", &values, q, MarginMode::Empirical).unwrap(),
        };
        let mut p = probes.clone();
        p.sort_by(f64::total_cmp);
        let cdf: Vec<f64> = p.iter().map(|&x| m.cdf(x)).collect();
        prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cdf.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!(p.iter().all(|&x| m.to_standard_pareto(x) >= 1.0));
    }

    #[test]
    fn extracted_episodes_exceed_the_threshold(
        rows in prop::collection::vec(prop::collection::vec(1.0..20.0f64, 3), 1..40),
        u in 1.0..15.0f64,
    ) {
        let n = rows.len();
        let data = DataMatrix::from_rows(vec!["a".into(), "b".into(), "c".into()], rows.clone(), None).unwrap();
        let z = StandardizedMatrix::assume_standardized(data).unwrap();
        let eps = extract_episodes(&z, &RiskFunctional::Mean, u).unwrap();
        let expected = rows.iter().filter(|r| r.iter().sum::<f64>() / 3.0 > u).count();
        prop_assert_eq!(eps.len(), expected);
        prop_assert!(eps.len() <= n);
        for ep in &eps {
            prop_assert!(ep.r > 1.0);
            prop_assert!((ep.y.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        }
    }
}
