//! Command-line front end: `simulate | transform | fit | diagnose | lift`.

mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigFile, Settings};

use crate::diagnostics::{
    chi_comparison, empirical_extremogram, extremogram_svg, pot_stability_report, save_extremogram,
    save_pot_report, DEFAULT_BINS, DEFAULT_PERMUTATIONS,
};
use crate::error::{Error, Result};
use crate::geometry::{load_data, load_sites, save_data, save_sites, DataMatrix, SiteSet};
use crate::inference::{fit, FitOptions, FitResult, Objective, WeightSpec};
use crate::margins::{fit_margins, save_margins, standardize, MarginMode, StandardizedMatrix, DEFAULT_Q};
use crate::rng::stream;
use crate::rpareto::{
    ensemble_metadata, extract_episodes, generalized_transform, lift_resample, load_episodes, save_episodes,
    save_metadata, simulate_ensemble, BrownResnick, GevMarginalMap, Origin, RiskFunctional, DEFAULT_MAX_ITERS,
};
use crate::stats::{plotting_quantile, sorted};
use crate::variogram::{Family, VariogramModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
/// `fit` refuses to run with fewer extracted episodes.
pub const MIN_EPISODES_FOR_FIT: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "rpareto", version, about = "Simulate, fit and check generalized r-Pareto processes")]
pub struct Cli {
    /// key=value file; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an ensemble of Pareto episodes
    Simulate(SimulateArgs),
    /// Fit per-site margins and standardize data to the Pareto scale
    Transform(TransformArgs),
    /// Extract episodes from standardized data and fit the variogram
    Fit(FitArgs),
    /// Empirical extremogram, model comparison and POT-stability checks
    Diagnose(DiagnoseArgs),
    /// Pair empirical angular episodes with fresh Pareto radii
    Lift(LiftArgs),
}

#[derive(Debug, Args)]
pub struct SiteArgs {
    /// Sites file with header id,x,y
    #[arg(long)]
    pub sites: Option<PathBuf>,
    /// Regular unit-spaced grid NXxNY, ids 1..NX*NY with x varying fastest
    #[arg(long)]
    pub grid: Option<String>,
    /// Treat x,y as longitude,latitude in degrees and project to km
    #[arg(long)]
    pub lonlat: bool,
}

#[derive(Debug, Args)]
pub struct VariogramArgs {
    /// power | bounded-exponential
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sites: SiteArgs,
    #[command(flatten)]
    pub variogram: VariogramArgs,
    /// site:<id> | mean | max | min | order:<k> | lp:<p> | weighted:w1,...,wD
    #[arg(long)]
    pub risk: Option<String>,
    /// Number of episodes
    #[arg(long)]
    pub n: Option<usize>,
    /// Rejection draws allowed per accepted episode
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Also write fields mapped through mu,sigma,xi
    #[arg(long)]
    pub gev: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub sites: SiteArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Marginal tail probability (threshold quantile)
    #[arg(long)]
    pub q: Option<f64>,
    /// Per-site override id=q (repeatable); config keys q.<id> work too
    #[arg(long = "site-q")]
    pub site_q: Vec<String>,
    /// gpd | empirical
    #[arg(long)]
    pub margins: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub sites: SiteArgs,
    /// Standardized data (standard Pareto margins)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub risk: Option<String>,
    /// Risk threshold; defaults to the empirical 0.95 quantile of row risks
    #[arg(long)]
    pub u: Option<f64>,
    /// gradscore | loglik
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub init_beta: Option<f64>,
    #[arg(long)]
    pub init_alpha: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// auto | marginal[:u] | risk[:u] | constant[:c]
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub sites: SiteArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated marginal quantile levels
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// fit.txt written by `fit`
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Episode file for the POT-stability report
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// Comma-separated risk levels above 1 for the POT-stability report
    #[arg(long)]
    pub pot_levels: Option<String>,
    #[arg(long)]
    pub permutations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// Number of lifted episodes
    #[arg(long)]
    pub k: Option<usize>,
    /// Tail index of the fresh radii
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

struct Context {
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let mut s = Settings::new(&file);
    let seed = s.or("seed", cli.seed, 1u64)?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => file
            .get("threads")
            .map(|v| v.parse::<usize>().map_err(|_| Error::invalid(format!("bad threads value `{v}`"))))
            .transpose()?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        // a pool may already exist when commands run in-process more than once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out_dir = cli
        .out_dir
        .or_else(|| file.get("out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ctx = Context { seed, out_dir };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&ctx, s, a),
        Command::Transform(a) => cmd_transform(&ctx, s, a),
        Command::Fit(a) => cmd_fit(&ctx, s, a),
        Command::Diagnose(a) => cmd_diagnose(&ctx, s, a),
        Command::Lift(a) => cmd_lift(&ctx, s, a),
    }
}

fn stamp(ctx: &Context, s: &Settings) -> String {
    format!("seed={} config={}", ctx.seed, s.hash())
}

fn resolve_sites(s: &mut Settings, a: SiteArgs) -> Result<SiteSet> {
    let path = s.input("sites", a.sites)?;
    let grid: Option<String> = s.opt("grid", a.grid)?;
    let lonlat = s.flag("lonlat", a.lonlat)?;
    let sites = match (path, grid) {
        (Some(p), None) => load_sites(p)?,
        (None, Some(g)) => {
            let (nx, ny) = g
                .to_ascii_lowercase()
                .split_once('x')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| Error::invalid(format!("grid must look like 20x20, got `{g}`")))?;
            SiteSet::grid(nx, ny)?
        }
        (Some(_), Some(_)) => return Err(Error::invalid("give either --sites or --grid, not both")),
        (None, None) => return Err(Error::invalid("a site set is required (--sites or --grid)")),
    };
    if lonlat {
        sites.project_lonlat()
    } else {
        Ok(sites)
    }
}

fn resolve_model(s: &mut Settings, a: VariogramArgs) -> Result<VariogramModel> {
    let family: Family = s.or("family", a.family, "power".to_string())?.parse()?;
    let beta = s.or("beta", a.beta, 1.0)?;
    let alpha = s.or("alpha", a.alpha, 1.5)?;
    VariogramModel::new(family, beta, alpha)
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::invalid(format!("{what}: cannot parse `{v}`")))
        })
        .collect()
}

fn cmd_simulate(ctx: &Context, mut s: Settings, a: SimulateArgs) -> Result<()> {
    let sites = resolve_sites(&mut s, a.sites)?;
    let model = resolve_model(&mut s, a.variogram)?;
    let risk_text = s.or("risk", a.risk, "mean".to_string())?;
    let riskf = RiskFunctional::parse(&risk_text, &sites)?;
    let n = s.or("n", a.n, 1usize)?;
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let max_iters = s.or("max_iters", a.max_iters, DEFAULT_MAX_ITERS)?;
    let gev = match s.opt::<String>("gev", a.gev)? {
        Some(g) => {
            let p = parse_list(&g, "gev")?;
            if p.len() != 3 {
                return Err(Error::invalid("gev takes mu,sigma,xi"));
            }
            Some(GevMarginalMap::constant(sites.len(), p[0], p[1], p[2])?)
        }
        None => None,
    };
    let comment = stamp(ctx, &s);

    let field = BrownResnick::new(model, sites.clone())?;
    let ens = simulate_ensemble(&field, &riskf, n, ctx.seed, max_iters)?;
    log::info!("{}", crate::rpareto::summarize(&ens));

    save_sites(ctx.out("sites.csv"), &sites, Some(&comment))?;
    save_episodes(ctx.out("episodes.csv"), sites.ids(), &ens.episodes, Some(&comment))?;
    let extra = vec![
        ("family".to_string(), model.family().to_string()),
        ("beta".to_string(), crate::csvio::fmt_f64(model.beta())),
        ("alpha".to_string(), crate::csvio::fmt_f64(model.alpha())),
        ("dominating_constant".to_string(), crate::csvio::fmt_f64(riskf.dominating_constant(sites.len()))),
        ("origin".to_string(), Origin::Parametric.as_str().to_string()),
    ];
    save_metadata(
        ctx.out("episodes.meta"),
        Some(&comment),
        &ensemble_metadata(&riskf.describe(&sites), ctx.seed, &ens, &extra),
    )?;
    let labels: Vec<String> = ens.episodes.iter().map(|e| e.label.clone()).collect();
    let fields = DataMatrix::from_rows(
        sites.ids().to_vec(),
        ens.episodes.iter().map(|e| e.z.clone()).collect(),
        Some(labels.clone()),
    )?;
    save_data(ctx.out("fields.csv"), &fields, Some(&comment))?;
    if let Some(map) = gev {
        let rows = ens
            .episodes
            .iter()
            .map(|e| generalized_transform(e, &map))
            .collect::<Result<Vec<_>>>()?;
        let g = DataMatrix::from_rows(sites.ids().to_vec(), rows, Some(labels))?;
        save_data(ctx.out("generalized.csv"), &g, Some(&comment))?;
    }
    Ok(())
}

fn cmd_transform(ctx: &Context, mut s: Settings, a: TransformArgs) -> Result<()> {
    let sites = resolve_sites(&mut s, a.sites)?;
    let data_path = s.required_input("data", a.data)?;
    let q = s.or("q", a.q, DEFAULT_Q)?;
    let mode = match s.or("margins", a.margins, "gpd".to_string())?.as_str() {
        "gpd" => MarginMode::GpdTail,
        "empirical" => MarginMode::Empirical,
        other => return Err(Error::invalid(format!("unknown margins mode `{other}` (gpd | empirical)"))),
    };
    let mut overrides: HashMap<String, f64> = HashMap::new();
    let from_file = s.file().with_prefix("q");
    let from_flags = a.site_q.iter().map(|kv| {
        kv.split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| Error::invalid(format!("--site-q takes id=q, got `{kv}`")))
    });
    for pair in from_file.into_iter().map(Ok).chain(from_flags) {
        let (id, v) = pair?;
        if sites.index_of(&id).is_none() {
            return Err(Error::invalid(format!("q override for unknown site `{id}`")));
        }
        let v: f64 = v.parse().map_err(|_| Error::invalid(format!("bad q override `{v}` for `{id}`")))?;
        s.note(&format!("q.{id}"), v);
        overrides.insert(id, v);
    }
    let comment = stamp(ctx, &s);

    let data = load_data(&data_path, &sites)?;
    let margins = fit_margins(&data, q, &overrides, mode)?;
    save_margins(ctx.out("margins.csv"), ctx.out("margins_body.csv"), &margins, Some(&comment))?;
    let z = standardize(&data, margins)?;
    save_data(ctx.out("standardized.csv"), &z.data, Some(&comment))?;
    Ok(())
}

fn default_weights(riskf: &RiskFunctional) -> Result<WeightSpec> {
    match riskf {
        RiskFunctional::Site(_) | RiskFunctional::Max => Ok(WeightSpec::default()),
        other => WeightSpec::risk(other, 1.0),
    }
}

fn cmd_fit(ctx: &Context, mut s: Settings, a: FitArgs) -> Result<()> {
    let sites = resolve_sites(&mut s, a.sites)?;
    let data_path = s.required_input("data", a.data)?;
    let riskf = RiskFunctional::parse(&s.or("risk", a.risk, "max".to_string())?, &sites)?;
    let objective: Objective = s.or("objective", a.objective, "gradscore".to_string())?.parse()?;
    let family: Family = s.or("family", a.family, "power".to_string())?.parse()?;
    let init = (s.or("init_beta", a.init_beta, 1.0)?, s.or("init_alpha", a.init_alpha, 1.0)?);
    let max_iters = s.or("max_iters", a.max_iters, 2000usize)?;
    let weights = match s.or("weights", a.weights, "auto".to_string())?.as_str() {
        "auto" => default_weights(&riskf)?,
        other => WeightSpec::parse(other, &riskf)?,
    };
    let u_flag = s.opt("u", a.u)?;

    let data = StandardizedMatrix::assume_standardized(load_data(&data_path, &sites)?)?;
    let u = match u_flag {
        Some(u) => u,
        None => {
            let risks: Vec<f64> = data
                .data
                .complete_rows()
                .into_iter()
                .map(|i| riskf.eval(data.data.row(i)))
                .collect();
            if risks.is_empty() {
                return Err(Error::invalid("no complete rows in the data"));
            }
            let u = plotting_quantile(&sorted(&risks), 0.95);
            s.note("u", u);
            u
        }
    };
    let comment = stamp(ctx, &s);
    let episodes = extract_episodes(&data, &riskf, u)?;
    if episodes.len() < MIN_EPISODES_FOR_FIT {
        return Err(Error::invalid(format!(
            "only {} rows exceed the risk threshold u={u}; at least {MIN_EPISODES_FOR_FIT} are needed, lower --u",
            episodes.len()
        )));
    }
    let opts = FitOptions {
        family,
        max_iters,
        weights,
        riskf,
        u,
        anchor: 0,
    };
    let result = fit(&episodes, &sites, init, objective, &opts)?;
    if !result.converged {
        log::warn!("fit stopped at the iteration cap ({max_iters}) without converging");
    }
    result.save_kv(ctx.out("fit.txt"), Some(&comment))?;
    result.save_csv(ctx.out("fit.csv"), Some(&comment))?;
    save_episodes(ctx.out("fit_episodes.csv"), sites.ids(), &episodes, Some(&comment))?;
    Ok(())
}

fn cmd_diagnose(ctx: &Context, mut s: Settings, a: DiagnoseArgs) -> Result<()> {
    let sites = resolve_sites(&mut s, a.sites)?;
    let data_path = s.required_input("data", a.data)?;
    let thresholds = parse_list(&s.or("thresholds", a.thresholds, "0.95,0.98".to_string())?, "thresholds")?;
    let bins = s.or("bins", a.bins, DEFAULT_BINS)?;
    let fit_path = s.input("fit", a.fit)?;
    let episodes_path = s.input("episodes", a.episodes)?;
    let pot_levels = parse_list(&s.or("pot_levels", a.pot_levels, "2,5".to_string())?, "pot_levels")?;
    let n_perm = s.or("permutations", a.permutations, DEFAULT_PERMUTATIONS)?;
    let comment = stamp(ctx, &s);

    let data = load_data(&data_path, &sites)?;
    let model = match &fit_path {
        Some(p) => Some(FitResult::load_kv(p)?.model()?),
        None => None,
    };
    let mut rows = Vec::new();
    for &margp in &thresholds {
        let table = empirical_extremogram(&data, &sites, margp, bins)?;
        rows.extend(chi_comparison(model.as_ref(), &table)?);
    }
    save_extremogram(ctx.out("extremogram.csv"), &rows, Some(&comment))?;
    let svg_path = ctx.out("extremogram.svg");
    std::fs::write(&svg_path, extremogram_svg(&rows, model.as_ref(), Some(&comment))).map_err(|e| Error::io(&svg_path, e))?;

    if let Some(p) = episodes_path {
        let (ids, episodes) = load_episodes(&p, Origin::Empirical)?;
        let report = pot_stability_report(&episodes, &pot_levels, n_perm, ctx.seed)?;
        save_pot_report(ctx.out("pot_stability.csv"), &ids, &report, Some(&comment))?;
    }
    Ok(())
}

fn cmd_lift(ctx: &Context, mut s: Settings, a: LiftArgs) -> Result<()> {
    let path = s.required_input("episodes", a.episodes)?;
    let k = s.required::<usize>("k", a.k)?;
    let alpha = s.or("alpha", a.alpha, 1.0)?;
    let comment = stamp(ctx, &s);
    let (ids, episodes) = load_episodes(&path, Origin::Empirical)?;
    if episodes.is_empty() {
        return Err(Error::invalid(format!("{} contains no episodes", path.display())));
    }
    let lifted = lift_resample(&episodes, k, &mut stream(ctx.seed, 0), alpha)?;
    save_episodes(ctx.out("lifted.csv"), &ids, &lifted, Some(&comment))
}
