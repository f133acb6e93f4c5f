//! The end-to-end pipeline: market paths, coefficient samples, limit and
//! particle losses, tranche prices, and the run directory.
//!
//! Every task (a market path, a coefficient sample, a particle replica)
//! draws from its own stream and results are placed by task index, so the
//! output does not depend on the number of workers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cir::VarianceLaw;
use crate::config::{CoeffCheck, Mode, RunConfig, TrancheSpec};
use crate::error::{Error, Result};
use crate::field::{DensityField, Grid1D, Grid2D};
use crate::io;
use crate::model::{compute_rho, CoeffVector};
use crate::particles::{
    empirical_measure_at, gen_market_path, histogram2d, simulate_portfolio, EmpiricalMeasure, LossCurve, MarketPath,
    ParticleState, Portfolio, PositionLaw, SimOptions, Trajectories,
};
use crate::rng::{derive_seed, stream};
use crate::smoothing::{kde_absorbed, smoothing_ladder, SmoothingReport, ZSamples};
use crate::spde1d::{energy_identity_residual, loss_1d, solve_1d, Density1D, EnergyResidual, VolPath};
use crate::spde2d::{initial_field, node_density, solve_spde2d, Diagnostics2D};
use crate::util::{mean_stderr, par_map};

/// Systemic path `k` of the run.
pub fn market_path(cfg: &RunConfig, k: usize) -> Result<MarketPath> {
    gen_market_path(&cfg.global, cfg.steps, &mut stream(cfg.seeds.resolve().market, k as u64))
}

/// The configured initial field, or the product of the initial laws.
pub fn initial_density(cfg: &RunConfig, grid: &Grid2D) -> Result<DensityField> {
    match &cfg.init_field {
        Some(p) => {
            let u = io::load_field(Path::new(p))?;
            if u.grid != *grid {
                return Err(Error::validation("init_field", "dump grid differs from the configured grid"));
            }
            Ok(u)
        }
        None => initial_field(grid, &cfg.init),
    }
}

/// Pointwise average of curves on a common time grid, summed in index order.
pub fn average_curves(curves: &[LossCurve]) -> Result<LossCurve> {
    let first = curves.first().ok_or_else(|| Error::Contract("no curves to average".into()))?;
    if curves.iter().any(|c| c.times != first.times) {
        return Err(Error::Contract("curves live on different time grids".into()));
    }
    let n = curves.len() as f64;
    let values = (0..first.times.len()).map(|m| curves.iter().map(|c| c.values[m]).sum::<f64>() / n).collect();
    Ok(LossCurve { times: first.times.clone(), values })
}

#[derive(Debug, Clone)]
pub struct LimitLoss {
    pub mean: LossCurve,
    pub samples: Vec<LossCurve>,
    pub coeffs: Vec<CoeffVector>,
    pub diagnostics: Vec<Diagnostics2D>,
    /// Sample-averaged fields at the recorded steps.
    pub fields: Vec<DensityField>,
}

/// Solves the limit equation for every coefficient sample on `mp` and
/// averages the losses. `path` only labels errors.
pub fn estimate_limit_loss(cfg: &RunConfig, mp: &MarketPath, path: usize, record_steps: &[usize]) -> Result<LimitLoss> {
    let coeffs = cfg.coeff_samples()?;
    let grid = cfg.grid_for(&coeffs)?;
    let u0 = initial_density(cfg, &grid)?;
    let solves = par_map(coeffs.len(), |i| {
        let c = &coeffs[i];
        solve_spde2d(&u0, c, &cfg.global, compute_rho(c, &cfg.global), mp, &cfg.scheme, record_steps, None).map_err(
            |e| Error::Task {
                task: format!("limit solve for coefficient sample {i} on market path {path}"),
                seed: cfg.seeds.master,
                source: Box::new(e),
            },
        )
    });
    let solves: Vec<_> = solves.into_iter().collect::<Result<_>>()?;
    let samples: Vec<LossCurve> = solves.iter().map(|s| s.loss.clone()).collect();
    let mean = average_curves(&samples)?;
    let n = solves.len() as f64;
    let fields = (0..solves[0].snapshots.len())
        .map(|k| {
            let mut f = DensityField::zeros(grid);
            f.t = solves[0].snapshots[k].t;
            for s in &solves {
                f.add_assign(&s.snapshots[k]);
            }
            f.values.iter_mut().for_each(|v| *v /= n);
            f
        })
        .collect();
    Ok(LimitLoss { mean, samples, coeffs, diagnostics: solves.into_iter().map(|s| s.diagnostics).collect(), fields })
}

pub fn portfolio(cfg: &RunConfig, n: usize) -> Portfolio {
    Portfolio { n, coeffs: cfg.coeff.clone(), init: cfg.init, global: cfg.global.clone(), validation: cfg.validation }
}

/// Particle seed of replica `r`; replica 0 is the run's own seed.
pub fn replica_seed(cfg: &RunConfig, r: usize) -> u64 {
    let base = cfg.seeds.resolve().particles;
    if r == 0 {
        base
    } else {
        derive_seed(base, &format!("replica-{r}"))
    }
}

/// Simulates `n` particles on `mp` with the seed of replica `r`.
pub fn run_particles(
    cfg: &RunConfig,
    mp: &MarketPath,
    n: usize,
    r: usize,
    record_steps: &[usize],
    observer: Option<&mut dyn FnMut(usize, &[ParticleState], &[CoeffVector])>,
) -> Result<Trajectories> {
    let opts = SimOptions { record_steps: record_steps.to_vec(), stream_ids: None };
    let seed = replica_seed(cfg, r);
    simulate_portfolio(&portfolio(cfg, n), mp, cfg.seeds.resolve().coeffs, seed, &opts, observer)
        .map_err(|e| Error::Task { task: format!("particle run N = {n}, replica {r}"), seed, source: Box::new(e) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveGap {
    pub linf: f64,
    /// `sqrt(int (a - b)^2 dt)`.
    pub l2: f64,
    pub terminal: f64,
}

pub fn curve_gap(a: &LossCurve, b: &LossCurve) -> Result<CurveGap> {
    if a.times != b.times {
        return Err(Error::Contract("curves live on different time grids".into()));
    }
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let linf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2 = a
        .times
        .windows(2)
        .zip(d.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] * v[0] + v[1] * v[1]))
        .sum::<f64>()
        .sqrt();
    Ok(CurveGap { linf, l2, terminal: d.last().map_or(0.0, |v| v.abs()) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGap {
    pub t: f64,
    /// `int |histogram - u|` on the solver grid.
    pub l1_2d: f64,
    /// Particle mass outside the grid.
    pub spill: f64,
    /// `int |kde(x) - int u dy|`.
    pub l1_x_marginal: f64,
    pub bandwidth: f64,
}

pub fn density_gap(m: &EmpiricalMeasure, u: &DensityField) -> Result<DensityGap> {
    let (hist, spill) = histogram2d(m, &u.grid)?;
    let l1_2d = hist.l1_distance(u)?;
    let g1 = Grid1D { xmax: u.grid.xmax, cells: u.grid.nx };
    let xs: Vec<f64> = m.survivors.iter().map(|p| p.0).collect();
    let mx = u.marginal_x();
    let (l1_x_marginal, bandwidth) = if xs.is_empty() {
        ((0..g1.nodes()).map(|i| g1.weight(i) * mx[i].abs()).sum(), 0.0)
    } else {
        let k = kde_absorbed(&xs, m.n, None, &g1)?;
        ((0..g1.nodes()).map(|i| g1.weight(i) * (k.density[i] - mx[i]).abs()).sum(), k.bandwidth)
    };
    Ok(DensityGap { t: m.t, l1_2d, spill, l1_x_marginal, bandwidth })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub n: usize,
    pub replicas: usize,
    /// Root mean square over replicas of the sup-norm loss gap.
    pub rms_linf_gap: f64,
    pub mean_terminal_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub n_particles: usize,
    pub gap: CurveGap,
    pub terminal_particle: f64,
    pub terminal_spde: f64,
    pub density: Vec<DensityGap>,
    pub ladder: Vec<LadderRow>,
    pub decreasing_pairs: usize,
    pub pairs: usize,
    /// At least two thirds of consecutive ladder pairs decrease.
    pub trend_ok: bool,
    pub spde_diagnostics: Vec<Diagnostics2D>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: CompareReport,
    pub market: MarketPath,
    pub particles: Trajectories,
    pub limit: LimitLoss,
}

/// The LLN table: for each size, the gap to `target` averaged over
/// `max(1, budget / n)` independent particle replicas.
pub fn lln_ladder(
    cfg: &RunConfig,
    mp: &MarketPath,
    target: &LossCurve,
    sizes: &[usize],
    budget: usize,
) -> Result<Vec<LadderRow>> {
    sizes
        .iter()
        .map(|&n| {
            let replicas = (budget / n).max(1);
            let mut sq = 0.0;
            let mut terminal = 0.0;
            for r in 0..replicas {
                let tr = run_particles(cfg, mp, n, r, &[], None)?;
                let g = curve_gap(&tr.loss, target)?;
                sq += g.linf * g.linf;
                terminal += tr.loss.terminal();
            }
            Ok(LadderRow {
                n,
                replicas,
                rms_linf_gap: (sq / replicas as f64).sqrt(),
                mean_terminal_loss: terminal / replicas as f64,
            })
        })
        .collect()
}

fn require_mode(cfg: &RunConfig, allowed: &[Mode], what: &str) -> Result<()> {
    if allowed.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(Error::validation("mode", format!("{what} needs mode {allowed:?}, config has {:?}", cfg.mode)))
    }
}

/// Particle and limit losses on the same market path.
pub fn compare_particle_vs_spde(cfg: &RunConfig) -> Result<Comparison> {
    require_mode(cfg, &[Mode::Both], "compare")?;
    let record = cfg.record_steps()?;
    let mp = market_path(cfg, 0)?;
    let limit = estimate_limit_loss(cfg, &mp, 0, &record)?;
    let particles = run_particles(cfg, &mp, cfg.n_particles, 0, &record, None)?;
    let gap = curve_gap(&particles.loss, &limit.mean)?;
    let density = limit
        .fields
        .iter()
        .map(|u| density_gap(&empirical_measure_at(&particles, u.t)?, u))
        .collect::<Result<Vec<_>>>()?;
    let ladder = lln_ladder(cfg, &mp, &limit.mean, &cfg.n_ladder, cfg.ladder_budget)?;
    let pairs = ladder.len().saturating_sub(1);
    let decreasing_pairs = ladder.windows(2).filter(|w| w[1].rms_linf_gap < w[0].rms_linf_gap).count();
    let report = CompareReport {
        n_particles: cfg.n_particles,
        gap,
        terminal_particle: particles.loss.terminal(),
        terminal_spde: limit.mean.terminal(),
        density,
        ladder,
        decreasing_pairs,
        pairs,
        trend_ok: 3 * decreasing_pairs >= 2 * pairs,
        spde_diagnostics: limit.diagnostics.clone(),
    };
    Ok(Comparison { report, market: mp, particles, limit })
}

/// `clamp((L - a) / (d - a), 0, 1)`.
pub fn tranche_payoff(loss: f64, tr: &TrancheSpec) -> f64 {
    ((loss - tr.attachment) / (tr.detachment - tr.attachment)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranchePrice {
    pub tranche: TrancheSpec,
    pub n_market_paths: usize,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Monte Carlo over independent market paths of the tranche payoff of the
/// limit loss. Also returns each path's limit loss.
pub fn price_tranche(cfg: &RunConfig, tr: &TrancheSpec, n_paths: usize) -> Result<(TranchePrice, Vec<LimitLoss>)> {
    tr.validate()?;
    if n_paths < 2 {
        return Err(Error::validation("n_market_paths", "pricing needs at least two market paths"));
    }
    let losses = par_map(n_paths, |k| estimate_limit_loss(cfg, &market_path(cfg, k)?, k, &[]));
    let losses: Vec<LimitLoss> = losses.into_iter().collect::<Result<_>>()?;
    let times = losses[0].mean.times.clone();
    let (mut mean, mut stderr) = (Vec::with_capacity(times.len()), Vec::with_capacity(times.len()));
    for m in 0..times.len() {
        let pay: Vec<f64> = losses.iter().map(|l| tranche_payoff(l.mean.values[m], tr)).collect();
        let (a, s) = mean_stderr(&pay);
        mean.push(a);
        stderr.push(s);
    }
    Ok((TranchePrice { tranche: *tr, n_market_paths: n_paths, times, mean, stderr }, losses))
}

/// The coefficient vector driving the one-dimensional and smoothing runs.
fn lead_coeff(cfg: &RunConfig) -> Result<CoeffVector> {
    Ok(cfg.coeff_samples()?[0])
}

fn sigma_mean(law: &VarianceLaw) -> f64 {
    match *law {
        VarianceLaw::Point { value } => value,
        VarianceLaw::Gamma { shape, scale } => shape * scale,
    }
}

#[derive(Debug, Clone)]
pub struct Run1D {
    pub loss: LossCurve,
    pub residual: EnergyResidual,
    pub series: crate::spde1d::Series1D,
    pub vol: VolPath,
}

/// One-dimensional solve on market path `k`.
pub fn run_spde1d(cfg: &RunConfig, k: usize) -> Result<Run1D> {
    let spec = cfg.spde1d.as_ref().ok_or_else(|| Error::validation("spde1d", "section missing from the config"))?;
    let c = lead_coeff(cfg)?;
    let grid = Grid1D::new(spec.xmax, spec.cells)?;
    let point = match cfg.init.x {
        PositionLaw::Point { value } => Some(value),
        _ => None,
    };
    let values =
        node_density(grid.cells, grid.dx(), point, |x| cfg.init.x.density(x).unwrap_or(0.0), |_, _| 0.0, "init.x")?;
    let mut u0 = Density1D { grid, t: 0.0, values };
    u0.values[0] = 0.0;
    u0.values[grid.cells] = 0.0;
    let vol = match &spec.vol {
        Some(v) => v.clone(),
        None => {
            let h = cfg.global.h.value(sigma_mean(&cfg.init.sigma));
            VolPath::constant(h * h, cfg.global.horizon)
        }
    };
    let mp = market_path(cfg, k)?;
    let series = solve_1d(&u0, &vol, c.r, c.rho1, &mp, &spec.scheme).map_err(|e| Error::Task {
        task: format!("one-dimensional solve on market path {k}"),
        seed: cfg.seeds.master,
        source: Box::new(e),
    })?;
    let residual = energy_identity_residual(&series, &vol, c.rho1);
    Ok(Run1D { loss: loss_1d(&series), residual, series, vol })
}

/// Smoothing ladder on the variance transition density of the lead
/// coefficient vector, started from the mean initial variance.
pub fn run_smoothing(cfg: &RunConfig) -> Result<SmoothingReport> {
    let spec =
        cfg.smoothing.as_ref().ok_or_else(|| Error::validation("smoothing", "section missing from the config"))?;
    let c = lead_coeff(cfg)?;
    let s0 = sigma_mean(&cfg.init.sigma);
    let t = cfg.global.horizon;
    let u = ZSamples::from_fn(spec.ymax * spec.ymax, spec.z_points, |z| crate::cir::cir_density(&c, s0, t, z))?;
    smoothing_ladder(&u, &Grid1D::new(spec.ymax, spec.cells)?, &spec.eps, &spec.deltas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateParticles,
    SolveSpde1d,
    SolveSpde2d,
    Compare,
    SmoothDiagnostics,
    PriceTranche,
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateParticles => "simulate-particles",
            Command::SolveSpde1d => "solve-spde1d",
            Command::SolveSpde2d => "solve-spde2d",
            Command::Compare => "compare",
            Command::SmoothDiagnostics => "smooth-diagnostics",
            Command::PriceTranche => "price-tranche",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub config_hash: String,
    pub checks: Vec<CoeffCheck>,
}

pub fn validate_config(cfg: &RunConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    Ok(ValidationReport { config_hash: cfg.hash(), checks: cfg.checks()? })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: serde_json::Value,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    run_name: String,
    seeds: crate::rng::SeedSet,
    master_seed: u64,
    crate_version: &'static str,
    /// The only field allowed to differ between identical runs.
    created_unix: u64,
}

struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn file(&self, name: &str, text: &str) -> Result<()> {
        io::write_text(&self.dir.join(name), text)
    }

    fn json(&self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.file(name, &text)
    }
}

fn mean_columns(curves: &[LossCurve]) -> Result<String> {
    let header: Vec<String> =
        std::iter::once("t".to_string()).chain((0..curves.len()).map(|k| format!("L_{k}"))).collect();
    let mut cols: Vec<&[f64]> = vec![&curves[0].times];
    cols.extend(curves.iter().map(|c| c.values.as_slice()));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    io::columns_csv(&h, &cols)
}

fn write_limit(out: &RunDir, k: usize, limit: &LimitLoss, record: &[usize], snapshots: bool) -> Result<()> {
    for (i, l) in limit.samples.iter().enumerate() {
        out.file(&format!("loss_{k}_{i}.csv"), &io::loss_csv(l))?;
    }
    if snapshots {
        for (f, step) in limit.fields.iter().zip(record) {
            out.file(&format!("field_{k}_{step}.csv"), &io::field_csv(f))?;
            io::save_field(f, &out.dir.join(format!("field_{k}_{step}.bin")))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LimitSummary<'a> {
    coeffs: &'a [CoeffVector],
    terminal_loss: Vec<f64>,
    mean_terminal_loss: f64,
    diagnostics: &'a [Diagnostics2D],
}

fn limit_summary(l: &LimitLoss) -> LimitSummary<'_> {
    LimitSummary {
        coeffs: &l.coeffs,
        terminal_loss: l.samples.iter().map(LossCurve::terminal).collect(),
        mean_terminal_loss: l.mean.terminal(),
        diagnostics: &l.diagnostics,
    }
}

fn trajectories_csv(cfg: &RunConfig, mp: &MarketPath, k: usize, record: &[usize]) -> Result<(Trajectories, String)> {
    let mut text = String::from("t,id,x,sigma,defaulted\n");
    let times = mp.times.clone();
    let mut obs = |m: usize, states: &[ParticleState], _: &[CoeffVector]| {
        use std::fmt::Write as _;
        for (i, p) in states.iter().enumerate() {
            let _ = writeln!(text, "{},{},{},{},{}", times[m], i, p.x, p.sigma, u8::from(p.defaulted));
        }
    };
    let tr = run_particles(cfg, mp, cfg.n_particles, 0, record, Some(&mut obs)).map_err(|e| Error::Task {
        task: format!("trajectory export on market path {k}"),
        seed: cfg.seeds.master,
        source: Box::new(e),
    })?;
    Ok((tr, text))
}

/// Runs `cmd` and writes its run directory under `out_root`, named by the
/// config hash. `validate` writes nothing.
pub fn execute(cfg: &RunConfig, cmd: Command, out_root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    if cmd == Command::Validate {
        let report = validate_config(cfg)?;
        return Ok(RunOutcome {
            dir: PathBuf::new(),
            report: serde_json::to_value(report).map_err(|e| Error::Io(e.to_string()))?,
        });
    }
    // Fail on missing sections and incompatible modes before any work.
    let needs = |present: bool, key: &str| {
        if present {
            Ok(())
        } else {
            Err(Error::validation(key, "section missing from the config"))
        }
    };
    match cmd {
        Command::SimulateParticles => require_mode(cfg, &[Mode::Particles, Mode::Both], cmd.name())?,
        Command::SolveSpde2d => require_mode(cfg, &[Mode::Spde, Mode::Both], cmd.name())?,
        Command::PriceTranche => {
            require_mode(cfg, &[Mode::Spde, Mode::Both], cmd.name())?;
            needs(cfg.tranche.is_some(), "tranche")?;
        }
        Command::Compare => require_mode(cfg, &[Mode::Both], cmd.name())?,
        Command::SolveSpde1d => needs(cfg.spde1d.is_some(), "spde1d")?,
        Command::SmoothDiagnostics => needs(cfg.smoothing.is_some(), "smoothing")?,
        Command::Validate => {}
    }

    let dir = out_root.join(cfg.run_name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let out = RunDir { dir: dir.clone() };
    let mut config_text = cfg.to_json();
    config_text.push('\n');
    out.file("config.json", &config_text)?;
    let created_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    out.json(
        "manifest.json",
        &Manifest {
            command: cmd.name(),
            config_hash: cfg.hash(),
            run_name: cfg.run_name(),
            seeds: cfg.seeds.resolve(),
            master_seed: cfg.seeds.master,
            crate_version: env!("CARGO_PKG_VERSION"),
            created_unix,
        },
    )?;
    let record = cfg.record_steps()?;
    let paths = match cmd {
        Command::SmoothDiagnostics => 0,
        Command::Compare => 1,
        _ => cfg.n_market_paths,
    };
    if cfg.output.market_paths {
        for k in 0..paths {
            out.file(&format!("market_path_{k}.csv"), &io::market_path_csv(&market_path(cfg, k)?))?;
        }
    }

    let report = match cmd {
        Command::SimulateParticles => {
            let runs = par_map(paths, |k| -> Result<(Trajectories, Option<String>)> {
                let mp = market_path(cfg, k)?;
                if cfg.output.trajectories {
                    let (tr, text) = trajectories_csv(cfg, &mp, k, &record)?;
                    Ok((tr, Some(text)))
                } else {
                    Ok((run_particles(cfg, &mp, cfg.n_particles, 0, &record, None)?, None))
                }
            });
            let mut terminal = Vec::new();
            for (k, r) in runs.into_iter().enumerate() {
                let (tr, text) = r?;
                out.file(&format!("particles_loss_{k}.csv"), &io::loss_csv(&tr.loss))?;
                if let Some(t) = text {
                    out.file(&format!("trajectories_{k}.csv"), &t)?;
                }
                terminal.push(tr.loss.terminal());
            }
            serde_json::json!({ "n_particles": cfg.n_particles, "terminal_loss": terminal })
        }
        Command::SolveSpde2d => {
            let limits = par_map(paths, |k| estimate_limit_loss(cfg, &market_path(cfg, k)?, k, &record));
            let limits: Vec<LimitLoss> = limits.into_iter().collect::<Result<_>>()?;
            for (k, l) in limits.iter().enumerate() {
                write_limit(&out, k, l, &record, cfg.output.snapshots)?;
            }
            let means: Vec<LossCurve> = limits.iter().map(|l| l.mean.clone()).collect();
            out.file("loss_mean.csv", &mean_columns(&means)?)?;
            serde_json::json!({ "paths": limits.iter().map(limit_summary).collect::<Vec<_>>() })
        }
        Command::SolveSpde1d => {
            let runs = par_map(paths, |k| run_spde1d(cfg, k));
            let mut summary = Vec::new();
            for (k, r) in runs.into_iter().enumerate() {
                let r = r?;
                out.file(&format!("loss_1d_{k}.csv"), &io::loss_csv(&r.loss))?;
                out.file(
                    &format!("energy_residual_{k}.csv"),
                    &io::columns_csv(&["t", "R"], &[&r.residual.times, &r.residual.values])?,
                )?;
                if cfg.output.snapshots {
                    let xs: Vec<f64> = (0..r.series.grid.nodes()).map(|i| r.series.grid.x(i)).collect();
                    for &s in &record {
                        out.file(
                            &format!("density1d_{k}_{s}.csv"),
                            &io::columns_csv(&["x", "u"], &[&xs, &r.series.values[s]])?,
                        )?;
                    }
                }
                summary.push(serde_json::json!({
                    "terminal_loss": r.loss.terminal(),
                    "max_abs_energy_residual": r.residual.max_abs(),
                    "right_outflow": r.series.right_outflow,
                }));
            }
            serde_json::json!({ "paths": summary })
        }
        Command::Compare => {
            let cmp = compare_particle_vs_spde(cfg)?;
            write_limit(&out, 0, &cmp.limit, &record, cfg.output.snapshots)?;
            out.file("loss_mean.csv", &mean_columns(std::slice::from_ref(&cmp.limit.mean))?)?;
            out.file("particles_loss_0.csv", &io::loss_csv(&cmp.particles.loss))?;
            serde_json::to_value(&cmp.report).map_err(|e| Error::Io(e.to_string()))?
        }
        Command::PriceTranche => {
            let tr = cfg.tranche.ok_or_else(|| Error::validation("tranche", "section missing from the config"))?;
            let (price, limits) = price_tranche(cfg, &tr, paths)?;
            for (k, l) in limits.iter().enumerate() {
                write_limit(&out, k, l, &[], false)?;
            }
            let means: Vec<LossCurve> = limits.iter().map(|l| l.mean.clone()).collect();
            out.file("loss_mean.csv", &mean_columns(&means)?)?;
            out.file(
                "tranche.csv",
                &io::columns_csv(&["t", "payoff", "stderr"], &[&price.times, &price.mean, &price.stderr])?,
            )?;
            serde_json::to_value(&price).map_err(|e| Error::Io(e.to_string()))?
        }
        Command::SmoothDiagnostics => {
            serde_json::to_value(run_smoothing(cfg)?).map_err(|e| Error::Io(e.to_string()))?
        }
        Command::Validate => unreachable!("handled above"),
    };
    out.json("report.json", &report)?;
    Ok(RunOutcome { dir, report })
}
