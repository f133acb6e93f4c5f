//! CIR variance process: the full-truncation Euler step used inside the
//! particle system, exact noncentral chi-square transitions, analytic
//! moments and transition density, and the empirical checks built on them.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{feller_check, CoeffVector, FellerClass};
use crate::rng::stream;
use crate::util::{mean_stderr, par_map};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirState {
    pub sigma: f64,
    pub t: f64,
}

/// Gaussian increments driving one variance step: idiosyncratic `db1` and
/// systemic `db0`, both with variance `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoisePair {
    pub db1: f64,
    pub db0: f64,
}

/// Law of the initial variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum VarianceLaw {
    Point { value: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl VarianceLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            VarianceLaw::Point { value } if !(value >= 0.0 && value.is_finite()) => {
                Err(Error::validation("init.sigma.value", "must be finite and >= 0"))
            }
            VarianceLaw::Gamma { shape, scale } if !(shape > 0.0 && scale > 0.0) => {
                Err(Error::validation("init.sigma", "gamma needs shape > 0 and scale > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            VarianceLaw::Point { value } => value,
            VarianceLaw::Gamma { shape, scale } => {
                Gamma::new(shape, scale).map(|g| g.sample(rng)).unwrap_or(shape * scale)
            }
        }
    }

    /// Density at `y`; `None` for a point mass.
    pub fn density(&self, y: f64) -> Option<f64> {
        match *self {
            VarianceLaw::Point { .. } => None,
            VarianceLaw::Gamma { shape, scale } => Some(if y < 0.0 {
                0.0
            } else if y == 0.0 {
                match shape {
                    s if s > 1.0 => 0.0,
                    1.0 => 1.0 / scale,
                    _ => f64::INFINITY,
                }
            } else {
                ((shape - 1.0) * y.ln() - y / scale - ln_gamma(shape) - shape * scale.ln()).exp()
            }),
        }
    }

    /// Mass of the law in `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        match *self {
            VarianceLaw::Point { value } => {
                if value >= a && value < b {
                    1.0
                } else {
                    0.0
                }
            }
            VarianceLaw::Gamma { shape, scale } => {
                let cdf = |x: f64| {
                    if x <= 0.0 {
                        0.0
                    } else {
                        statrs::function::gamma::gamma_lr(shape, x / scale)
                    }
                };
                cdf(b) - cdf(a)
            }
        }
    }
}

/// One full-truncation Euler step of the variance.
pub fn cir_step_ft(state: CirState, c: &CoeffVector, dt: f64, noise: NoisePair) -> Result<CirState> {
    if !(dt > 0.0) {
        return Err(Error::validation("dt", format!("must be > 0, got {dt}")));
    }
    Ok(CirState { sigma: ft_update(state.sigma, c, dt, noise), t: state.t + dt })
}

#[inline]
pub(crate) fn ft_update(sigma: f64, c: &CoeffVector, dt: f64, noise: NoisePair) -> f64 {
    let sp = sigma.max(0.0);
    let shock = (1.0 - c.rho2 * c.rho2).sqrt() * noise.db1 + c.rho2 * noise.db0;
    let next = sigma + c.k * (c.theta - sp) * dt + c.xi * sp.sqrt() * shock;
    next.max(0.0)
}

/// `theta + (sigma0 - theta) e^{-k t}`.
pub fn cir_mean(c: &CoeffVector, sigma0: f64, t: f64) -> f64 {
    c.theta + (sigma0 - c.theta) * (-c.k * t).exp()
}

/// Variance of `sigma_t` given `sigma_0`.
pub fn cir_variance(c: &CoeffVector, sigma0: f64, t: f64) -> f64 {
    let e = (-c.k * t).exp();
    let xi2 = c.xi * c.xi;
    sigma0 * xi2 / c.k * (e - e * e) + c.theta * xi2 / (2.0 * c.k) * (1.0 - e).powi(2)
}

/// Parameters of the scaled noncentral chi-square transition law:
/// `sigma_t = scale * chi2'(dof, noncentrality)`.
#[derive(Debug, Clone, Copy)]
struct Transition {
    scale: f64,
    dof: f64,
    nc: f64,
}

fn transition(c: &CoeffVector, sigma0: f64, t: f64) -> Transition {
    let e = (-c.k * t).exp();
    let scale = c.xi * c.xi * (-(-c.k * t).exp_m1()) / (4.0 * c.k);
    Transition { scale, dof: c.cir_dof(), nc: sigma0 * e / scale }
}

/// Draws from the noncentral chi-square law with `dof` degrees of freedom.
fn sample_ncx2<R: Rng + ?Sized>(rng: &mut R, dof: f64, nc: f64) -> f64 {
    if dof > 1.0 {
        let z: f64 = StandardNormal.sample(rng);
        let shifted = z + nc.sqrt();
        let central = Gamma::new(0.5 * (dof - 1.0), 2.0).map(|g| g.sample(rng)).unwrap_or(0.0);
        shifted * shifted + central
    } else {
        let n = if nc > 0.0 { Poisson::new(0.5 * nc).map(|p| p.sample(rng)).unwrap_or(0.0) } else { 0.0 };
        let shape = 0.5 * dof + n;
        if shape <= 0.0 {
            0.0
        } else {
            Gamma::new(shape, 2.0).map(|g| g.sample(rng)).unwrap_or(0.0)
        }
    }
}

/// One draw of `sigma_t` given `sigma_0` from the exact transition law.
pub fn cir_exact_sample<R: Rng + ?Sized>(c: &CoeffVector, sigma0: f64, t: f64, rng: &mut R) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::validation("t", format!("must be > 0, got {t}")));
    }
    if !(sigma0 >= 0.0) {
        return Err(Error::validation("sigma0", "must be >= 0"));
    }
    Ok(exact_step(c, sigma0, t, rng))
}

#[inline]
fn exact_step<R: Rng + ?Sized>(c: &CoeffVector, sigma0: f64, t: f64, rng: &mut R) -> f64 {
    let tr = transition(c, sigma0, t);
    tr.scale * sample_ncx2(rng, tr.dof, tr.nc)
}

/// Exact transition density of `sigma_t` at `y` given `sigma_0`.
///
/// Evaluated as the Poisson mixture of central chi-square densities. Terms
/// are generated by recurrence from the largest one, so the cost grows only
/// with the square root of the noncentrality.
pub fn cir_density(c: &CoeffVector, sigma0: f64, t: f64, y: f64) -> f64 {
    if !(t > 0.0) || y < 0.0 {
        return 0.0;
    }
    let tr = transition(c, sigma0, t);
    ncx2_density(y / tr.scale, tr.dof, tr.nc) / tr.scale
}

fn ncx2_density(x: f64, dof: f64, nc: f64) -> f64 {
    let mu = 0.5 * nc;
    let ln2 = std::f64::consts::LN_2;
    let log_central = |nu: f64| -> f64 {
        // log of the chi2_nu density at x
        (0.5 * nu - 1.0) * x.ln() - 0.5 * x - 0.5 * nu * ln2 - ln_gamma(0.5 * nu)
    };
    if x == 0.0 {
        // Only the j = 0 term survives.
        let w0 = (-mu).exp();
        return if dof > 2.0 {
            0.0
        } else if dof == 2.0 {
            0.5 * w0
        } else {
            f64::INFINITY
        };
    }
    if mu == 0.0 {
        return log_central(dof).exp();
    }
    // term_{j+1} / term_j = mu x / ((j+1)(dof+2j)), decreasing in j.
    let disc = (dof + 2.0).powi(2) - 8.0 * (dof - mu * x);
    let jstar = if disc > 0.0 { ((-(dof + 2.0) + disc.sqrt()) / 4.0).max(0.0).floor() } else { 0.0 };
    let log_term = |j: f64| -mu + j * mu.ln() - ln_gamma(j + 1.0) + log_central(dof + 2.0 * j);
    let l0 = log_term(jstar);
    let ratio = |j: f64| mu * x / ((j + 1.0) * (dof + 2.0 * j));
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut j = jstar;
    loop {
        term *= ratio(j);
        j += 1.0;
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    let mut term = 1.0;
    let mut j = jstar;
    while j > 0.0 {
        j -= 1.0;
        term /= ratio(j);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    (l0 + sum.ln()).exp()
}

/// Grid used by [`verify_sup_density_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupGrid {
    pub n_t: usize,
    pub n_y: usize,
    /// Upper end of the variance grid; `None` picks mean + 12 sd at `T`.
    pub y_max: Option<f64>,
}

impl Default for SupGrid {
    fn default() -> Self {
        Self { n_t: 100, n_y: 2000, y_max: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupDensityReport {
    pub sup: f64,
    pub t_at: f64,
    pub y_at: f64,
    pub refined_sup: f64,
    pub relative_change: f64,
    pub stable: bool,
}

fn sup_on_grid(
    c: &CoeffVector,
    sigma0: f64,
    horizon: f64,
    alpha: f64,
    n_t: usize,
    n_y: usize,
    y_max: f64,
) -> (f64, f64, f64) {
    let t_min = 1e-3 * horizon;
    let rows = par_map(n_t, |it| {
        let t = if n_t == 1 { horizon } else { t_min + (horizon - t_min) * it as f64 / (n_t - 1) as f64 };
        let mut best = (f64::NEG_INFINITY, t, 0.0);
        for iy in 1..=n_y {
            let y = y_max * iy as f64 / n_y as f64;
            let v = y.powf(alpha) * cir_density(c, sigma0, t, y);
            if v > best.0 {
                best = (v, t, y);
            }
        }
        best
    });
    rows.into_iter().fold((f64::NEG_INFINITY, 0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Evaluates `sup_{t_min <= t <= T} sup_y y^alpha p_t(y)` on a grid and
/// checks that the maximum is finite and stable under 2x refinement.
///
/// Only the `rho2 = 0` case is accepted, where the density given the
/// systemic path is the unconditional transition density. The initial
/// variance must be a point mass.
pub fn verify_sup_density_bound(
    c: &CoeffVector,
    sigma0: &VarianceLaw,
    horizon: f64,
    alpha: f64,
    grid: SupGrid,
) -> Result<SupDensityReport> {
    if feller_check(c)? != FellerClass::StrongFeller {
        return Err(Error::validation("k*theta", "density bound requires k*theta > 0.75*xi^2"));
    }
    if c.rho2 != 0.0 {
        return Err(Error::validation("rho2", "only the rho2 = 0 reduction has a closed-form density"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::validation("alpha", "must be >= 0"));
    }
    let s0 = match *sigma0 {
        VarianceLaw::Point { value } => value,
        VarianceLaw::Gamma { .. } => {
            return Err(Error::validation("sigma0", "only point-mass initial variance is supported"))
        }
    };
    let y_max = grid.y_max.unwrap_or_else(|| {
        let m = cir_mean(c, s0, horizon).max(s0);
        m + 12.0 * cir_variance(c, s0, horizon).sqrt().max(c.xi * (s0 * 1e-3 * horizon).sqrt())
    });
    let (sup, t_at, y_at) = sup_on_grid(c, s0, horizon, alpha, grid.n_t, grid.n_y, y_max);
    let (refined, _, _) = sup_on_grid(c, s0, horizon, alpha, 2 * grid.n_t, 2 * grid.n_y, y_max);
    let rel = (refined - sup).abs() / refined.abs().max(f64::MIN_POSITIVE);
    Ok(SupDensityReport {
        sup,
        t_at,
        y_at,
        refined_sup: refined,
        relative_change: rel,
        stable: sup.is_finite() && refined.is_finite() && rel < 0.01,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupMomentEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub doubled_estimate: f64,
    pub doubled_stderr: f64,
    /// Whether the two estimates agree within 3 pooled standard errors.
    pub stable: bool,
}

fn sup_moment_samples(
    c: &CoeffVector,
    sigma0: f64,
    horizon: f64,
    p: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Vec<f64> {
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / n_steps as f64;
    par_map(n_paths, |i| {
        let mut rng = stream(seed, i as u64);
        let mut s = sigma0;
        let mut best = s.powf(p);
        for _ in 0..n_steps {
            s = exact_step(c, s, h, &mut rng);
            best = best.max(s.powf(p));
        }
        best
    })
}

/// Monte Carlo estimate of `E[sup_{t <= T} sigma_t^p]` from exact-scheme
/// paths on a `dt` grid, with a stability check against an independent
/// run with twice the paths.
pub fn estimate_sup_moment(
    c: &CoeffVector,
    sigma0: f64,
    horizon: f64,
    p: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<SupMomentEstimate> {
    if !(p >= 0.0) {
        return Err(Error::validation("p", "must be >= 0"));
    }
    if n_paths < 100 {
        return Err(Error::validation("n_paths", "must be >= 100"));
    }
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(Error::validation("dt", "dt and horizon must be positive"));
    }
    let a = sup_moment_samples(c, sigma0, horizon, p, n_paths, dt, seed);
    let b = sup_moment_samples(c, sigma0, horizon, p, 2 * n_paths, dt, crate::rng::derive_seed(seed, "doubled"));
    let (m1, s1) = mean_stderr(&a);
    let (m2, s2) = mean_stderr(&b);
    let pooled = (s1 * s1 + s2 * s2).sqrt();
    Ok(SupMomentEstimate {
        estimate: m1,
        stderr: s1,
        doubled_estimate: m2,
        doubled_stderr: s2,
        stable: (m1 - m2).abs() <= 3.0 * pooled,
    })
}

/// Terminal values of `n_paths` full-truncation Euler paths with
/// independent noise per path.
pub fn euler_terminal_samples(
    c: &CoeffVector,
    sigma0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Vec<f64> {
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / n_steps as f64;
    let sq = h.sqrt();
    par_map(n_paths, |i| {
        let mut rng = stream(seed, i as u64);
        let mut s = sigma0;
        for _ in 0..n_steps {
            let db1: f64 = StandardNormal.sample(&mut rng);
            let db0: f64 = StandardNormal.sample(&mut rng);
            s = ft_update(s, c, h, NoisePair { db1: db1 * sq, db0: db0 * sq });
        }
        s
    })
}

/// `n` independent exact draws of `sigma_T`.
pub fn exact_terminal_samples(c: &CoeffVector, sigma0: f64, horizon: f64, n: usize, seed: u64) -> Vec<f64> {
    par_map(n, |i| exact_step(c, sigma0, horizon, &mut stream(seed, i as u64)))
}
