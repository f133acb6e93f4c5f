//! The finite portfolio: N assets driven by their own noise plus one shared
//! systemic path, absorbed at zero distance-to-default.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cir::{ft_update, NoisePair, VarianceLaw};
use crate::error::{Error, Result};
use crate::field::{DensityField, Grid2D};
use crate::model::{CoeffDistribution, CoeffVector, GlobalParams, HFunction, Validation};
use crate::rng::{stream, StreamRng};
use crate::util::{norm_cdf, par_for_each_mut};

/// Systemic increments on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub times: Vec<f64>,
    pub dw0: Vec<f64>,
    pub db0: Vec<f64>,
}

impl MarketPath {
    /// A path with all systemic increments zero.
    pub fn zero(horizon: f64, steps: usize) -> Self {
        Self { times: uniform_times(horizon, steps), dw0: vec![0.0; steps], db0: vec![0.0; steps] }
    }

    pub fn steps(&self) -> usize {
        self.dw0.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn dt(&self, m: usize) -> f64 {
        self.times[m + 1] - self.times[m]
    }

    /// Index of the grid point equal to `t` (to rounding), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.horizon().max(1.0);
        let m = self.times.partition_point(|&s| s < t - tol);
        (m < self.times.len() && (self.times[m] - t).abs() <= tol).then_some(m)
    }

    /// `W0(t_m)`, the running sum of the asset increments.
    pub fn w0_levels(&self) -> Vec<f64> {
        levels(&self.dw0)
    }

    pub fn b0_levels(&self) -> Vec<f64> {
        levels(&self.db0)
    }

    /// The same Brownian path seen on every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::validation("factor", format!("{factor} does not divide {} steps", self.steps())));
        }
        let sum = |d: &[f64]| d.chunks(factor).map(|c| c.iter().sum()).collect();
        Ok(Self {
            times: self.times.iter().step_by(factor).copied().collect(),
            dw0: sum(&self.dw0),
            db0: sum(&self.db0),
        })
    }
}

fn levels(d: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.len() + 1);
    let mut s = 0.0;
    out.push(s);
    for v in d {
        s += v;
        out.push(s);
    }
    out
}

pub fn uniform_times(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|m| horizon * m as f64 / steps as f64).collect()
}

/// Draws `steps` systemic increment pairs on a uniform grid over `[0, g.horizon]`.
pub fn gen_market_path<R: Rng + ?Sized>(g: &GlobalParams, steps: usize, rng: &mut R) -> Result<MarketPath> {
    if steps == 0 {
        return Err(Error::validation("steps", "need at least one step"));
    }
    g.validate()?;
    let dt = g.horizon / steps as f64;
    let sd = dt.sqrt();
    let rest = (1.0 - g.rho3 * g.rho3).max(0.0).sqrt();
    let mut dw0 = Vec::with_capacity(steps);
    let mut db0 = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let w = sd * a;
        dw0.push(w);
        db0.push(g.rho3 * w + rest * sd * z);
    }
    Ok(MarketPath { times: uniform_times(g.horizon, steps), dw0, db0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: f64,
    pub sigma: f64,
    pub defaulted: bool,
    pub tau: Option<f64>,
}

impl ParticleState {
    pub fn new(x: f64, sigma: f64) -> Self {
        Self { x, sigma, defaulted: false, tau: None }
    }
}

/// The four Gaussian increments seen by one particle over one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepNoise {
    pub dw1: f64,
    pub db1: f64,
    pub dw0: f64,
    pub db0: f64,
}

/// Probability that a Brownian bridge with variance rate `var_rate` from
/// `x` to `x_next` (both positive) touches zero within `dt`.
pub fn bridge_crossing_probability(x: f64, x_next: f64, var_rate: f64, dt: f64) -> f64 {
    if var_rate <= 0.0 || dt <= 0.0 {
        return 0.0;
    }
    (-2.0 * x * x_next / (var_rate * dt)).exp()
}

/// Advances one surviving particle from `t` to `t + dt`. `bridge_u` is a
/// uniform draw on `[0, 1)` consumed by the bridge crossing test.
pub fn particle_step(
    p: ParticleState,
    c: &CoeffVector,
    h: &HFunction,
    t: f64,
    dt: f64,
    noise: StepNoise,
    bridge_u: f64,
) -> Result<ParticleState> {
    if p.defaulted {
        return Err(Error::Contract("particle_step called on a defaulted particle".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::validation("dt", format!("must be > 0, got {dt}")));
    }
    Ok(step_unchecked(p, c, h, t, dt, noise, bridge_u))
}

#[inline]
fn step_unchecked(
    p: ParticleState,
    c: &CoeffVector,
    h: &HFunction,
    t: f64,
    dt: f64,
    n: StepNoise,
    u: f64,
) -> ParticleState {
    let hv = h.value(p.sigma);
    let h2 = hv * hv;
    let shock = (1.0 - c.rho1 * c.rho1).sqrt() * n.dw1 + c.rho1 * n.dw0;
    let x_next = p.x + (c.r - 0.5 * h2) * dt + hv * shock;
    let sigma = ft_update(p.sigma, c, dt, NoisePair { db1: n.db1, db0: n.db0 });
    if x_next <= 0.0 {
        return ParticleState { x: 0.0, sigma, defaulted: true, tau: Some(t + dt) };
    }
    if u < bridge_crossing_probability(p.x, x_next, h2, dt) {
        return ParticleState { x: 0.0, sigma, defaulted: true, tau: Some(t + 0.5 * dt) };
    }
    ParticleState { x: x_next, sigma, defaulted: false, tau: None }
}

/// Law of the initial distance-to-default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum PositionLaw {
    Point {
        value: f64,
    },
    /// `shift + exp(N(log_mean, log_sd^2))`.
    LogNormal {
        log_mean: f64,
        log_sd: f64,
        #[serde(default)]
        shift: f64,
    },
}

impl PositionLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PositionLaw::Point { value } if !(value > 0.0 && value.is_finite()) => {
                Err(Error::validation("init.x.value", "initial distance-to-default must be > 0"))
            }
            PositionLaw::LogNormal { log_mean, log_sd, shift }
                if !(log_mean.is_finite()
                    && log_sd > 0.0
                    && log_sd.is_finite()
                    && shift >= 0.0
                    && shift.is_finite()) =>
            {
                Err(Error::validation("init.x", "lognormal needs finite log_mean, log_sd > 0, shift >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Density at `x`; `None` for a point mass.
    pub fn density(&self, x: f64) -> Option<f64> {
        match *self {
            PositionLaw::Point { .. } => None,
            PositionLaw::LogNormal { log_mean, log_sd, shift } => {
                let z = x - shift;
                Some(if z <= 0.0 {
                    0.0
                } else {
                    let e = (z.ln() - log_mean) / log_sd;
                    (-0.5 * e * e).exp() / (z * log_sd * (2.0 * std::f64::consts::PI).sqrt())
                })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PositionLaw::Point { value } => value,
            PositionLaw::LogNormal { log_mean, log_sd, shift } => {
                shift + LogNormal::new(log_mean, log_sd).map(|d| d.sample(rng)).unwrap_or(log_mean.exp())
            }
        }
    }
}

/// Product law of `(X0, sigma0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub x: PositionLaw,
    pub sigma: VarianceLaw,
}

impl InitialLaw {
    pub fn point(x: f64, sigma: f64) -> Self {
        Self { x: PositionLaw::Point { value: x }, sigma: VarianceLaw::Point { value: sigma } }
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.sigma.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoeffSource {
    Fixed(CoeffVector),
    Distribution(CoeffDistribution),
}

/// Everything needed to simulate a portfolio on a given market path.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub n: usize,
    pub coeffs: CoeffSource,
    pub init: InitialLaw,
    pub global: GlobalParams,
    pub validation: Validation,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Grid indices at which the whole cloud is recorded.
    pub record_steps: Vec<usize>,
    /// Stream id per particle; defaults to the particle index.
    pub stream_ids: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub states: Vec<ParticleState>,
}

/// Fraction defaulted at each grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl LossCurve {
    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap_or(&0.0)
    }

    /// Value at grid time `t`.
    pub fn at(&self, t: f64) -> Option<f64> {
        let tol = 1e-9 * self.times.last().copied().unwrap_or(1.0).max(1.0);
        self.times.iter().position(|&s| (s - t).abs() <= tol).map(|m| self.values[m])
    }
}

/// Output of a portfolio run.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub times: Vec<f64>,
    pub n: usize,
    pub coeffs: Vec<CoeffVector>,
    /// Grid index at which each particle is first counted as defaulted.
    pub default_step: Vec<Option<usize>>,
    pub tau: Vec<Option<f64>>,
    pub loss: LossCurve,
    pub snapshots: Vec<Snapshot>,
}

struct Walker {
    coeff: CoeffVector,
    rng: StreamRng,
}

/// Simulates the portfolio on `mp`. Particle `i` uses stream `ids[i]` of
/// `coeff_seed` for its coefficients and of `particle_seed` for its initial
/// state and idiosyncratic noise. `observer` sees the states at every grid
/// index, including 0.
pub fn simulate_portfolio(
    pf: &Portfolio,
    mp: &MarketPath,
    coeff_seed: u64,
    particle_seed: u64,
    opts: &SimOptions,
    mut observer: Option<&mut dyn FnMut(usize, &[ParticleState], &[CoeffVector])>,
) -> Result<Trajectories> {
    if pf.n == 0 {
        return Err(Error::validation("n_particles", "need at least one particle"));
    }
    pf.global.validate()?;
    pf.init.validate()?;
    let ids: Vec<u64> = match &opts.stream_ids {
        Some(ids) if ids.len() != pf.n => {
            return Err(Error::validation("stream_ids", "length must equal the number of particles"))
        }
        Some(ids) => ids.clone(),
        None => (0..pf.n as u64).collect(),
    };
    let coeffs: Vec<CoeffVector> = match &pf.coeffs {
        CoeffSource::Fixed(c) => {
            c.validate(pf.validation)?;
            vec![*c; pf.n]
        }
        CoeffSource::Distribution(d) => {
            d.validate()?;
            ids.iter().map(|&id| d.sample(&mut stream(coeff_seed, id), pf.validation)).collect::<Result<_>>()?
        }
    };
    let m_steps = mp.steps();
    for &s in &opts.record_steps {
        if s > m_steps {
            return Err(Error::validation("record_steps", format!("step {s} beyond the grid ({m_steps})")));
        }
    }
    let mut walkers: Vec<Walker> = Vec::with_capacity(pf.n);
    let mut states: Vec<ParticleState> = Vec::with_capacity(pf.n);
    for (i, &id) in ids.iter().enumerate() {
        let mut rng = stream(particle_seed, id);
        let x = pf.init.x.sample(&mut rng);
        let sigma = pf.init.sigma.sample(&mut rng);
        states.push(ParticleState::new(x, sigma));
        walkers.push(Walker { coeff: coeffs[i], rng });
    }

    let h = &pf.global.h;
    let (w1, b1) = (pf.global.w1, pf.global.b1);
    let mixed = pf.global.correlated_idiosyncratic();
    let (w_rest, b_rest) = ((1.0 - w1 * w1).max(0.0).sqrt(), (1.0 - b1 * b1).max(0.0).sqrt());

    let mut default_step = vec![None; pf.n];
    let mut counts = vec![0usize; m_steps + 1];
    let mut snapshots = Vec::new();
    let record = |m: usize, states: &[ParticleState], snaps: &mut Vec<Snapshot>| {
        if opts.record_steps.contains(&m) {
            snaps.push(Snapshot { step: m, t: mp.times[m], states: states.to_vec() });
        }
    };
    record(0, &states, &mut snapshots);
    if let Some(obs) = observer.as_mut() {
        obs(0, &states, &coeffs);
    }

    let mut pairs: Vec<(ParticleState, Walker)> = states.drain(..).zip(walkers).collect();
    let mut current: Vec<ParticleState> = Vec::with_capacity(pf.n);
    for m in 0..m_steps {
        let t = mp.times[m];
        let dt = mp.dt(m);
        let sd = dt.sqrt();
        let (dw0, db0) = (mp.dw0[m], mp.db0[m]);
        par_for_each_mut(&mut pairs, |_, (p, w)| {
            if p.defaulted {
                return;
            }
            let a: f64 = w.rng.sample(StandardNormal);
            let b: f64 = w.rng.sample(StandardNormal);
            let (dw1, db1) = if mixed {
                let z: f64 = w.rng.sample(StandardNormal);
                (sd * (w1 * a + w_rest * z), sd * (b1 * b + b_rest * z))
            } else {
                (sd * a, sd * b)
            };
            let u: f64 = w.rng.random();
            *p = step_unchecked(*p, &w.coeff, h, t, dt, StepNoise { dw1, db1, dw0, db0 }, u);
        });
        for (i, (p, _)) in pairs.iter().enumerate() {
            if p.defaulted && default_step[i].is_none() {
                default_step[i] = Some(m + 1);
                counts[m + 1] += 1;
            }
        }
        let want_states = observer.is_some() || opts.record_steps.contains(&(m + 1));
        if want_states {
            current.clear();
            current.extend(pairs.iter().map(|(p, _)| *p));
            record(m + 1, &current, &mut snapshots);
            if let Some(obs) = observer.as_mut() {
                obs(m + 1, &current, &coeffs);
            }
        }
    }

    let mut values = Vec::with_capacity(m_steps + 1);
    let mut acc = 0usize;
    for c in &counts {
        acc += c;
        values.push(acc as f64 / pf.n as f64);
    }
    Ok(Trajectories {
        times: mp.times.clone(),
        n: pf.n,
        coeffs,
        default_step,
        tau: pairs.iter().map(|(p, _)| p.tau).collect(),
        loss: LossCurve { times: mp.times.clone(), values },
        snapshots,
    })
}

/// Survivor cloud at one time, each point with weight `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub t: f64,
    pub n: usize,
    pub survivors: Vec<(f64, f64)>,
    pub defaulted_mass: f64,
}

impl EmpiricalMeasure {
    pub fn from_states(t: f64, states: &[ParticleState]) -> Self {
        let n = states.len();
        let survivors: Vec<(f64, f64)> = states.iter().filter(|p| !p.defaulted).map(|p| (p.x, p.sigma)).collect();
        let defaulted = n - survivors.len();
        Self { t, n, survivors, defaulted_mass: defaulted as f64 / n as f64 }
    }

    pub fn survivor_weight(&self) -> f64 {
        self.survivors.len() as f64 / self.n as f64
    }
}

/// Empirical measure at grid time `t`, which must have been recorded.
pub fn empirical_measure_at(tr: &Trajectories, t: f64) -> Result<EmpiricalMeasure> {
    let tol = 1e-9 * tr.times.last().copied().unwrap_or(1.0).max(1.0);
    let snap = tr.snapshots.iter().find(|s| (s.t - t).abs() <= tol).ok_or_else(|| {
        if tr.times.iter().any(|&s| (s - t).abs() <= tol) {
            Error::validation("t", format!("no snapshot recorded at t = {t}"))
        } else {
            Error::validation("t", format!("t = {t} is not on the simulation grid; interpolation is refused"))
        }
    })?;
    Ok(EmpiricalMeasure::from_states(snap.t, &snap.states))
}

/// Bins the survivors onto the node control volumes of `grid`.
/// Returns the density and the mass falling outside the grid.
pub fn histogram2d(m: &EmpiricalMeasure, grid: &Grid2D) -> Result<(DensityField, f64)> {
    grid.validate()?;
    let mut counts = vec![0usize; grid.len()];
    let mut spill = 0usize;
    let (dx, dy) = (grid.dx(), grid.dy());
    for &(x, y) in &m.survivors {
        let fi = (x / dx + 0.5).floor();
        let fj = (y / dy + 0.5).floor();
        if x < 0.0 || y < 0.0 || fi > grid.nx as f64 || fj > grid.ny as f64 || !fi.is_finite() || !fj.is_finite() {
            spill += 1;
            continue;
        }
        counts[grid.idx(fi as usize, fj as usize)] += 1;
    }
    let mut u = DensityField::zeros(*grid);
    u.t = m.t;
    let n = m.n as f64;
    for i in 0..=grid.nx {
        for j in 0..=grid.ny {
            let c = counts[grid.idx(i, j)];
            if c > 0 {
                u.values[grid.idx(i, j)] = c as f64 / (n * grid.wx(i) * grid.wy(j));
            }
        }
    }
    Ok((u, spill as f64 / n))
}

/// Probability that `x0 + mu t + s W_t` hits zero before `horizon`, with
/// `mu = r - s^2/2`.
pub fn first_passage_probability(x0: f64, r: f64, s: f64, horizon: f64) -> f64 {
    let mu = r - 0.5 * s * s;
    if s <= 0.0 {
        return if mu < 0.0 && x0 + mu * horizon <= 0.0 { 1.0 } else { 0.0 };
    }
    let st = s * horizon.sqrt();
    norm_cdf((-x0 - mu * horizon) / st) + (-2.0 * mu * x0 / (s * s)).exp() * norm_cdf((-x0 + mu * horizon) / st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::mean_stderr;
    use proptest::prelude::*;
    use rand::Rng;

    fn coeff() -> CoeffVector {
        CoeffVector { k: 2.0, theta: 0.04, xi: 0.2, r: 0.02, rho1: 0.3, rho2: -0.2 }
    }

    fn portfolio(n: usize, x0: f64) -> Portfolio {
        Portfolio {
            n,
            coeffs: CoeffSource::Fixed(coeff()),
            init: InitialLaw::point(x0, 0.04),
            global: GlobalParams::new(0.5, HFunction::Sqrt, 1.0),
            validation: Validation::Strict,
        }
    }

    #[test]
    fn market_path_with_unit_correlation_is_shared() {
        let g = GlobalParams::new(1.0, HFunction::Sqrt, 1.0);
        let mp = gen_market_path(&g, 100, &mut stream(1, 0)).unwrap();
        assert_eq!(mp.dw0, mp.db0);
        assert!(gen_market_path(&g, 0, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn market_path_statistics() {
        let m = 20_000;
        let g = GlobalParams::new(0.0, HFunction::Sqrt, 2.0);
        let mp = gen_market_path(&g, m, &mut stream(3, 0)).unwrap();
        let dt = 2.0 / m as f64;
        let sq: Vec<f64> = mp.dw0.iter().map(|w| w * w).collect();
        let (v, se) = mean_stderr(&sq);
        assert!((v - dt).abs() < 3.0 * se, "{v} vs {dt}");
        let corr = mp.dw0.iter().zip(&mp.db0).map(|(a, b)| a * b).sum::<f64>() / (m as f64 * dt);
        assert!(corr.abs() < 3.0 / (m as f64).sqrt(), "{corr}");

        let g = GlobalParams::new(0.6, HFunction::Sqrt, 2.0);
        let mp = gen_market_path(&g, m, &mut stream(4, 0)).unwrap();
        let corr = mp.dw0.iter().zip(&mp.db0).map(|(a, b)| a * b).sum::<f64>() / (m as f64 * dt);
        assert!((corr - 0.6).abs() < 3.0 / (m as f64).sqrt(), "{corr}");
    }

    #[test]
    fn zero_h_freezes_position() {
        let c = CoeffVector { r: 0.0, ..coeff() };
        let noise = StepNoise { dw1: 0.3, db1: -0.1, dw0: 0.5, db0: 0.2 };
        let p = particle_step(ParticleState::new(0.7, 0.04), &c, &HFunction::zero(), 0.0, 0.01, noise, 0.0).unwrap();
        assert_eq!(p.x, 0.7);
        assert!(!p.defaulted);
    }

    #[test]
    fn negative_endpoint_absorbs() {
        let noise = StepNoise { dw1: -0.5, ..Default::default() };
        let p =
            particle_step(ParticleState::new(1e-12, 0.04), &coeff(), &HFunction::Sqrt, 0.0, 0.01, noise, 0.99).unwrap();
        assert!(p.defaulted);
        assert_eq!(p.x, 0.0);
        assert_eq!(p.tau, Some(0.01));
        assert!(matches!(
            particle_step(p, &coeff(), &HFunction::Sqrt, 0.01, 0.01, noise, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bridge_probability_value() {
        let p = bridge_crossing_probability(0.1, 0.1, 0.02, 1.0);
        assert!((p - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bridge_crossing_probability(0.1, 0.1, 0.0, 1.0), 0.0);
    }

    #[test]
    fn bridge_fires_with_midpoint_time() {
        let c = CoeffVector { r: 0.0, rho1: 0.0, ..coeff() };
        let h = HFunction::constant(0.2);
        // Zero noise and zero drift except -h^2/2: X' slightly below X.
        let p = ParticleState::new(0.01, 0.04);
        let q = particle_step(p, &c, &h, 1.0, 0.01, StepNoise::default(), 0.0).unwrap();
        assert!(q.defaulted);
        assert_eq!(q.tau, Some(1.005));
        let q = particle_step(p, &c, &h, 1.0, 0.01, StepNoise::default(), 0.9999).unwrap();
        assert!(!q.defaulted);
    }

    #[test]
    fn frozen_single_particle_never_defaults() {
        let c = CoeffVector { r: 0.05, xi: 1e-8, theta: 0.04, ..coeff() };
        let pf = Portfolio {
            n: 1,
            coeffs: CoeffSource::Fixed(c),
            init: InitialLaw::point(0.5, 0.04),
            global: GlobalParams::new(0.0, HFunction::zero(), 1.0),
            validation: Validation::Strict,
        };
        let tr = simulate_portfolio(&pf, &MarketPath::zero(1.0, 50), 1, 2, &SimOptions::default(), None).unwrap();
        assert!(tr.loss.values.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn immediate_absorption_from_the_boundary() {
        let mut pf = portfolio(200, 1e-15);
        pf.global.rho3 = 0.0;
        let mp = gen_market_path(&pf.global, 20, &mut stream(9, 0)).unwrap();
        let tr = simulate_portfolio(&pf, &mp, 1, 2, &SimOptions::default(), None).unwrap();
        assert_eq!(tr.loss.values[0], 0.0);
        assert_eq!(tr.loss.values[1], 1.0);
    }

    #[test]
    fn constant_vol_matches_first_passage_law() {
        let (x0, r, theta, t) = (0.3, 0.01, 0.09, 1.0);
        let c = CoeffVector { k: 1.0, theta, xi: 1e-8, r, rho1: 0.0, rho2: 0.0 };
        let n = 20_000;
        let pf = Portfolio {
            n,
            coeffs: CoeffSource::Fixed(c),
            init: InitialLaw::point(x0, theta),
            global: GlobalParams::new(0.0, HFunction::Sqrt, t),
            validation: Validation::Strict,
        };
        let mp = MarketPath::zero(t, 1000);
        let tr = simulate_portfolio(&pf, &mp, 5, 6, &SimOptions::default(), None).unwrap();
        let p = first_passage_probability(x0, r, theta.sqrt(), t);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((tr.loss.terminal() - p).abs() < 3.0 * se, "{} vs {p} (se {se})", tr.loss.terminal());
    }

    #[test]
    fn measures_and_loss_agree() {
        let pf = portfolio(500, 0.2);
        let mp = gen_market_path(&pf.global, 40, &mut stream(11, 0)).unwrap();
        let opts = SimOptions { record_steps: (0..=40).collect(), stream_ids: None };
        let tr = simulate_portfolio(&pf, &mp, 1, 2, &opts, None).unwrap();
        let m0 = empirical_measure_at(&tr, 0.0).unwrap();
        assert_eq!(m0.defaulted_mass, 0.0);
        assert_eq!(m0.survivors.len(), 500);
        for (m, &t) in tr.times.iter().enumerate() {
            let em = empirical_measure_at(&tr, t).unwrap();
            assert_eq!(em.survivor_weight() + em.defaulted_mass, 1.0);
            assert_eq!(em.defaulted_mass, tr.loss.values[m]);
        }
        assert!(empirical_measure_at(&tr, 0.0123).is_err());
        assert!(tr.loss.is_monotone());
        assert!(tr.loss.terminal() > 0.0);
    }

    #[test]
    fn runs_are_reproducible_across_worker_counts() {
        let pf = portfolio(300, 0.3);
        let mp = gen_market_path(&pf.global, 50, &mut stream(1, 0)).unwrap();
        let a =
            crate::util::with_workers(1, || simulate_portfolio(&pf, &mp, 1, 2, &SimOptions::default(), None).unwrap());
        let b =
            crate::util::with_workers(3, || simulate_portfolio(&pf, &mp, 1, 2, &SimOptions::default(), None).unwrap());
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.tau, b.tau);
    }

    #[test]
    fn permuting_streams_permutes_particles() {
        let mut pf = portfolio(64, 0.25);
        pf.coeffs = CoeffSource::Distribution(CoeffDistribution {
            r: crate::model::FieldSampler::Uniform { lo: 0.0, hi: 0.05 },
            ..CoeffDistribution::point(coeff())
        });
        let mp = gen_market_path(&pf.global, 30, &mut stream(2, 0)).unwrap();
        let ids: Vec<u64> = (0..64).collect();
        let perm: Vec<u64> = ids.iter().rev().copied().collect();
        let opts_a = SimOptions { record_steps: vec![30], stream_ids: Some(ids) };
        let opts_b = SimOptions { record_steps: vec![30], stream_ids: Some(perm) };
        let a = simulate_portfolio(&pf, &mp, 1, 2, &opts_a, None).unwrap();
        let b = simulate_portfolio(&pf, &mp, 1, 2, &opts_b, None).unwrap();
        assert_eq!(a.loss, b.loss);
        let mut sa: Vec<_> = empirical_measure_at(&a, 1.0).unwrap().survivors;
        let mut sb: Vec<_> = empirical_measure_at(&b, 1.0).unwrap().survivors;
        sa.sort_by(|p, q| p.0.total_cmp(&q.0));
        sb.sort_by(|p, q| p.0.total_cmp(&q.0));
        assert_eq!(sa, sb);
    }

    #[test]
    fn correlated_idiosyncratic_noise_runs() {
        let mut pf = portfolio(200, 0.3);
        pf.global.w1 = 0.5;
        pf.global.b1 = 0.5;
        let mp = gen_market_path(&pf.global, 20, &mut stream(2, 0)).unwrap();
        let tr = simulate_portfolio(&pf, &mp, 1, 2, &SimOptions::default(), None).unwrap();
        assert!(tr.loss.is_monotone());
    }

    #[test]
    fn histogram_single_point_and_conservation() {
        let g = Grid2D::new(1.6, 0.32, 16, 16).unwrap();
        let m = EmpiricalMeasure { t: 0.0, n: 4, survivors: vec![(g.x(3), g.y(5))], defaulted_mass: 0.25 };
        let (u, spill) = histogram2d(&m, &g).unwrap();
        assert_eq!(spill, 0.0);
        assert!((u.at(3, 5) - 1.0 / (4.0 * g.dx() * g.dy())).abs() < 1e-9);
        assert_eq!(u.values.iter().filter(|&&v| v != 0.0).count(), 1);

        let m = EmpiricalMeasure {
            t: 0.0,
            n: 10,
            survivors: vec![(0.0, 0.0), (1.6, 0.32), (0.5, 0.1), (2.0, 0.1), (0.3, 0.5), (0.81, 0.02)],
            defaulted_mass: 0.4,
        };
        let (u, spill) = histogram2d(&m, &g).unwrap();
        assert!((u.mass() + spill + m.defaulted_mass - 1.0).abs() < 1e-12);
        assert!((spill - 0.2).abs() < 1e-15);
    }

    #[test]
    fn histogram_of_uniform_cloud_is_flat() {
        let g = Grid2D::new(1.0, 1.0, 16, 16).unwrap();
        let n = 200_000;
        let mut rng = stream(8, 0);
        let survivors: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let m = EmpiricalMeasure { t: 0.0, n, survivors, defaulted_mass: 0.0 };
        let (u, _) = histogram2d(&m, &g).unwrap();
        for i in 0..=16 {
            for j in 0..=16 {
                let cell = g.wx(i) * g.wy(j);
                let p = cell;
                let se = (p * (1.0 - p) / n as f64).sqrt() / cell;
                assert!((u.at(i, j) - 1.0).abs() < 4.0 * se, "{i},{j}: {}", u.at(i, j));
            }
        }
    }

    #[test]
    fn first_passage_formula_limits() {
        assert!(first_passage_probability(1e-9, 0.0, 0.2, 1.0) > 0.999);
        let p = first_passage_probability(0.3, 0.0, 0.2, 1.0);
        // Driftless: 2 Phi(-x/s) approximately, adjusted by the -s^2/2 drift.
        assert!(p > 2.0 * norm_cdf(-1.5) && p < 0.2, "{p}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_is_monotone(seed in 0u64..1000, x0 in 0.01f64..0.5, rho3 in -1.0f64..1.0) {
            let mut pf = portfolio(50, x0);
            pf.global.rho3 = rho3;
            let mp = gen_market_path(&pf.global, 25, &mut stream(seed, 0)).unwrap();
            let tr = simulate_portfolio(&pf, &mp, seed, seed + 1, &SimOptions::default(), None).unwrap();
            prop_assert!(tr.loss.is_monotone());
            prop_assert!(tr.loss.values.iter().all(|&l| (0.0..=1.0).contains(&l)));
            for (i, s) in tr.default_step.iter().enumerate() {
                prop_assert_eq!(s.is_some(), tr.tau[i].is_some());
            }
        }
    }
}
