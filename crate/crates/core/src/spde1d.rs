//! The one-dimensional conditional equation: the asset density given a
//! deterministic variance path, driven by the systemic asset noise only,
//! killed at `x = 0`.
//!
//! Each step solves the deterministic part (diffusion `(1 - rho1^2) sigma / 2`
//! by Crank-Nicolson, drift `r - sigma/2` by upwinding) and then applies the
//! systemic transport. The transport is a pure translation by
//! `rho1 sqrt(sigma) dW0`, done in flux form (the same translation the 2D
//! solver uses), so it conserves mass up to what crosses the ends. Mass
//! moved across `x = 0` is killed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Grid1D;
use crate::linalg::{cn_line, translate_line, LineWorkspace};
use crate::particles::{LossCurve, MarketPath};

#[derive(Debug, Clone, PartialEq)]
pub struct Density1D {
    pub grid: Grid1D,
    pub t: f64,
    pub values: Vec<f64>,
}

impl Density1D {
    /// Samples `f` at the nodes, with both end values set to zero.
    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let mut values: Vec<f64> = (0..grid.nodes()).map(|i| f(grid.x(i))).collect();
        values[0] = 0.0;
        values[grid.cells] = 0.0;
        Self { grid, t: 0.0, values }
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self { grid, t: 0.0, values: vec![0.0; grid.nodes()] }
    }

    pub fn mass(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// Rescales so that the mass equals `target`.
    pub fn normalized(mut self, target: f64) -> Self {
        let m = self.mass();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v *= target / m);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.nodes() {
            return Err(Error::validation("u0", "length does not match the grid"));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("u0", "values must be finite and >= 0"));
        }
        if self.values[0] != 0.0 || self.values[self.grid.cells] != 0.0 {
            return Err(Error::validation("u0", "boundary values must be zero"));
        }
        if self.mass() > 1.0 + 1e-12 {
            return Err(Error::validation("u0", format!("mass {} exceeds 1", self.mass())));
        }
        Ok(())
    }
}

fn trapezoid(grid: &Grid1D, v: &[f64]) -> f64 {
    v.iter().enumerate().map(|(i, u)| grid.weight(i) * u).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VolKind {
    #[default]
    PiecewiseLinear,
    PiecewiseConstant,
}

/// A positive deterministic variance path. For the piecewise-constant kind
/// `values[k]` holds on `[times[k], times[k + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub kind: VolKind,
}

impl VolPath {
    pub fn constant(sigma: f64, horizon: f64) -> Self {
        Self { times: vec![0.0, horizon], values: vec![sigma, sigma], kind: VolKind::PiecewiseLinear }
    }

    pub fn new(times: Vec<f64>, values: Vec<f64>, kind: VolKind) -> Result<Self> {
        let v = Self { times, values, kind };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 || self.times.len() != self.values.len() {
            return Err(Error::validation("vol", "need matching times/values with at least two points"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("vol.times", "must increase strictly"));
        }
        if self.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::validation("vol.values", "variance path must be positive"));
        }
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1
    }

    /// `sigma_t`, held flat outside the path's time range.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let k = self.segment(t);
        match self.kind {
            VolKind::PiecewiseConstant => self.values[k],
            VolKind::PiecewiseLinear => {
                let (t0, t1) = (self.times[k], self.times[k + 1]);
                self.values[k] + (self.values[k + 1] - self.values[k]) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Exact time average of `sigma` over `[a, b]`.
    pub fn average(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return self.at(a);
        }
        let mut cuts = vec![a];
        cuts.extend(self.times.iter().copied().filter(|&s| s > a && s < b));
        cuts.push(b);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let v = match self.kind {
                VolKind::PiecewiseConstant => self.at(s0),
                VolKind::PiecewiseLinear => 0.5 * (self.at(s0) + self.at(s1)),
            };
            total += v * (s1 - s0);
        }
        total / (b - a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme1D {
    /// `dt <= cfl * dx^2 / max sigma`.
    pub cfl: f64,
}

impl Default for Scheme1D {
    fn default() -> Self {
        Self { cfl: 1.0 }
    }
}

/// Every time step of a 1D solve.
#[derive(Debug, Clone)]
pub struct Series1D {
    pub grid: Grid1D,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Mass that left through `x = xmax`.
    pub right_outflow: f64,
}

impl Series1D {
    pub fn last(&self) -> Density1D {
        Density1D {
            grid: self.grid,
            t: *self.times.last().unwrap_or(&0.0),
            values: self.values.last().cloned().unwrap_or_default(),
        }
    }
}

pub fn solve_1d(
    u0: &Density1D,
    vol: &VolPath,
    r: f64,
    rho1: f64,
    mp: &MarketPath,
    scheme: &Scheme1D,
) -> Result<Series1D> {
    u0.validate()?;
    vol.validate()?;
    if !(rho1.abs() <= 1.0) {
        return Err(Error::validation("rho1", format!("must lie in [-1, 1], got {rho1}")));
    }
    if !r.is_finite() {
        return Err(Error::validation("r", "must be finite"));
    }
    if !(scheme.cfl > 0.0) {
        return Err(Error::validation("scheme.cfl", "must be positive"));
    }
    let grid = u0.grid;
    let dx = grid.dx();
    let max_dt = scheme.cfl * dx * dx / vol.max();
    let dt_max = (0..mp.steps()).map(|m| mp.dt(m)).fold(0.0, f64::max);
    if dt_max > max_dt * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt: dt_max, max_dt });
    }

    let mut ws = LineWorkspace::default();
    let mut u = u0.values.clone();
    let mut times = vec![mp.times[0]];
    let mut values = vec![u.clone()];
    let mut right_outflow = 0.0;

    for m in 0..mp.steps() {
        let (t, dt) = (mp.times[m], mp.dt(m));
        let s = vol.average(t, t + dt);
        let d = 0.5 * (1.0 - rho1 * rho1) * s;
        let (_, out) = cn_line(&mut u, d, r - 0.5 * s, dt, dx, &mut ws);
        right_outflow += out;
        check(&u, m, "deterministic")?;

        let shift = rho1 * s.sqrt() * mp.dw0[m] / dx;
        if shift != 0.0 {
            let (moved, _, high) = translate_line(&u, shift, true);
            u = moved;
            right_outflow += high * dx;
            check(&u, m, "transport")?;
        }
        times.push(mp.times[m + 1]);
        values.push(u.clone());
    }
    if right_outflow > 1e-6 {
        log::warn!("outflow through xmax = {} is {right_outflow:.3e}; consider a wider domain", grid.xmax);
    }
    Ok(Series1D { grid, times, values, right_outflow })
}

fn check(u: &[f64], step: usize, term: &'static str) -> Result<()> {
    let mut max = 0.0f64;
    let mut min = 0.0f64;
    for &v in u {
        if !v.is_finite() {
            return Err(Error::Solver { step, term, reason: "non-finite value".into() });
        }
        max = max.max(v);
        min = min.min(v);
    }
    if min < -1e-8 * max {
        return Err(Error::Solver { step, term, reason: format!("undershoot {min:.3e} against max {max:.3e}") });
    }
    Ok(())
}

/// `||u||^2` with trapezoid weights.
pub fn l2_norm_sq(grid: &Grid1D, u: &[f64]) -> f64 {
    u.iter().enumerate().map(|(i, v)| grid.weight(i) * v * v).sum()
}

/// `||u_x||^2` with centered differences inside and one-sided ones at the ends.
pub fn grad_norm_sq(grid: &Grid1D, u: &[f64]) -> f64 {
    let dx = grid.dx();
    let n = u.len();
    (0..n)
        .map(|i| {
            let g = if i == 0 {
                (u[1] - u[0]) / dx
            } else if i == n - 1 {
                (u[n - 1] - u[n - 2]) / dx
            } else {
                (u[i + 1] - u[i - 1]) / (2.0 * dx)
            };
            grid.weight(i) * g * g
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyResidual {
    pub times: Vec<f64>,
    /// `R(t) / ||u0||^2`.
    pub values: Vec<f64>,
}

impl EnergyResidual {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// `R(t) = ||u(t)||^2 + (1 - rho1^2) int_0^t sigma_s ||u_x(s)||^2 ds - ||u0||^2`,
/// normalised by `||u0||^2`.
pub fn energy_identity_residual(series: &Series1D, vol: &VolPath, rho1: f64) -> EnergyResidual {
    let g = &series.grid;
    let e0 = l2_norm_sq(g, &series.values[0]);
    let dissip: Vec<f64> =
        series.times.iter().zip(&series.values).map(|(&t, u)| vol.at(t) * grad_norm_sq(g, u)).collect();
    let mut values = Vec::with_capacity(series.times.len());
    let mut integral = 0.0;
    for m in 0..series.times.len() {
        if m > 0 {
            integral += 0.5 * (series.times[m] - series.times[m - 1]) * (dissip[m] + dissip[m - 1]);
        }
        let r = if m == 0 { 0.0 } else { l2_norm_sq(g, &series.values[m]) + (1.0 - rho1 * rho1) * integral - e0 };
        values.push(if e0 > 0.0 { r / e0 } else { r });
    }
    EnergyResidual { times: series.times.clone(), values }
}

/// `L(t) = 1 - int u(t, x) dx`.
pub fn loss_1d(series: &Series1D) -> LossCurve {
    LossCurve {
        times: series.times.clone(),
        values: series.values.iter().map(|u| 1.0 - trapezoid(&series.grid, u)).collect(),
    }
}
