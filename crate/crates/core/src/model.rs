//! Model parameters, their validation, the `h` volatility map and the
//! effective cross-correlation of the limit equation.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of one asset class: variance mean reversion `k`, long-run
/// variance `theta`, vol-of-vol `xi`, drift `r`, asset/market correlation
/// `rho1` and variance/market correlation `rho2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffVector {
    pub k: f64,
    pub theta: f64,
    pub xi: f64,
    pub r: f64,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Validation {
    /// Requires `k theta > 3/4 xi^2`.
    #[default]
    Strict,
    /// Accepts the ordinary Feller condition `k theta > xi^2 / 2` as well.
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FellerClass {
    StrongFeller,
    FellerOnly,
    Violated,
}

impl CoeffVector {
    fn fields(&self) -> [(&'static str, f64); 6] {
        [("k", self.k), ("theta", self.theta), ("xi", self.xi), ("r", self.r), ("rho1", self.rho1), ("rho2", self.rho2)]
    }

    /// Checks the type invariants and the Feller-type condition for `mode`.
    pub fn validate(&self, mode: Validation) -> Result<FellerClass> {
        for (key, v) in self.fields() {
            if !v.is_finite() {
                return Err(Error::validation(key, "must be finite"));
            }
        }
        for (key, v) in [("k", self.k), ("theta", self.theta), ("xi", self.xi)] {
            if v <= 0.0 {
                return Err(Error::validation(key, format!("must be > 0, got {v}")));
            }
        }
        for (key, v) in [("rho1", self.rho1), ("rho2", self.rho2)] {
            if v <= -1.0 || v >= 1.0 {
                return Err(Error::validation(key, format!("must lie in (-1, 1), got {v}")));
            }
        }
        let class = feller_check(self)?;
        match (class, mode) {
            (FellerClass::StrongFeller, _) => Ok(class),
            (FellerClass::FellerOnly, Validation::Permissive) => {
                log::warn!(
                    "k*theta = {} <= 0.75*xi^2 = {}: accepted in permissive mode only",
                    self.k * self.theta,
                    0.75 * self.xi * self.xi
                );
                Ok(class)
            }
            (FellerClass::FellerOnly, Validation::Strict) => Err(Error::validation(
                "k*theta",
                format!(
                    "strong condition k*theta > 0.75*xi^2 violated ({} <= {})",
                    self.k * self.theta,
                    0.75 * self.xi * self.xi
                ),
            )),
            (FellerClass::Violated, _) => Err(Error::validation(
                "k*theta",
                format!(
                    "Feller condition k*theta > xi^2/2 violated ({} <= {})",
                    self.k * self.theta,
                    0.5 * self.xi * self.xi
                ),
            )),
        }
    }

    /// Degrees of freedom `4 k theta / xi^2` of the CIR transition law.
    pub fn cir_dof(&self) -> f64 {
        4.0 * self.k * self.theta / (self.xi * self.xi)
    }
}

/// Classifies `k theta` against `0.75 xi^2` and `0.5 xi^2`.
pub fn feller_check(c: &CoeffVector) -> Result<FellerClass> {
    for (key, v) in c.fields() {
        if !v.is_finite() {
            return Err(Error::validation(key, "must be finite"));
        }
    }
    let kt = c.k * c.theta;
    let xi2 = c.xi * c.xi;
    Ok(if kt > 0.75 * xi2 {
        FellerClass::StrongFeller
    } else if kt > 0.5 * xi2 {
        FellerClass::FellerOnly
    } else {
        FellerClass::Violated
    })
}

/// The map from variance to asset volatility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HFunction {
    #[default]
    Sqrt,
    Identity,
    /// Piecewise-linear through `points` (sorted by abscissa), flat outside.
    Tabulated {
        points: Vec<(f64, f64)>,
    },
}

impl HFunction {
    pub fn zero() -> Self {
        HFunction::Tabulated { points: vec![(0.0, 0.0)] }
    }

    pub fn constant(v: f64) -> Self {
        HFunction::Tabulated { points: vec![(0.0, v)] }
    }

    pub fn validate(&self) -> Result<()> {
        if let HFunction::Tabulated { points } = self {
            if points.is_empty() {
                return Err(Error::validation("h.points", "table is empty"));
            }
            for w in points.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::validation("h.points", "abscissae must increase strictly"));
                }
            }
            for &(x, v) in points {
                if !x.is_finite() || !v.is_finite() {
                    return Err(Error::validation("h.points", "entries must be finite"));
                }
                if x < 0.0 {
                    return Err(Error::validation("h.points", "abscissae must be >= 0"));
                }
                if v < 0.0 {
                    return Err(Error::validation("h.points", "h must be nonnegative"));
                }
            }
        }
        Ok(())
    }

    /// `h(y)`; errors for negative variance.
    pub fn eval(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::Domain(format!("h evaluated at negative variance {y}")));
        }
        Ok(self.value(y))
    }

    /// `h(y)` without the domain check. Negative inputs are clamped to 0.
    #[inline]
    pub fn value(&self, y: f64) -> f64 {
        let y = y.max(0.0);
        match self {
            HFunction::Sqrt => y.sqrt(),
            HFunction::Identity => y,
            HFunction::Tabulated { points } => {
                let n = points.len();
                if y <= points[0].0 {
                    return points[0].1;
                }
                if y >= points[n - 1].0 {
                    return points[n - 1].1;
                }
                let idx = points.partition_point(|p| p.0 <= y);
                let (x0, v0) = points[idx - 1];
                let (x1, v1) = points[idx];
                v0 + (v1 - v0) * (y - x0) / (x1 - x0)
            }
        }
    }

    /// `h'(y) * sqrt(y)`, finite at `y = 0` for the square-root map.
    pub fn slope_times_sqrt(&self, y: f64) -> f64 {
        let y = y.max(0.0);
        match self {
            HFunction::Sqrt => 0.5,
            HFunction::Identity => y.sqrt(),
            HFunction::Tabulated { points } => {
                let n = points.len();
                if n < 2 || y < points[0].0 || y >= points[n - 1].0 {
                    return 0.0;
                }
                let idx = points.partition_point(|p| p.0 <= y);
                let (x0, v0) = points[idx - 1];
                let (x1, v1) = points[idx];
                (v1 - v0) / (x1 - x0) * y.sqrt()
            }
        }
    }
}

fn default_loading() -> f64 {
    1.0
}

/// Parameters shared by the whole portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalParams {
    /// Correlation of the systemic pair `(W0, B0)`.
    pub rho3: f64,
    #[serde(default)]
    pub h: HFunction,
    /// Horizon `T`.
    pub horizon: f64,
    /// Loading of the independent part of each asset noise; 1 means the
    /// idiosyncratic asset and variance noises are independent.
    #[serde(default = "default_loading")]
    pub w1: f64,
    /// Same for the variance noise.
    #[serde(default = "default_loading")]
    pub b1: f64,
}

impl GlobalParams {
    pub fn new(rho3: f64, h: HFunction, horizon: f64) -> Self {
        Self { rho3, h, horizon, w1: 1.0, b1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho3.abs() <= 1.0) {
            return Err(Error::validation("rho3", format!("must lie in [-1, 1], got {}", self.rho3)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("horizon", "must be positive and finite"));
        }
        for (key, v) in [("w1", self.w1), ("b1", self.b1)] {
            if !(v.abs() <= 1.0) {
                return Err(Error::validation(key, format!("must lie in [-1, 1], got {v}")));
            }
            if v == 0.0 {
                return Err(Error::validation(key, "must be nonzero"));
            }
        }
        self.h.validate()
    }

    /// True when the idiosyncratic asset and variance noises share a common factor.
    pub fn correlated_idiosyncratic(&self) -> bool {
        self.w1.abs() < 1.0 || self.b1.abs() < 1.0
    }
}

/// Cross-derivative coefficient of the limit equation:
/// `xi rho3 rho1 rho2 + xi sqrt(1-rho1^2) sqrt(1-rho2^2) sqrt(1-w1^2) sqrt(1-b1^2)`.
pub fn compute_rho(c: &CoeffVector, g: &GlobalParams) -> f64 {
    let systemic = c.xi * g.rho3 * c.rho1 * c.rho2;
    let idio = c.xi
        * (1.0 - c.rho1 * c.rho1).sqrt()
        * (1.0 - c.rho2 * c.rho2).sqrt()
        * (1.0 - g.w1 * g.w1).max(0.0).sqrt()
        * (1.0 - g.b1 * g.b1).max(0.0).sqrt();
    systemic + idio
}

/// The systemic part `xi rho3 rho1 rho2` of the cross coefficient.
pub fn systemic_rho(c: &CoeffVector, g: &GlobalParams) -> f64 {
    c.xi * g.rho3 * c.rho1 * c.rho2
}

/// `|rho - xi rho3 rho1 rho2| <= xi sqrt(1-rho1^2) sqrt(1-rho2^2)`.
pub fn rho_admissible(c: &CoeffVector, g: &GlobalParams, rho: f64) -> bool {
    let bound = c.xi * (1.0 - c.rho1 * c.rho1).sqrt() * (1.0 - c.rho2 * c.rho2).sqrt();
    // Rounding slack so that the boundary case w1 = b1 = 0 is accepted.
    (rho - systemic_rho(c, g)).abs() <= bound * (1.0 + 1e-12) + 1e-15
}

/// One-dimensional law used for each coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSampler {
    Point { value: f64 },
    Uniform { lo: f64, hi: f64 },
    LogNormal { log_mean: f64, log_sd: f64 },
}

impl FieldSampler {
    fn validate(&self, key: &str) -> Result<()> {
        match *self {
            FieldSampler::Point { value } if !value.is_finite() => {
                Err(Error::validation(key, "point mass must be finite"))
            }
            FieldSampler::Uniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                Err(Error::validation(key, "uniform needs finite lo < hi"))
            }
            FieldSampler::LogNormal { log_mean, log_sd }
                if !(log_mean.is_finite() && log_sd >= 0.0 && log_sd.is_finite()) =>
            {
                Err(Error::validation(key, "lognormal needs finite log_mean and log_sd >= 0"))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            FieldSampler::Point { value } => value,
            FieldSampler::Uniform { lo, hi } => Uniform::new(lo, hi).map(|u| u.sample(rng)).unwrap_or(lo),
            FieldSampler::LogNormal { log_mean, log_sd } => {
                LogNormal::new(log_mean, log_sd).map(|d| d.sample(rng)).unwrap_or(log_mean.exp())
            }
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, FieldSampler::Point { .. })
    }
}

fn default_attempts() -> usize {
    1000
}

/// Independent per-field laws for a coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffDistribution {
    pub k: FieldSampler,
    pub theta: FieldSampler,
    pub xi: FieldSampler,
    pub r: FieldSampler,
    pub rho1: FieldSampler,
    pub rho2: FieldSampler,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl CoeffDistribution {
    pub fn point(c: CoeffVector) -> Self {
        let p = |value| FieldSampler::Point { value };
        Self {
            k: p(c.k),
            theta: p(c.theta),
            xi: p(c.xi),
            r: p(c.r),
            rho1: p(c.rho1),
            rho2: p(c.rho2),
            max_attempts: default_attempts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, s) in [
            ("coeff.k", &self.k),
            ("coeff.theta", &self.theta),
            ("coeff.xi", &self.xi),
            ("coeff.r", &self.r),
            ("coeff.rho1", &self.rho1),
            ("coeff.rho2", &self.rho2),
        ] {
            s.validate(key)?;
        }
        if self.max_attempts == 0 {
            return Err(Error::validation("coeff.max_attempts", "must be positive"));
        }
        Ok(())
    }

    pub fn is_point_mass(&self) -> bool {
        [self.k, self.theta, self.xi, self.r, self.rho1, self.rho2].iter().all(FieldSampler::is_point)
    }

    /// Draws until the vector passes `mode`, up to `max_attempts` times.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mode: Validation) -> Result<CoeffVector> {
        let mut last = None;
        for _ in 0..self.max_attempts {
            let c = CoeffVector {
                k: self.k.sample(rng),
                theta: self.theta.sample(rng),
                xi: self.xi.sample(rng),
                r: self.r.sample(rng),
                rho1: self.rho1.sample(rng),
                rho2: self.rho2.sample(rng),
            };
            match c.validate(mode) {
                Ok(_) => return Ok(c),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::validation(
            "coeff",
            format!(
                "no valid draw in {} attempts (last: {})",
                self.max_attempts,
                last.map(|e| e.to_string()).unwrap_or_default()
            ),
        ))
    }
}
