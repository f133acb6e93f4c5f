//! The JSON run configuration.
//!
//! Unknown keys are rejected everywhere. Overrides of the form
//! `a.b.c=value` are applied to the JSON tree before it is deserialized, so
//! every key reachable in the document can be set from the command line.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::Grid1D;
use crate::model::{compute_rho, rho_admissible, CoeffVector, FellerClass, GlobalParams, Validation};
use crate::particles::{CoeffSource, InitialLaw};
use crate::rng::{derive_seed, SeedSet};
use crate::spde1d::{Scheme1D, VolPath};
use crate::spde2d::{default_ymax, Scheme2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Particles,
    Spde,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub xmax: f64,
    /// Defaults to the largest `default_ymax` over the coefficient samples.
    #[serde(default)]
    pub ymax: Option<f64>,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub master: u64,
    #[serde(default)]
    pub market: Option<u64>,
    #[serde(default)]
    pub coeffs: Option<u64>,
    #[serde(default)]
    pub particles: Option<u64>,
}

impl SeedSpec {
    pub fn resolve(&self) -> SeedSet {
        let d = SeedSet::from_master(self.master);
        SeedSet {
            market: self.market.unwrap_or(d.market),
            coeffs: self.coeffs.unwrap_or(d.coeffs),
            particles: self.particles.unwrap_or(d.particles),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrancheSpec {
    pub attachment: f64,
    pub detachment: f64,
}

impl TrancheSpec {
    pub fn new(attachment: f64, detachment: f64) -> Result<Self> {
        let t = Self { attachment, detachment };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.attachment && self.attachment < self.detachment && self.detachment <= 1.0) {
            return Err(Error::validation(
                "tranche",
                format!("need 0 <= attachment < detachment <= 1, got [{}, {}]", self.attachment, self.detachment),
            ));
        }
        Ok(())
    }
}

/// Settings of the one-dimensional solve: the coefficient's `r` and `rho1`
/// with a prescribed variance path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spde1dSpec {
    pub xmax: f64,
    pub cells: usize,
    /// Defaults to the initial variance held constant.
    #[serde(default)]
    pub vol: Option<VolPath>,
    #[serde(default)]
    pub scheme: Scheme1D,
}

fn default_eps() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

fn default_deltas() -> Vec<f64> {
    vec![-0.5, 0.0, 1.0, 2.0]
}

/// Settings of the smoothing diagnostics, run on the variance transition
/// density of the (first) coefficient vector at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Range and resolution of the `sqrt(sigma)` grid.
    pub ymax: f64,
    pub cells: usize,
    /// Points of the variance grid `[0, ymax^2]`.
    pub z_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub market_paths: bool,
    /// Per-step particle states; large.
    #[serde(default)]
    pub trajectories: bool,
    /// Field snapshots at `record_times` as CSV matrices and binary dumps.
    #[serde(default)]
    pub snapshots: bool,
}

fn one() -> usize {
    1
}

fn default_ladder() -> Vec<usize> {
    vec![1000, 4000, 16000]
}

fn default_budget() -> usize {
    64_000
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub validation: Validation,
    /// Portfolio size `N`.
    pub n_particles: usize,
    /// Coefficient draws `n` averaged by the limit loss estimate.
    #[serde(default = "one")]
    pub n_coeff_samples: usize,
    /// Time steps `M` of every market path.
    pub steps: usize,
    #[serde(default = "one")]
    pub n_market_paths: usize,
    pub global: GlobalParams,
    pub coeff: CoeffSource,
    pub init: InitialLaw,
    /// Optional binary field dump replacing the product initial density.
    #[serde(default)]
    pub init_field: Option<String>,
    pub grid: GridSpec,
    #[serde(default)]
    pub scheme: Scheme2D,
    pub seeds: SeedSpec,
    #[serde(default)]
    pub tranche: Option<TrancheSpec>,
    /// Times at which densities are compared and snapshots kept.
    #[serde(default)]
    pub record_times: Vec<f64>,
    /// Portfolio sizes of the convergence table.
    #[serde(default = "default_ladder")]
    pub n_ladder: Vec<usize>,
    /// Particles simulated per ladder level; smaller levels are replicated
    /// `budget / N` times so that every level costs the same.
    #[serde(default = "default_budget")]
    pub ladder_budget: usize,
    #[serde(default)]
    pub spde1d: Option<Spde1dSpec>,
    #[serde(default)]
    pub smoothing: Option<SmoothingSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Sets `path` (dot separated) in `doc` to `raw`, parsed as JSON when it
/// parses and kept as a string otherwise. Missing objects are created.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::validation(path, "empty key segment in override"));
    }
    let mut node = doc;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize =
                    key.parse().map_err(|_| Error::validation(path, format!("'{key}' is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| Error::validation(path, format!("index {i} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::validation(path, format!("'{key}' is not inside an object"))),
        };
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) =
        s.split_once('=').ok_or_else(|| Error::validation("--set", format!("expected KEY=VALUE, got '{s}'")))?;
    Ok((k.trim().to_string(), v.to_string()))
}

/// Turns serde's "unknown field" messages into an error naming the key.
fn schema_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let key = msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string());
    Error::validation(key, msg)
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(schema_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(schema_error)?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    /// The coefficient vectors fixed or sampled for the limit equation,
    /// in sample order.
    pub fn coeff_samples(&self) -> Result<Vec<CoeffVector>> {
        let seed = derive_seed(self.seeds.resolve().coeffs, "limit");
        match &self.coeff {
            CoeffSource::Fixed(c) => {
                c.validate(self.validation)?;
                Ok(vec![*c; self.n_coeff_samples])
            }
            CoeffSource::Distribution(d) => (0..self.n_coeff_samples as u64)
                .map(|i| d.sample(&mut crate::rng::stream(seed, i), self.validation))
                .collect(),
        }
    }

    pub fn grid_for(&self, coeffs: &[CoeffVector]) -> Result<crate::field::Grid2D> {
        let ymax = match self.grid.ymax {
            Some(y) => y,
            None => coeffs.iter().map(default_ymax).fold(0.0, f64::max),
        };
        crate::field::Grid2D::new(self.grid.xmax, ymax, self.grid.nx, self.grid.ny)
    }

    /// Grid indices of `record_times`, sorted and without repeats.
    pub fn record_steps(&self) -> Result<Vec<usize>> {
        let mp = crate::particles::MarketPath::zero(self.global.horizon, self.steps);
        let mut steps = self
            .record_times
            .iter()
            .map(|&t| {
                mp.index_of(t).ok_or_else(|| {
                    Error::validation("record_times", format!("t = {t} is not a multiple of the time step"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }

    /// Checks every section; nothing is computed before this passes.
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 && self.mode != Mode::Spde {
            return Err(Error::validation("n_particles", "must be positive"));
        }
        if self.n_coeff_samples == 0 {
            return Err(Error::validation("n_coeff_samples", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be positive"));
        }
        if self.n_market_paths == 0 {
            return Err(Error::validation("n_market_paths", "must be positive"));
        }
        self.global.validate()?;
        self.init.validate()?;
        match &self.coeff {
            CoeffSource::Fixed(c) => {
                c.validate(self.validation)?;
                let rho = compute_rho(c, &self.global);
                if !rho_admissible(c, &self.global, rho) {
                    return Err(Error::validation("coeff", format!("cross coefficient {rho} is not admissible")));
                }
            }
            CoeffSource::Distribution(d) => d.validate()?,
        }
        if self.mode != Mode::Particles {
            self.grid_for(&self.coeff_samples()?)?;
        }
        if let Some(t) = &self.tranche {
            t.validate()?;
        }
        self.record_steps()?;
        if self.n_ladder.contains(&0) {
            return Err(Error::validation("n_ladder", "sizes must be positive"));
        }
        if self.ladder_budget == 0 {
            return Err(Error::validation("ladder_budget", "must be positive"));
        }
        if !(self.scheme.cfl > 0.0 && self.scheme.clamp_tol >= 0.0) {
            return Err(Error::validation("scheme", "cfl must be positive, clamp_tol >= 0"));
        }
        if let Some(s) = &self.spde1d {
            Grid1D::new(s.xmax, s.cells)?;
            if let Some(v) = &s.vol {
                v.validate()?;
            }
            if !(s.scheme.cfl > 0.0) {
                return Err(Error::validation("spde1d.scheme.cfl", "must be positive"));
            }
        }
        if let Some(s) = &self.smoothing {
            crate::smoothing::WeightedNorm::new(0.0, (0.0, s.ymax))?;
            Grid1D::new(s.ymax, s.cells)?;
            if s.z_points < 2 {
                return Err(Error::validation("smoothing.z_points", "need at least two points"));
            }
            for &d in &s.deltas {
                crate::smoothing::WeightedNorm::new(d, (0.0, s.ymax))?;
            }
            if s.eps.len() < 2 || s.eps.windows(2).any(|w| !(w[1] < w[0])) || s.eps.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::validation("smoothing.eps", "need a strictly decreasing ladder of positive values"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization of everything that affects
    /// results (output switches excluded), in hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSpec::default();
        let text = serde_json::to_string(&c).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Name of the run directory: the first 16 hex digits of the hash.
    pub fn run_name(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Feller class and cross-coefficient admissibility of each coefficient
    /// vector used by the limit equation.
    pub fn checks(&self) -> Result<Vec<CoeffCheck>> {
        self.coeff_samples()?
            .into_iter()
            .map(|c| {
                let rho = compute_rho(&c, &self.global);
                Ok(CoeffCheck {
                    coeff: c,
                    feller: crate::model::feller_check(&c)?,
                    rho,
                    rho_admissible: rho_admissible(&c, &self.global, rho),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoeffCheck {
    pub coeff: CoeffVector,
    pub feller: FellerClass,
    pub rho: f64,
    pub rho_admissible: bool,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
        "mode": "both",
        "n_particles": 500,
        "steps": 100,
        "global": { "rho3": 0.5, "h": { "kind": "sqrt" }, "horizon": 0.25 },
        "coeff": { "fixed": { "k": 2.0, "theta": 0.09, "xi": 0.2, "r": 0.03, "rho1": 0.4, "rho2": 0.3 } },
        "init": { "x": { "law": "point", "value": 1.0 }, "sigma": { "law": "point", "value": 0.09 } },
        "grid": { "xmax": 4.0, "nx": 64, "ny": 32 },
        "seeds": { "master": 7 }
    }"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = RunConfig::from_json(SAMPLE, &[]).unwrap();
        assert_eq!(c.n_coeff_samples, 1);
        assert_eq!(c.n_ladder, vec![1000, 4000, 16000]);
        assert_eq!(c.global.w1, 1.0);
        let again = RunConfig::from_json(&c.to_json(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = SAMPLE.replace("\"steps\": 100", "\"steps\": 100, \"stpes\": 3");
        match RunConfig::from_json(&bad, &[]) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "stpes"),
            other => panic!("{other:?}"),
        }
        let bad = SAMPLE.replace("\"xmax\": 4.0", "\"xmax\": 4.0, \"nz\": 1");
        assert!(matches!(RunConfig::from_json(&bad, &[]), Err(Error::Validation { key, .. }) if key == "nz"));
    }

    #[test]
    fn overrides_win_and_change_the_hash() {
        let base = RunConfig::from_json(SAMPLE, &[]).unwrap();
        let o = vec![
            ("coeff.fixed.k".to_string(), "3.0".to_string()),
            ("seeds.master".to_string(), "8".to_string()),
            ("mode".to_string(), "spde".to_string()),
        ];
        let c = RunConfig::from_json(SAMPLE, &o).unwrap();
        assert!(matches!(c.coeff, CoeffSource::Fixed(v) if v.k == 3.0));
        assert_eq!(c.seeds.master, 8);
        assert_eq!(c.mode, Mode::Spde);
        assert_ne!(c.hash(), base.hash());
        let quiet = RunConfig::from_json(SAMPLE, &[("output.snapshots".into(), "true".into())]).unwrap();
        assert_eq!(quiet.hash(), base.hash());
        assert_eq!(base.run_name().len(), 16);
    }

    #[test]
    fn strict_validation_names_the_condition() {
        let o = vec![("coeff.fixed.xi".to_string(), "0.5".to_string())];
        match RunConfig::from_json(SAMPLE, &o) {
            Err(Error::Validation { key, reason }) => {
                assert!(key.contains("xi") || reason.contains("3/4") || reason.contains("0.75"), "{key}: {reason}")
            }
            other => panic!("{other:?}"),
        }
        let o = vec![
            ("validation".to_string(), "permissive".to_string()),
            ("coeff.fixed.xi".to_string(), "0.5".to_string()),
        ];
        assert!(RunConfig::from_json(SAMPLE, &o).is_ok());
    }

    #[test]
    fn override_paths() {
        let mut v: Value = serde_json::from_str(r#"{"a": {"b": [1, 2]}}"#).unwrap();
        apply_override(&mut v, "a.b.1", "5").unwrap();
        apply_override(&mut v, "a.c.d", "x").unwrap();
        assert_eq!(v["a"]["b"][1], 5);
        assert_eq!(v["a"]["c"]["d"], "x");
        assert!(apply_override(&mut v, "a.b.7", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("a.b=c=d").unwrap(), ("a.b".to_string(), "c=d".to_string()));
    }

    #[test]
    fn record_times_must_be_on_the_grid() {
        let o = vec![("record_times".to_string(), "[0.125]".to_string())];
        assert_eq!(RunConfig::from_json(SAMPLE, &o).unwrap().record_steps().unwrap(), vec![50]);
        let o = vec![("record_times".to_string(), "[0.1234]".to_string())];
        assert!(RunConfig::from_json(SAMPLE, &o).is_err());
    }

    #[test]
    fn tranche_bounds() {
        assert!(TrancheSpec::new(0.03, 0.07).is_ok());
        assert!(TrancheSpec::new(0.07, 0.03).is_err());
        assert!(TrancheSpec::new(0.0, 1.1).is_err());
    }
}
