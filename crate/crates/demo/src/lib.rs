//! Three operations for the static page in `www/`: the variance transition
//! density, the conditional 1D loss on a seeded market path, and particles
//! against the limit loss. Everything runs single threaded.

use credit_spde::cir::{cir_density, VarianceLaw};
use credit_spde::field::{Grid1D, Grid2D};
use credit_spde::model::{compute_rho, CoeffVector, GlobalParams, HFunction, Validation};
use credit_spde::particles::{
    gen_market_path, simulate_portfolio, CoeffSource, InitialLaw, Portfolio, PositionLaw, SimOptions,
};
use credit_spde::rng::stream;
use credit_spde::spde1d::{loss_1d, solve_1d, Density1D, Scheme1D, VolPath};
use credit_spde::spde2d::{default_ymax, initial_field, solve_spde2d, Scheme2D};
use credit_spde::Error;
use wasm_bindgen::prelude::*;

const START: PositionLaw = PositionLaw::LogNormal { log_mean: -0.5, log_sd: 0.25, shift: 0.0 };

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Node values of the CIR density at `t` on `[0, ymax]`, `n` cells.
#[wasm_bindgen]
pub fn variance_density(
    k: f64,
    theta: f64,
    xi: f64,
    sigma0: f64,
    t: f64,
    ymax: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    density(k, theta, xi, sigma0, t, ymax, n).map_err(js)
}

fn density(k: f64, theta: f64, xi: f64, sigma0: f64, t: f64, ymax: f64, n: usize) -> Result<Vec<f64>, Error> {
    let c = CoeffVector { k, theta, xi, r: 0.0, rho1: 0.0, rho2: 0.0 };
    c.validate(Validation::Permissive)?;
    let grid = Grid1D::new(ymax, n)?;
    Ok((0..grid.nodes()).map(|j| cir_density(&c, sigma0, t, grid.x(j))).collect())
}

/// Loss of the 1D equation with constant vol `s` over `[0, 1]`, one value
/// per time step.
#[wasm_bindgen]
pub fn loss_1d_curve(s: f64, r: f64, rho1: f64, seed: u64, steps: usize) -> Result<Vec<f64>, JsError> {
    loss_1d_values(s, r, rho1, seed, steps).map_err(js)
}

fn loss_1d_values(s: f64, r: f64, rho1: f64, seed: u64, steps: usize) -> Result<Vec<f64>, Error> {
    let g = GlobalParams::new(0.0, HFunction::constant(s), 1.0);
    let mp = gen_market_path(&g, steps, &mut stream(seed, 0))?;
    let grid = Grid1D::new(4.0, 128)?;
    let u0 = Density1D::from_fn(grid, |x| START.density(x).unwrap_or(0.0));
    let sol = solve_1d(&u0, &VolPath::constant(s * s, 1.0), r, rho1, &mp, &Scheme1D::default())?;
    Ok(loss_1d(&sol).values)
}

#[wasm_bindgen]
pub struct LossPair {
    times: Vec<f64>,
    particles: Vec<f64>,
    limit: Vec<f64>,
}

#[wasm_bindgen]
impl LossPair {
    #[wasm_bindgen(getter)]
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn particles(&self) -> Vec<f64> {
        self.particles.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn limit(&self) -> Vec<f64> {
        self.limit.clone()
    }
}

/// `n` Heston names with `h(y) = sqrt(y)` against the limit loss on the
/// same market path, horizon 1, 200 steps, 48x24 grid.
#[wasm_bindgen]
pub fn particles_vs_limit(n: usize, rho1: f64, rho2: f64, rho3: f64, seed: u64) -> Result<LossPair, JsError> {
    loss_pair(n, rho1, rho2, rho3, seed).map_err(js)
}

fn loss_pair(n: usize, rho1: f64, rho2: f64, rho3: f64, seed: u64) -> Result<LossPair, Error> {
    let c = CoeffVector { k: 2.0, theta: 0.09, xi: 0.2, r: 0.03, rho1, rho2 };
    let g = GlobalParams::new(rho3, HFunction::Sqrt, 1.0);
    c.validate(Validation::Strict)?;
    let init = InitialLaw { x: START, sigma: VarianceLaw::Gamma { shape: 20.0, scale: 0.0045 } };
    let mp = gen_market_path(&g, 200, &mut stream(seed, 0))?;
    let pf = Portfolio { n, coeffs: CoeffSource::Fixed(c), init, global: g.clone(), validation: Validation::Strict };
    let tr = simulate_portfolio(&pf, &mp, seed, seed.wrapping_add(1), &SimOptions::default(), None)?;
    let grid = Grid2D::new(4.0, default_ymax(&c), 48, 24)?;
    let u0 = initial_field(&grid, &init)?;
    let sol = solve_spde2d(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &[], None)?;
    Ok(LossPair { times: mp.times.clone(), particles: tr.loss.values, limit: sol.loss.values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_has_unit_mass() {
        let d = density(2.0, 0.09, 0.2, 0.04, 1.0, 0.4, 400).unwrap();
        let dy = 0.4 / 400.0;
        let m: f64 = d.iter().sum::<f64>() * dy - 0.5 * dy * (d[0] + d[400]);
        assert!((m - 1.0).abs() < 1e-3, "{m}");
    }

    #[test]
    fn loss_curve_is_monotone() {
        let l = loss_1d_values(0.3, 0.03, 0.5, 3, 200).unwrap();
        assert_eq!(l.len(), 201);
        assert!(l.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn particles_track_the_limit() {
        let p = loss_pair(2000, 0.4, 0.3, 0.5, 9).unwrap();
        assert_eq!(p.times().len(), p.limit().len());
        let gap = (p.particles().last().unwrap() - p.limit().last().unwrap()).abs();
        assert!(gap < 0.03, "{gap}");
    }
}
