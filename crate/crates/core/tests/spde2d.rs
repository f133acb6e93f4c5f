use credit_spde::cir::{cir_density, VarianceLaw};
use credit_spde::field::Grid2D;
use credit_spde::model::{compute_rho, CoeffVector, GlobalParams, HFunction, Validation};
use credit_spde::particles::{
    gen_market_path, simulate_portfolio, CoeffSource, InitialLaw, MarketPath, Portfolio, PositionLaw, SimOptions,
};
use credit_spde::rng::stream;
use credit_spde::spde1d::{loss_1d, solve_1d, Density1D, Scheme1D, VolPath};
use credit_spde::spde2d::{
    initial_field, particle_moments, solve_spde2d, solve_with_weak_form, Scheme2D, WeakFormResidual, WeakMoments,
    XExpTest,
};

fn heston() -> CoeffVector {
    CoeffVector { k: 2.0, theta: 0.09, xi: 0.2, r: 0.03, rho1: 0.4, rho2: 0.3 }
}

fn smooth_init() -> InitialLaw {
    InitialLaw {
        x: PositionLaw::LogNormal { log_mean: -0.5, log_sd: 0.25, shift: 0.0 },
        sigma: VarianceLaw::Gamma { shape: 20.0, scale: 0.0045 },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Without correlations and with constant h the field factorizes and its
/// asset marginal is the conditional 1D density.
#[test]
fn factorized_field_has_the_1d_marginal() {
    let c = CoeffVector { rho1: 0.0, rho2: 0.0, ..heston() };
    let g = GlobalParams::new(0.5, HFunction::constant(0.3), 0.5);
    let grid = Grid2D::new(4.0, 0.4, 128, 32).unwrap();
    let u0 = initial_field(&grid, &smooth_init()).unwrap();
    let mp = gen_market_path(&g, 500, &mut stream(21, 0)).unwrap();
    let sol = solve_spde2d(&u0, &c, &g, 0.0, &mp, &Scheme2D::default(), &[500], None).unwrap();
    let u1 = Density1D { grid: grid.x_grid(), t: 0.0, values: u0.marginal_x() };
    let s1 = solve_1d(&u1, &VolPath::constant(0.09, 0.5), c.r, 0.0, &mp, &Scheme1D::default()).unwrap();
    let gap = max_abs_diff(&sol.snapshots[0].marginal_x(), &s1.last().values);
    assert!(gap < 1e-2, "{gap}");
}

/// With vanishing vol-of-vol the variance stays at `theta` and the asset
/// sees `h(theta)^2`.
#[test]
fn frozen_variance_reduces_to_1d() {
    let c = CoeffVector { xi: 1e-6, ..heston() };
    let g = GlobalParams::new(0.5, HFunction::Sqrt, 1.0);
    let grid = Grid2D::new(4.0, 0.18, 128, 32).unwrap();
    let init = InitialLaw { x: smooth_init().x, sigma: VarianceLaw::Point { value: c.theta } };
    let u0 = initial_field(&grid, &init).unwrap();
    let mp = gen_market_path(&g, 1000, &mut stream(22, 0)).unwrap();
    let sol = solve_spde2d(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &[], None).unwrap();
    let u1 = Density1D { grid: grid.x_grid(), t: 0.0, values: u0.marginal_x() };
    let s1 = solve_1d(&u1, &VolPath::constant(c.theta, 1.0), c.r, c.rho1, &mp, &Scheme1D::default()).unwrap();
    let gap = max_abs_diff(&sol.loss.values, &loss_1d(&s1).values);
    assert!(gap < 1e-3, "{gap}");
}

/// Far from the default barrier and without systemic variance noise the
/// variance marginal is the CIR transition density.
#[test]
fn variance_marginal_is_cir_without_defaults() {
    let c = CoeffVector { rho2: 0.0, ..heston() };
    let g = GlobalParams::new(0.5, HFunction::Sqrt, 0.5);
    let grid = Grid2D::new(4.0, 0.4, 64, 128).unwrap();
    let sigma0 = grid.y(29);
    let init = InitialLaw { x: PositionLaw::Point { value: 2.0 }, sigma: VarianceLaw::Point { value: sigma0 } };
    let u0 = initial_field(&grid, &init).unwrap();
    let mp = gen_market_path(&g, 2000, &mut stream(23, 0)).unwrap();
    let sol = solve_spde2d(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &[2000], None).unwrap();
    assert!(sol.loss.terminal() < 1e-8);
    let my = sol.snapshots[0].marginal_y();
    let exact: Vec<f64> = (0..=grid.ny).map(|j| cir_density(&c, sigma0, 0.5, grid.y(j))).collect();
    let peak = exact.iter().fold(0.0f64, |m, v| m.max(*v));
    let gap = max_abs_diff(&my, &exact) / peak;
    assert!(gap < 1e-2, "relative gap {gap}");
}

#[test]
fn marginal_mass_is_one_minus_loss() {
    let c = heston();
    let g = GlobalParams::new(0.5, HFunction::Sqrt, 1.0);
    let grid = Grid2D::new(4.0, 0.4, 64, 32).unwrap();
    let u0 = initial_field(&grid, &smooth_init()).unwrap();
    let mp = gen_market_path(&g, 400, &mut stream(24, 0)).unwrap();
    let record = [100, 200, 400];
    let sol = solve_spde2d(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &record, None).unwrap();
    let yg = grid.y_grid();
    for (snap, step) in sol.snapshots.iter().zip(record) {
        let my = snap.marginal_y();
        let m: f64 = (0..=grid.ny).map(|j| yg.weight(j) * my[j]).sum();
        assert!((m - (1.0 - sol.raw_loss[step])).abs() < 1e-8);
    }
    assert!(sol.loss.is_monotone());
}

#[test]
fn zero_noise_solves_are_bit_identical() {
    let c = heston();
    let g = GlobalParams::new(0.5, HFunction::Sqrt, 1.0);
    let grid = Grid2D::new(4.0, 0.4, 64, 32).unwrap();
    let u0 = initial_field(&grid, &smooth_init()).unwrap();
    let mp = MarketPath::zero(1.0, 300);
    let run = || solve_spde2d(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &[300], None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.snapshots[0].values, b.snapshots[0].values);
    assert_eq!(a.loss.values, b.loss.values);
}

/// The empirical measure solves the weak form up to the idiosyncratic
/// fluctuation of order `1/sqrt(N)`, and so does the grid solution.
#[test]
fn particles_and_field_satisfy_the_weak_form() {
    let c = heston();
    let g = GlobalParams::new(0.5, HFunction::Sqrt, 1.0);
    let mp = gen_market_path(&g, 500, &mut stream(25, 0)).unwrap();
    let n = 20_000;
    let pf = Portfolio {
        n,
        coeffs: CoeffSource::Fixed(c),
        init: smooth_init(),
        global: g.clone(),
        validation: Validation::Strict,
    };
    let mut moments: Vec<WeakMoments> = Vec::new();
    let mut obs =
        |_: usize, states: &[_], coeffs: &[CoeffVector]| moments.push(particle_moments(states, coeffs, &XExpTest, &g));
    simulate_portfolio(&pf, &mp, 3, 4, &SimOptions::default(), Some(&mut obs)).unwrap();
    let res = WeakFormResidual::from_moments(&mp, &moments, (-1.0f64).exp()).unwrap();
    let bound = 1e-2 + 3.0 / (n as f64).sqrt();
    assert!(res.max_abs() < bound, "particles {} vs {bound}", res.max_abs());

    let grid = Grid2D::new(4.0, 0.4, 128, 64).unwrap();
    let u0 = initial_field(&grid, &smooth_init()).unwrap();
    let (_, field) =
        solve_with_weak_form(&u0, &c, &g, compute_rho(&c, &g), &mp, &Scheme2D::default(), &XExpTest).unwrap();
    assert!(field.max_abs() < 1e-2, "field {}", field.max_abs());
}
