use proptest::prelude::*;

use credit_spde::config::TrancheSpec;
use credit_spde::field::{DensityField, Grid1D, Grid2D};
use credit_spde::io::{load_field, read_field, save_field, write_field};
use credit_spde::model::{compute_rho, CoeffVector, GlobalParams, HFunction};
use credit_spde::orchestrator::tranche_payoff;
use credit_spde::spde1d::{solve_1d, Density1D, Scheme1D, VolPath};
use credit_spde::spde2d::{spde2d_step, Scheme2D};

fn bump(grid: Grid2D, cx: f64, cy: f64) -> DensityField {
    let mut u = DensityField::from_fn(grid, |x, y| {
        let v = (-(x - cx).powi(2) / 0.05 - (y - cy).powi(2) / 0.002).exp();
        if x == 0.0 || x >= grid.xmax || y >= grid.ymax {
            0.0
        } else {
            v
        }
    });
    let m = u.mass();
    u.values.iter_mut().for_each(|v| *v /= m);
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn field_dump_round_trips(nx in 16usize..40, ny in 16usize..40, t in 0.0f64..5.0, seed in any::<u64>()) {
        let grid = Grid2D::new(3.0, 0.5, nx, ny).unwrap();
        let mut u = DensityField::zeros(grid);
        u.t = t;
        let mut s = seed | 1;
        for v in u.values.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *v = f64::from_bits(s >> 12 | 0x3ff0_0000_0000_0000) - 1.0;
        }
        let mut buf = Vec::new();
        write_field(&u, &mut buf).unwrap();
        let back = read_field(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &u);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.bin");
        save_field(&u, &path).unwrap();
        prop_assert_eq!(load_field(&path).unwrap(), u);
        buf.truncate(buf.len() - 8);
        prop_assert!(read_field(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn tranche_payoff_is_bounded_and_monotone(a in 0.0f64..0.9, w in 0.01f64..0.5, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        let tr = TrancheSpec::new(a, (a + w).min(1.0)).unwrap();
        let (p1, p2) = (tranche_payoff(l1, &tr), tranche_payoff(l2, &tr));
        prop_assert!((0.0..=1.0).contains(&p1));
        if l1 <= l2 {
            prop_assert!(p1 <= p2);
        }
        prop_assert_eq!(tranche_payoff(a * 0.5, &tr), 0.0);
        prop_assert_eq!(tranche_payoff(1.0, &tr), 1.0);
    }

    #[test]
    fn one_dimensional_mass_never_grows(
        s2 in 0.01f64..0.2,
        r in -0.05f64..0.1,
        rho1 in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let grid = Grid1D::new(4.0, 128).unwrap();
        let u0 = Density1D::from_fn(grid, |x| x * x * (-4.0 * x).exp()).normalized(1.0);
        let g = GlobalParams::new(0.0, HFunction::Sqrt, 0.5);
        let mp = credit_spde::particles::gen_market_path(&g, 200, &mut credit_spde::rng::stream(seed, 0)).unwrap();
        let sol = solve_1d(&u0, &VolPath::constant(s2, 0.5), r, rho1, &mp, &Scheme1D::default()).unwrap();
        let masses: Vec<f64> = sol.values.iter().map(|u| (0..grid.nodes()).map(|i| grid.weight(i) * u[i]).sum()).collect();
        for w in masses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(sol.values.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn two_dimensional_step_invariants(
        rho1 in -0.9f64..0.9,
        rho2 in -0.9f64..0.9,
        rho3 in -1.0f64..1.0,
        dw0 in -0.05f64..0.05,
        db0 in -0.05f64..0.05,
        cx in 0.6f64..2.0,
        cy in 0.05f64..0.2,
    ) {
        let c = CoeffVector { k: 2.0, theta: 0.09, xi: 0.2, r: 0.03, rho1, rho2 };
        let g = GlobalParams::new(rho3, HFunction::Sqrt, 1.0);
        let grid = Grid2D::new(4.0, 0.4, 64, 32).unwrap();
        let u = bump(grid, cx, cy);
        let dt = 0.002;
        let (next, rep) = spde2d_step(&u, &c, &g, compute_rho(&c, &g), dt, dw0, db0, &Scheme2D::default()).unwrap();
        prop_assert!(next.values.iter().all(|v| v.is_finite()));
        prop_assert!((0..=grid.ny).all(|j| next.at(0, j) == 0.0));
        // Outflows are mass differences, so rounding may leave them at -eps.
        prop_assert!(rep.left_out > -1e-14 && rep.right_out > -1e-14 && rep.top_out > -1e-14, "{:?}", rep);
        prop_assert!(next.min() >= -1e-6 * next.max());
        let change = next.mass() - u.mass();
        prop_assert!(change <= 1e-4, "mass grew by {change}");

        // Linear in the initial field when nothing is limited.
        let lin = CoeffVector { rho1: 0.0, rho2: 0.0, ..c };
        let scheme = Scheme2D { limit_transport: false, ..Scheme2D::default() };
        let step = |u: &DensityField| spde2d_step(u, &lin, &g, compute_rho(&lin, &g), dt, dw0, db0, &scheme).unwrap().0;
        let v = bump(grid, 1.0, 0.1);
        let mut sum = u.clone();
        sum.add_assign(&v);
        let mut parts = step(&u);
        parts.add_assign(&step(&v));
        let whole = step(&sum);
        let err = whole.values.iter().zip(&parts.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err < 1e-10 * whole.max());
    }
}
