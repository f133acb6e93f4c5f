//! Square-root heat kernel smoothing, weighted L2 norms and density
//! estimates for particle clouds.
//!
//! The kernel `phi_eps(z, y)` is a Gaussian in `sqrt(z) - y`, so
//! `J_eps(y) = int u(z) phi_eps(z, y) dz` is the ordinary heat smoothing of
//! `J_u(v) = 2 v u(v^2)` in the variable `v = sqrt(z)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Grid1D;
use crate::util::{norm_cdf, par_map};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Smallest KDE bandwidth in the `sqrt(sigma)` coordinate.
pub const MIN_BANDWIDTH: f64 = 1e-4;

pub fn phi_eps(z: f64, y: f64, eps: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::Domain(format!("phi_eps needs z >= 0, got {z}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("phi_eps needs eps > 0, got {eps}")));
    }
    let d = z.sqrt() - y;
    Ok((-d * d / (2.0 * eps)).exp() / (SQRT_2PI * eps.sqrt()))
}

/// A function of `z >= 0` sampled at `z_i = i * dz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZSamples {
    pub dz: f64,
    pub values: Vec<f64>,
}

impl ZSamples {
    pub fn from_fn(zmax: f64, points: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if points < 2 || !(zmax > 0.0) {
            return Err(Error::validation("z_grid", "need zmax > 0 and at least two points"));
        }
        let dz = zmax / (points - 1) as f64;
        Ok(Self { dz, values: (0..points).map(|i| f(i as f64 * dz)).collect() })
    }

    pub fn zmax(&self) -> f64 {
        self.dz * (self.values.len() - 1) as f64
    }

    /// Linear interpolation, zero beyond the last sample.
    pub fn at(&self, z: f64) -> f64 {
        if z < 0.0 || z > self.zmax() {
            return 0.0;
        }
        let s = z / self.dz;
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let w = s - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }
}

/// Trapezoid quadrature of `int u(z) phi_eps(z, y) dz` at each `y`.
pub fn smooth_j(u: &ZSamples, ys: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("smoothing needs eps > 0, got {eps}")));
    }
    if u.dz > eps / 4.0 {
        log::warn!("z spacing {:.2e} is coarse for eps = {eps:.2e}; expect quadrature error", u.dz);
    }
    let roots: Vec<f64> = (0..u.values.len()).map(|i| (i as f64 * u.dz).sqrt()).collect();
    let norm = 1.0 / (SQRT_2PI * eps.sqrt());
    let last = u.values.len() - 1;
    Ok(par_map(ys.len(), |k| {
        let y = ys[k];
        let mut s = 0.0;
        for (i, (&v, &r)) in u.values.iter().zip(&roots).enumerate() {
            if v == 0.0 {
                continue;
            }
            let d = r - y;
            let w = if i == 0 || i == last { 0.5 } else { 1.0 };
            s += w * v * (-d * d / (2.0 * eps)).exp();
        }
        s * u.dz * norm
    }))
}

/// The `eps -> 0` limit `2 y u(y^2)`.
pub fn j_limit(u: &ZSamples, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    2.0 * y * u.at(y * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedNorm {
    /// Exponent of the weight `y^delta`.
    pub delta: f64,
    /// Integration range `[lo, hi]`, clipped to the grid.
    pub domain: (f64, f64),
}

impl WeightedNorm {
    pub fn new(delta: f64, domain: (f64, f64)) -> Result<Self> {
        let w = Self { delta, domain };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > -1.0) {
            return Err(Error::validation("delta", format!("weight exponent must exceed -1, got {}", self.delta)));
        }
        if !(self.domain.0 >= 0.0 && self.domain.1 > self.domain.0) {
            return Err(Error::validation("domain", "need 0 <= lo < hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormValue {
    pub value: f64,
    /// The last quarter of the range carries more than `1e-8` of the total,
    /// so truncating the half-line at the grid end is suspect.
    pub tail_warning: bool,
}

/// `int_a^b y^delta dy`, finite for `delta > -1` or `a > 0`.
fn power_moment(delta: f64, a: f64, b: f64) -> f64 {
    if (delta + 1.0).abs() < 1e-14 {
        (b / a).ln()
    } else {
        (b.powf(delta + 1.0) - a.powf(delta + 1.0)) / (delta + 1.0)
    }
}

/// `int y^delta g dy` over the cells of `grid` inside `[lo, hi]`, with `g`
/// linear on each cell and the weight integrated exactly. For `delta = 0`
/// this is the trapezoid rule.
fn weighted_integral(g: &[f64], grid: &Grid1D, delta: f64, lo: f64, hi: f64) -> (f64, f64) {
    let dy = grid.dx();
    let quarter = hi - 0.25 * (hi - lo);
    let (mut total, mut tail) = (0.0, 0.0);
    for i in 0..grid.cells {
        let (a, b) = (grid.x(i).max(lo), grid.x(i + 1).min(hi));
        if b <= a {
            continue;
        }
        // g(y) = g_i + (g_{i+1} - g_i) (y - y_i) / dy on the cell.
        let slope = (g[i + 1] - g[i]) / dy;
        let base = g[i] - slope * grid.x(i);
        let part = base * power_moment(delta, a, b) + slope * power_moment(delta + 1.0, a, b);
        total += part;
        if a >= quarter {
            tail += part;
        }
    }
    (total, tail)
}

/// `sqrt(int y^delta f^2 dy)` for `f` sampled on the nodes of `grid`.
pub fn weighted_l2(f: &[f64], grid: &Grid1D, w: &WeightedNorm) -> Result<NormValue> {
    w.validate()?;
    if f.len() != grid.nodes() {
        return Err(Error::validation("f", format!("expected {} samples, got {}", grid.nodes(), f.len())));
    }
    let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
    let (total, tail) = weighted_integral(&sq, grid, w.delta, w.domain.0, w.domain.1.min(grid.xmax));
    Ok(NormValue { value: total.max(0.0).sqrt(), tail_warning: tail > 1e-8 * total })
}

/// Weighted norm over `[y_1, ymax]`, skipping the first cell. Any weight
/// exponent is allowed, which makes the divergence at `delta <= -1` visible
/// as growth rather than an infinity.
pub fn cutoff_weighted_l2(f: &[f64], grid: &Grid1D, delta: f64) -> Result<f64> {
    if f.len() != grid.nodes() {
        return Err(Error::validation("f", format!("expected {} samples, got {}", grid.nodes(), f.len())));
    }
    let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
    let (total, _) = weighted_integral(&sq, grid, delta, grid.dx(), grid.xmax);
    Ok(total.max(0.0).sqrt())
}

/// Silverman's rule, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let sd = crate::util::sample_variance(samples).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let i = pos.floor() as usize;
        let w = pos - i as f64;
        sorted[i] * (1.0 - w) + sorted[(i + 1).min(n - 1)] * w
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeEstimate {
    /// Kernel standard deviation in the `sqrt(sigma)` coordinate.
    pub bandwidth: f64,
    /// Density on the grid nodes; the trapezoid integral equals the
    /// survivor mass up to what lies beyond the grid.
    pub density: Vec<f64>,
}

/// Mass of `|V|^2` in `[a, b]` where `V ~ N(v, h^2)`.
fn squared_kernel_mass(v: f64, h: f64, a: f64, b: f64) -> f64 {
    let (ra, rb) = (a.sqrt(), b.sqrt());
    let p = |s: f64| norm_cdf((s - v) / h);
    (p(rb) - p(ra)) + (p(-ra) - p(-rb))
}

/// Conditional variance density from survivor `sigma` values.
///
/// Each sample becomes a Gaussian of width `sqrt(eps)` in `v = sqrt(sigma)`,
/// pushed back through `sigma = v^2`; node values are control-volume masses
/// divided by the volume, so the estimate is nonnegative and conserves mass.
/// `total` is the portfolio size; the result integrates to
/// `sigmas.len() / total`.
pub fn kde_conditional_density(sigmas: &[f64], total: usize, eps: Option<f64>, grid: &Grid1D) -> Result<KdeEstimate> {
    if sigmas.len() < 1000 {
        return Err(Error::validation("survivors", format!("need at least 1000 survivors, got {}", sigmas.len())));
    }
    if total < sigmas.len() {
        return Err(Error::validation("total", "portfolio smaller than the survivor set"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("negative or non-finite variance sample {s}")));
    }
    let mut vs: Vec<f64> = sigmas.iter().map(|s| s.sqrt()).collect();
    vs.sort_by(f64::total_cmp);
    let h = match eps {
        Some(e) if e > 0.0 => e.sqrt(),
        Some(e) => return Err(Error::validation("eps", format!("must be positive, got {e}"))),
        None => silverman_bandwidth(&vs),
    };
    let dy = grid.dx();
    let weight = 1.0 / total as f64;
    let density = par_map(grid.nodes(), |j| {
        let a = (grid.x(j) - 0.5 * dy).max(0.0);
        let b = (grid.x(j) + 0.5 * dy).min(grid.xmax);
        let (ra, rb) = (a.sqrt(), b.sqrt());
        // Samples further than 9 bandwidths from [ra, rb] contribute nothing
        // in double precision, mirrored part included since v >= 0.
        let lo = vs.partition_point(|&v| v < ra - 9.0 * h);
        let hi = vs.partition_point(|&v| v <= rb + 9.0 * h);
        let m: f64 = vs[lo..hi].iter().map(|&v| squared_kernel_mass(v, h, a, b)).sum();
        m * weight / grid.weight(j)
    });
    Ok(KdeEstimate { bandwidth: h, density })
}

/// Gaussian KDE on `[0, xmax]` with an odd reflection at `x = 0`, so the
/// estimate vanishes at the absorbing boundary like the density it targets.
/// Each sample carries mass `1 / total`.
pub fn kde_absorbed(xs: &[f64], total: usize, bandwidth: Option<f64>, grid: &Grid1D) -> Result<KdeEstimate> {
    if xs.is_empty() || total < xs.len() {
        return Err(Error::validation("samples", "need a nonempty sample no larger than the portfolio"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::validation("bandwidth", format!("must be positive, got {b}"))),
        None => silverman_bandwidth(&sorted),
    };
    let norm = 1.0 / (total as f64 * h * SQRT_2PI);
    let density = par_map(grid.nodes(), |i| {
        let x = grid.x(i);
        let lo = sorted.partition_point(|&v| v < x - 9.0 * h);
        let hi = sorted.partition_point(|&v| v <= x + 9.0 * h);
        let k = |d: f64| (-0.5 * d * d / (h * h)).exp();
        sorted[lo..hi].iter().map(|&v| (k(x - v) - k(x + v)).max(0.0)).sum::<f64>() * norm
    });
    Ok(KdeEstimate { bandwidth: h, density })
}

/// Convergence of the smoothed `J_eps` towards `J_u` along an `eps` ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub eps: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `gaps[d][e] = ||J_eps - J_u||` with weight `y^deltas[d]`.
    pub gaps: Vec<Vec<f64>>,
    /// Whether `gaps[d]` strictly decreases along the ladder.
    pub decreasing: Vec<bool>,
    /// Norm of `J_eps` itself with weight `1/y`, first cell cut off.
    pub singular_norms: Vec<f64>,
    pub singular_increasing: bool,
    /// Max-abs gap between first differences of `J_eps` and `J_u`.
    pub derivative_gaps: Vec<f64>,
    pub derivative_decreasing: bool,
    pub tail_warning: bool,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn smoothing_ladder(u: &ZSamples, ygrid: &Grid1D, eps: &[f64], deltas: &[f64]) -> Result<SmoothingReport> {
    if eps.len() < 2 || eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::validation("eps", "ladder must have at least two strictly decreasing values"));
    }
    let ys: Vec<f64> = (0..ygrid.nodes()).map(|i| ygrid.x(i)).collect();
    let limit: Vec<f64> = ys.iter().map(|&y| j_limit(u, y)).collect();
    let dlimit: Vec<f64> = limit.windows(2).map(|w| w[1] - w[0]).collect();
    let domain = (0.0, ygrid.xmax);
    let mut gaps = vec![Vec::with_capacity(eps.len()); deltas.len()];
    let (mut singular_norms, mut derivative_gaps) = (Vec::new(), Vec::new());
    let mut tail_warning = false;
    for &e in eps {
        let j = smooth_j(u, &ys, e)?;
        let diff: Vec<f64> = j.iter().zip(&limit).map(|(a, b)| a - b).collect();
        for (row, &d) in gaps.iter_mut().zip(deltas) {
            let n = weighted_l2(&diff, ygrid, &WeightedNorm::new(d, domain)?)?;
            tail_warning |= n.tail_warning;
            row.push(n.value);
        }
        singular_norms.push(cutoff_weighted_l2(&j, ygrid, -1.0)?);
        let dj = j.windows(2).map(|w| w[1] - w[0]);
        let g = dj.zip(&dlimit).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / ygrid.dx();
        derivative_gaps.push(g);
    }
    let decreasing = gaps.iter().map(|g| strictly_decreasing(g)).collect();
    let singular_increasing = singular_norms.windows(2).all(|w| w[1] > w[0]);
    let derivative_decreasing = strictly_decreasing(&derivative_gaps);
    Ok(SmoothingReport {
        eps: eps.to_vec(),
        deltas: deltas.to_vec(),
        gaps,
        decreasing,
        singular_norms,
        singular_increasing,
        derivative_gaps,
        derivative_decreasing,
        tail_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_values() {
        let e = 0.3;
        assert_relative_eq!(phi_eps(2.25, 1.5, e).unwrap(), 1.0 / (2.0 * std::f64::consts::PI * e).sqrt());
        assert_relative_eq!(phi_eps(0.0, 0.0, e).unwrap(), 1.0 / (2.0 * std::f64::consts::PI * e).sqrt());
        assert_relative_eq!(
            phi_eps(4.0, 1.0, 0.5).unwrap(),
            (-1.0f64).exp() / std::f64::consts::PI.sqrt(),
            epsilon = 1e-12
        );
        assert!(matches!(phi_eps(-1.0, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn weighted_norm_examples() {
        let grid = Grid1D::new(4.0, 400).unwrap();
        let w = |d| WeightedNorm::new(d, (0.0, 4.0)).unwrap();
        let zero = vec![0.0; grid.nodes()];
        assert_eq!(weighted_l2(&zero, &grid, &w(0.0)).unwrap().value, 0.0);
        let ind: Vec<f64> = (0..grid.nodes()).map(|i| if grid.x(i) <= 1.0 + 1e-12 { 1.0 } else { 0.0 }).collect();
        let n = weighted_l2(&ind, &grid, &w(1.0)).unwrap().value;
        assert!((n - 0.5f64.sqrt()).abs() < 2.0 * grid.dx(), "{n}");
        let grid = Grid1D::new(30.0, 6000).unwrap();
        let ex: Vec<f64> = (0..grid.nodes()).map(|i| (-grid.x(i)).exp()).collect();
        let n = weighted_l2(&ex, &grid, &WeightedNorm::new(2.0, (0.0, 30.0)).unwrap()).unwrap();
        assert!((n.value - 0.5).abs() < 1e-5, "{}", n.value);
        assert!(!n.tail_warning);
        assert!(WeightedNorm::new(-1.0, (0.0, 1.0)).is_err());
        // Integrable singular weight.
        let one = vec![1.0; grid.nodes()];
        let n = weighted_l2(&one, &grid, &WeightedNorm::new(-0.5, (0.0, 4.0)).unwrap()).unwrap();
        assert!((n.value - 4.0f64.sqrt()).abs() < 1e-12);
        assert!(n.tail_warning);
    }

    #[test]
    fn limit_and_indicator() {
        let u = ZSamples::from_fn(4.0, 40001, |_| 1.0).unwrap();
        assert_relative_eq!(j_limit(&u, 1.5), 3.0, epsilon = 1e-12);
        assert_eq!(j_limit(&u, 0.0), 0.0);
        let ind = ZSamples::from_fn(4.0, 40001, |z| if (1.0..=2.0).contains(&z) { 1.0 } else { 0.0 }).unwrap();
        let mut prev = f64::INFINITY;
        for e in [0.01, 0.001, 1e-4] {
            let j = smooth_j(&ind, &[1.2], e).unwrap()[0];
            let gap = (j - 2.4).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 0.01, "{prev}");
        let zero = ZSamples::from_fn(1.0, 11, |_| 0.0).unwrap();
        assert!(smooth_j(&zero, &[0.0, 0.5], 0.1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivatives_converge_for_exponential() {
        let u = ZSamples::from_fn(16.0, 40001, |z| (-z).exp()).unwrap();
        let grid = Grid1D::new(4.0, 400).unwrap();
        let ys: Vec<f64> = (0..grid.nodes()).map(|i| grid.x(i)).collect();
        let exact = |y: f64| 2.0 * (-y * y).exp() * (1.0 - 2.0 * y * y);
        let mut prev = f64::INFINITY;
        for e in [0.2, 0.1, 0.05, 0.025] {
            let j = smooth_j(&u, &ys, e).unwrap();
            let gap = (0..grid.cells)
                .map(|i| ((j[i + 1] - j[i]) / grid.dx() - exact(grid.x(i) + 0.5 * grid.dx())).abs())
                .fold(0.0, f64::max);
            assert!(gap < prev, "{e}: {gap}");
            prev = gap;
        }
    }

    #[test]
    fn kde_of_a_point_cloud() {
        let grid = Grid1D::new(0.4, 200).unwrap();
        let s = vec![0.09; 2000];
        let k = kde_conditional_density(&s, 2000, None, &grid).unwrap();
        let mass: f64 = k.density.iter().enumerate().map(|(j, p)| grid.weight(j) * p).sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        let peak = k.density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((grid.x(peak) - 0.09).abs() <= grid.dx());
        assert!(kde_conditional_density(&s[..10], 2000, None, &grid).is_err());
        let half = kde_conditional_density(&s, 4000, Some(1e-4), &grid).unwrap();
        let mass: f64 = half.density.iter().enumerate().map(|(j, p)| grid.weight(j) * p).sum();
        assert!((mass - 0.5).abs() < 1e-3);
        assert!(half.density.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn absorbed_kde_vanishes_at_zero() {
        let grid = Grid1D::new(3.0, 300).unwrap();
        let xs: Vec<f64> = (0..1000).map(|i| 0.5 + i as f64 / 1000.0).collect();
        let k = kde_absorbed(&xs, 1000, None, &grid).unwrap();
        assert_eq!(k.density[0], 0.0);
        let mass: f64 = k.density.iter().enumerate().map(|(j, p)| grid.weight(j) * p).sum();
        assert!((mass - 1.0).abs() < 1e-2);
    }

    #[test]
    fn ladder_on_a_cir_density() {
        use crate::cir::cir_density;
        use crate::model::CoeffVector;
        // 4 k theta / xi^2 = 2, so the density is positive at zero.
        let c = CoeffVector { k: 1.0, theta: 0.5, xi: 1.0, r: 0.0, rho1: 0.0, rho2: 0.0 };
        let u = ZSamples::from_fn(25.0, 62501, |z| cir_density(&c, 0.5, 1.0, z)).unwrap();
        assert!(u.values[0] > 0.1);
        let grid = Grid1D::new(5.0, 500).unwrap();
        let r = smoothing_ladder(&u, &grid, &[0.2, 0.1, 0.05, 0.025], &[-0.5, 0.0, 1.0, 2.0]).unwrap();
        assert!(r.decreasing.iter().all(|&d| d), "{:?}", r.gaps);
        assert!(r.singular_increasing, "{:?}", r.singular_norms);
        assert!(r.derivative_decreasing, "{:?}", r.derivative_gaps);
        assert!(!r.tail_warning);
        assert!(smoothing_ladder(&u, &grid, &[0.1, 0.2], &[0.0]).is_err());
    }
}
