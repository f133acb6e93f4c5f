//! Tridiagonal solves.

/// Solves `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]` in
/// place (the solution overwrites `rhs`). `scratch` must have the same length.
/// `lower[0]` and `upper[n-1]` are ignored.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= scratch[i + 1] * next;
    }
}

/// Scratch buffers for [`cn_line`].
#[derive(Debug, Clone, Default)]
pub struct LineWorkspace {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl LineWorkspace {
    fn resize(&mut self, n: usize) {
        for v in [&mut self.lower, &mut self.diag, &mut self.upper, &mut self.rhs, &mut self.scratch] {
            v.resize(n, 0.0);
        }
    }
}

/// One Crank-Nicolson step of `u_t = d u_xx - b u_x` on a uniform line with
/// zero Dirichlet values at both ends, the drift upwinded. Returns the
/// approximate mass that left through the left and right ends.
pub fn cn_line(u: &mut [f64], d: f64, b: f64, dt: f64, dx: f64, ws: &mut LineWorkspace) -> (f64, f64) {
    let last = u.len() - 1;
    let n = last - 1;
    ws.resize(n);
    let lo = d / (dx * dx) + b.max(0.0) / dx;
    let up = d / (dx * dx) + (-b).max(0.0) / dx;
    let di = -2.0 * d / (dx * dx) - b.abs() / dx;
    let (first_old, last_old) = (u[1], u[last - 1]);
    for k in 0..n {
        let i = k + 1;
        ws.rhs[k] = u[i] + 0.5 * dt * (lo * u[i - 1] + di * u[i] + up * u[i + 1]);
        ws.lower[k] = -0.5 * dt * lo;
        ws.diag[k] = 1.0 - 0.5 * dt * di;
        ws.upper[k] = -0.5 * dt * up;
    }
    thomas(&ws.lower, &ws.diag, &ws.upper, &mut ws.rhs, &mut ws.scratch);
    u[1..last].copy_from_slice(&ws.rhs);
    let left = 0.5 * dt * up * (first_old + u[1]) * dx;
    let right = 0.5 * dt * lo * (last_old + u[last - 1]) * dx;
    (left, right)
}

/// Translates a line with zero end values by `s` cells. The whole part is an
/// exact copy; the fractional part moves mass across cell faces with fluxes
/// from the piecewise parabolic reconstruction, so the interior mass changes
/// only by what crosses the end nodes. With `limit`, each face flux is clipped
/// to `[0, upwind cell value]`, which keeps the line nonnegative; the clip is
/// idle on smooth data. Also returns the mass (in units of value times cell)
/// that left through the low and the high end.
pub(crate) fn translate_line(v: &[f64], s: f64, limit: bool) -> (Vec<f64>, f64, f64) {
    let n = v.len();
    let whole = s.trunc();
    let f = s - whole;
    let k = whole as i64;
    let mut w = vec![0.0; n];
    let (mut low, mut high) = (0.0, 0.0);
    for (src, &x) in v.iter().enumerate().take(n.saturating_sub(1)).skip(1) {
        let dst = src as i64 + k;
        if dst < 1 {
            low += x;
        } else if dst >= n as i64 - 1 {
            high += x;
        } else {
            w[dst as usize] = x;
        }
    }
    if f == 0.0 || n < 3 {
        return (w, low, high);
    }
    let at = |k: i64| if k < 0 || k >= n as i64 { 0.0 } else { w[k as usize] };
    // value on the face between cells i and i+1
    let face = |i: i64| (7.0 * (at(i) + at(i + 1)) - (at(i - 1) + at(i + 2))) / 12.0;
    let clip = |q: f64, cell: f64| if limit { q.clamp(0.0, cell.max(0.0)) } else { q };
    let flux: Vec<f64> = (0..n - 1)
        .map(|i| {
            let i = i as i64;
            if f > 0.0 {
                let (ul, ur, um) = (face(i - 1), face(i), at(i));
                let u6 = 6.0 * (um - 0.5 * (ul + ur));
                clip(f * (ur - 0.5 * f * (ur - ul - (1.0 - 2.0 * f / 3.0) * u6)), um)
            } else {
                let g = -f;
                let (ul, ur, um) = (face(i), face(i + 1), at(i + 1));
                let u6 = 6.0 * (um - 0.5 * (ul + ur));
                -clip(g * (ul + 0.5 * g * (ur - ul + (1.0 - 2.0 * g / 3.0) * u6)), um)
            }
        })
        .collect();
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = w[i] + flux[i - 1] - flux[i];
    }
    (out, low - flux[0], high + flux[n - 2])
}
