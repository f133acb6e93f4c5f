//! Uniform grids on the truncated half-line / quarter-plane and grid
//! functions on them.
//!
//! Values live on nodes. Node `i` owns the control volume
//! `[x_i - dx/2, x_i + dx/2]` clipped to the domain, so boundary nodes carry
//! half weight and every integral is the trapezoid rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid1D {
    pub xmax: f64,
    pub cells: usize,
}

impl Grid1D {
    pub fn new(xmax: f64, cells: usize) -> Result<Self> {
        if !(xmax > 0.0 && xmax.is_finite()) {
            return Err(Error::validation("grid.xmax", "must be positive"));
        }
        if cells < 4 {
            return Err(Error::validation("grid.cells", "need at least 4 cells"));
        }
        Ok(Self { xmax, cells })
    }

    pub fn dx(&self) -> f64 {
        self.xmax / self.cells as f64
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        self.xmax * i as f64 / self.cells as f64
    }

    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.cells {
            0.5 * self.dx()
        } else {
            self.dx()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2D {
    pub xmax: f64,
    pub ymax: f64,
    /// Cells in x; there are `nx + 1` nodes.
    pub nx: usize,
    /// Cells in y.
    pub ny: usize,
}

impl Grid2D {
    pub fn new(xmax: f64, ymax: f64, nx: usize, ny: usize) -> Result<Self> {
        let g = Self { xmax, ymax, nx, ny };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 16 || self.ny < 16 {
            return Err(Error::validation(
                "grid",
                format!("need at least 16 cells per direction, got {}x{}", self.nx, self.ny),
            ));
        }
        if !(self.xmax > 0.0 && self.ymax > 0.0 && self.xmax.is_finite() && self.ymax.is_finite()) {
            return Err(Error::validation("grid", "xmax and ymax must be positive"));
        }
        Ok(())
    }

    pub fn x_grid(&self) -> Grid1D {
        Grid1D { xmax: self.xmax, cells: self.nx }
    }

    pub fn y_grid(&self) -> Grid1D {
        Grid1D { xmax: self.ymax, cells: self.ny }
    }

    pub fn dx(&self) -> f64 {
        self.xmax / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ymax / self.ny as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.xmax * i as f64 / self.nx as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.ymax * j as f64 / self.ny as f64
    }

    pub fn wx(&self, i: usize) -> f64 {
        self.x_grid().weight(i)
    }

    pub fn wy(&self, j: usize) -> f64 {
        self.y_grid().weight(j)
    }

    /// Number of nodes in y, i.e. the row stride.
    pub fn stride(&self) -> usize {
        self.ny + 1
    }

    pub fn len(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.ny + 1) + j
    }
}

/// A grid function `u(x, y)` at time `t`, stored row-major with `x` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid2D,
    pub t: f64,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, t: 0.0, values: vec![0.0; grid.len()] }
    }

    /// Samples `f` at the nodes.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut u = Self::zeros(grid);
        for i in 0..=grid.nx {
            for j in 0..=grid.ny {
                u.values[grid.idx(i, j)] = f(grid.x(i), grid.y(j));
            }
        }
        u
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    /// Quadrature of `f * u` over the grid.
    pub fn integrate(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let g = &self.grid;
        let mut total = 0.0;
        for i in 0..=g.nx {
            let (x, wx) = (g.x(i), g.wx(i));
            let row = &self.values[g.idx(i, 0)..g.idx(i, 0) + g.stride()];
            let mut s = 0.0;
            for (j, &u) in row.iter().enumerate() {
                if u != 0.0 {
                    s += g.wy(j) * u * f(x, g.y(j));
                }
            }
            total += wx * s;
        }
        total
    }

    pub fn mass(&self) -> f64 {
        let g = &self.grid;
        (0..=g.nx)
            .map(|i| {
                let row = &self.values[g.idx(i, 0)..g.idx(i, 0) + g.stride()];
                g.wx(i) * row.iter().enumerate().map(|(j, u)| g.wy(j) * u).sum::<f64>()
            })
            .sum()
    }

    /// `int u dy` for each x node.
    pub fn marginal_x(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..=g.nx).map(|i| (0..=g.ny).map(|j| g.wy(j) * self.at(i, j)).sum()).collect()
    }

    /// `int u dx` for each y node.
    pub fn marginal_y(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..=g.ny).map(|j| (0..=g.nx).map(|i| g.wx(i) * self.at(i, j)).sum()).collect()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `int |u - v|` over the grid.
    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::validation("grid", "fields live on different grids"));
        }
        let g = &self.grid;
        let mut total = 0.0;
        for i in 0..=g.nx {
            for j in 0..=g.ny {
                total += g.wx(i) * g.wy(j) * (self.at(i, j) - other.at(i, j)).abs();
            }
        }
        Ok(total)
    }

    pub fn add_assign(&mut self, other: &DensityField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}
