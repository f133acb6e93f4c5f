//! File formats: CSV tables and the binary field dump.
//!
//! CSV files use a comma separator, a header row and LF line endings.
//! Numbers are written in Rust's shortest round-trip form, so equal values
//! always produce equal bytes.
//!
//! The binary dump of a [`DensityField`] is, all little-endian:
//!
//! | offset | type     | content                        |
//! |--------|----------|--------------------------------|
//! | 0      | `[u8;8]` | magic `b"CSPDEFLD"`            |
//! | 8      | `u32`    | format version (1)             |
//! | 12     | `u32`    | reserved, 0                    |
//! | 16     | `u64`    | `nx` (cells in x)              |
//! | 24     | `u64`    | `ny` (cells in y)              |
//! | 32     | `f64`    | `xmax`                         |
//! | 40     | `f64`    | `ymax`                         |
//! | 48     | `f64`    | `t`                            |
//! | 56     | `f64`    | `(nx+1)(ny+1)` values, x outer |

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{DensityField, Grid2D};
use crate::particles::{LossCurve, MarketPath};

const MAGIC: &[u8; 8] = b"CSPDEFLD";
const VERSION: u32 = 1;

/// Renders columns of equal length under `header`.
pub fn columns_csv(header: &[&str], columns: &[&[f64]]) -> Result<String> {
    if header.len() != columns.len() {
        return Err(Error::Contract("header and column counts differ".into()));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::Contract("columns of unequal length".into()));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..rows {
        for (k, c) in columns.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", c[r]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn loss_csv(l: &LossCurve) -> String {
    columns_csv(&["t", "L"], &[&l.times, &l.values]).unwrap_or_default()
}

/// Times, increments and levels of both systemic drivers.
pub fn market_path_csv(mp: &MarketPath) -> String {
    let pad = |v: &[f64]| {
        let mut p = vec![0.0];
        p.extend_from_slice(v);
        p
    };
    let (dw, db) = (pad(&mp.dw0), pad(&mp.db0));
    let (w, b) = (mp.w0_levels(), mp.b0_levels());
    columns_csv(&["t", "dW0", "dB0", "W0", "B0"], &[&mp.times, &dw, &db, &w, &b]).unwrap_or_default()
}

/// The field as a matrix: one row per x node, one column per y node.
pub fn field_csv(u: &DensityField) -> String {
    let g = &u.grid;
    let mut out = String::from("x");
    for j in 0..=g.ny {
        let _ = write!(out, ",{}", g.y(j));
    }
    out.push('\n');
    for i in 0..=g.nx {
        let _ = write!(out, "{}", g.x(i));
        for j in 0..=g.ny {
            let _ = write!(out, ",{}", u.at(i, j));
        }
        out.push('\n');
    }
    out
}

pub fn write_field(u: &DensityField, w: &mut impl Write) -> Result<()> {
    let g = &u.grid;
    let mut buf = Vec::with_capacity(56 + 8 * u.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(g.nx as u64).to_le_bytes());
    buf.extend_from_slice(&(g.ny as u64).to_le_bytes());
    for v in [g.xmax, g.ymax, u.t] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &u.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field(r: &mut impl Read) -> Result<DensityField> {
    let mut head = [0u8; 56];
    r.read_exact(&mut head).map_err(|e| Error::Io(format!("truncated field header: {e}")))?;
    if &head[..8] != MAGIC {
        return Err(Error::Io("not a field dump (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap_or_default());
    let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap_or_default());
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap_or_default());
    if u32_at(8) != VERSION {
        return Err(Error::Io(format!("unsupported field dump version {}", u32_at(8))));
    }
    let (nx, ny) = (u64_at(16) as usize, u64_at(24) as usize);
    let grid = Grid2D::new(f64_at(32), f64_at(40), nx, ny)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * grid.len() {
        return Err(Error::Io(format!("expected {} values, found {} bytes", grid.len(), body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default())).collect();
    Ok(DensityField { grid, t: f64_at(48), values })
}

pub fn save_field(u: &DensityField, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_field(u, &mut f)
}

pub fn load_field(path: &Path) -> Result<DensityField> {
    let mut f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_field(&mut f)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
