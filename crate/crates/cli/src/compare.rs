//! Trajectory CSV comparison: per-column sup-norm and L¹ deviations on the
//! common time range, with linear resampling when the grids differ.

use fluidq_core::error::{FluidError, Result};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.headers.iter().position(|h| h == name).map(|i| self.columns[i].as_slice())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)
        .map_err(|e| FluidError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| FluidError::Config(format!("{} is empty", path.display())))?;
    let headers: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != headers.len() {
            return Err(FluidError::Config(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                headers.len(),
                fields.len()
            )));
        }
        for (i, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|e| {
                FluidError::Config(format!("{}:{}: bad number: {e}", path.display(), lineno + 2))
            })?;
            columns[i].push(v);
        }
    }
    Ok(Table { headers, columns })
}

#[derive(Debug, Clone)]
pub struct ColumnDeviation {
    pub column: String,
    pub sup: f64,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub deviations: Vec<ColumnDeviation>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Linear interpolation of `(ts, vs)` at `t` (ts strictly increasing).
fn interp(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    match ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => vs[i],
        Err(0) => vs[0],
        Err(i) if i >= ts.len() => vs[vs.len() - 1],
        Err(i) => {
            let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
            vs[i - 1] + w * (vs[i] - vs[i - 1])
        }
    }
}

/// Compares the named columns of two trajectory CSVs over the intersection
/// of their time ranges.
pub fn compare_files(a: &Path, b: &Path, cols: &[String], tol: f64) -> Result<CompareReport> {
    let ta = read_table(a)?;
    let tb = read_table(b)?;
    let ts_a = ta
        .column("t")
        .ok_or_else(|| FluidError::Config(format!("{} lacks a `t` column", a.display())))?;
    let ts_b = tb
        .column("t")
        .ok_or_else(|| FluidError::Config(format!("{} lacks a `t` column", b.display())))?;
    let lo = ts_a[0].max(ts_b[0]);
    let hi = ts_a[ts_a.len() - 1].min(ts_b[ts_b.len() - 1]);
    if hi <= lo {
        return Err(FluidError::Config(format!(
            "time ranges are disjoint: [{}, {}] vs [{}, {}]",
            ts_a[0],
            ts_a[ts_a.len() - 1],
            ts_b[0],
            ts_b[ts_b.len() - 1]
        )));
    }
    let mut deviations = Vec::new();
    for col in cols {
        let va = ta
            .column(col)
            .ok_or_else(|| FluidError::Config(format!("{} lacks column {col}", a.display())))?;
        let vb = tb
            .column(col)
            .ok_or_else(|| FluidError::Config(format!("{} lacks column {col}", b.display())))?;
        let mut sup = 0.0f64;
        let mut l1 = 0.0f64;
        let mut prev_t: Option<f64> = None;
        for (i, t) in ts_a.iter().enumerate() {
            if *t < lo || *t > hi {
                continue;
            }
            let gap = (va[i] - interp(ts_b, vb, *t)).abs();
            sup = sup.max(gap);
            if let Some(pt) = prev_t {
                l1 += gap * (t - pt);
            }
            prev_t = Some(*t);
        }
        deviations.push(ColumnDeviation { column: col.clone(), sup, l1 });
    }
    let pass = deviations.iter().all(|d| d.sup <= tol);
    Ok(CompareReport { deviations, tolerance: tol, pass })
}
