//! CSV dumps of simulated processes.

use std::fmt::Write as _;

use super::mean_field::MeanFieldPathSet;
use super::paths::{DeflatorPath, ParticlePath, BenchmarkPath};

/// Formats a value with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders `t,<series>` rows; `rows[k]` holds the series values at `grid[k]`.
pub fn render_csv(grid: &[f64], names: &[String], value: impl Fn(usize, usize) -> f64) -> String {
    let mut out = String::from("t");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (k, t) in grid.iter().enumerate() {
        out.push_str(&fmt17(*t));
        for j in 0..names.len() {
            out.push(',');
            out.push_str(&fmt17(value(k, j)));
        }
        out.push('\n');
    }
    out
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

pub fn particle_csv(grid: &[f64], p: &ParticlePath) -> String {
    let mut cols = names("X", p.n);
    cols.extend(names("V", p.investors));
    cols.extend(names("Y", p.n));
    let (n, inv) = (p.n, p.investors);
    render_csv(grid, &cols, |k, j| {
        if j < n {
            p.x_at(k)[j]
        } else if j < n + inv {
            p.v_at(k)[j - n]
        } else {
            p.y_at(k)[j - n - inv]
        }
    })
}

pub fn deflator_csv(grid: &[f64], d: &DeflatorPath) -> String {
    let cols = vec!["L".to_string(), "Theta".to_string()];
    render_csv(grid, &cols, |k, j| match j {
        0 => d.l[k],
        _ => d.big_theta.get(k).copied().unwrap_or(f64::NAN),
    })
}

pub fn benchmark_csv(grid: &[f64], b: &BenchmarkPath) -> String {
    let cols = vec!["Vbench".to_string(), "market_total".to_string(), "peer_average".to_string()];
    render_csv(grid, &cols, |k, j| match j {
        0 => b.vbench[k],
        1 => b.market_total[k],
        _ => b.peer_average[k],
    })
}

pub fn mean_field_csv(mf: &MeanFieldPathSet) -> String {
    let mut cols = names("X", mf.n);
    cols.extend(names("Z", mf.n));
    cols.push("m".into());
    cols.push("m_relative".into());
    let n = mf.n;
    render_csv(&mf.grid, &cols, |k, j| {
        if j < n {
            mf.x_at(k)[j]
        } else if j < 2 * n {
            mf.z_at(k)[j - n]
        } else if j == 2 * n {
            mf.m[k]
        } else {
            mf.m_relative[k]
        }
    })
}

/// Concatenation helper for multi-path dumps: adds a `path` column.
pub fn with_path_column(csvs: &[String]) -> String {
    let mut out = String::new();
    for (p, csv) in csvs.iter().enumerate() {
        for (i, line) in csv.lines().enumerate() {
            if i == 0 {
                if p == 0 {
                    let _ = writeln!(out, "{line},path");
                }
            } else {
                let _ = writeln!(out, "{line},{p}");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_precision() {
        let csv = render_csv(&[0.0, 0.5], &["a".into()], |k, _| 1.0 / 3.0 + k as f64);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,a"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0 / 3.0);
        let mantissa = row[1].split('e').next().unwrap().replace(['.', '-'], "");
        assert_eq!(mantissa.len(), 17);
    }
}
