//! Empirical measures and Wasserstein-2 distances.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_PROJECTIONS: usize = 32;
/// Largest atom count accepted by the exact assignment solver.
pub const EXACT_LIMIT: usize = 256;

/// Finitely many weighted atoms in R^d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    d: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-15)
    }

    /// ∫ f dμ
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * f(self.point(i))).sum()
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        EmpiricalMeasure { d: self.d, points: self.points.iter().map(|p| p * lambda).collect(), weights: self.weights.clone() }
    }

    /// Projection onto the unit direction `dir`, as a one-dimensional measure.
    pub fn project(&self, dir: &[f64]) -> Self {
        let points = (0..self.len()).map(|i| self.point(i).iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
        EmpiricalMeasure { d: 1, points, weights: self.weights.clone() }
    }
}

/// Builds a normalized measure from points in R^d.
pub fn empirical_measure(points: &[Vec<f64>], weights: Option<&[f64]>) -> Result<EmpiricalMeasure> {
    let first = points.first().ok_or_else(|| Error::Domain("empirical measure needs at least one atom".into()))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Domain("atoms must have positive dimension".into()));
    }
    let mut flat = Vec::with_capacity(points.len() * d);
    for p in points {
        if p.len() != d {
            return Err(Error::Domain("atoms have mixed dimensions".into()));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("atom coordinate is not finite".into()));
        }
        flat.extend_from_slice(p);
    }
    let weights = match weights {
        None => vec![1.0 / points.len() as f64; points.len()],
        Some(w) => {
            if w.len() != points.len() {
                return Err(Error::Domain("weight count differs from atom count".into()));
            }
            if let Some(bad) = w.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Domain(format!("weight {bad} is negative or not finite")));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Domain("weights sum to zero".into()));
            }
            w.iter().map(|x| x / total).collect()
        }
    };
    Ok(EmpiricalMeasure { d, points: flat, weights })
}

/// Uniform measure on scalar samples.
pub fn empirical_1d(samples: &[f64]) -> Result<EmpiricalMeasure> {
    let pts: Vec<Vec<f64>> = samples.iter().map(|&s| vec![s]).collect();
    empirical_measure(&pts, None)
}

fn sorted_atoms(m: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut a: Vec<(f64, f64)> = m.points.iter().copied().zip(m.weights.iter().copied()).collect();
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    a
}

fn w2_squared_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    if a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        let mut x = a.points.clone();
        let mut y = b.points.clone();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let sq: Vec<f64> = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).collect();
        return crate::stats::mean(&sq);
    }
    // Quantile coupling: walk both CDFs simultaneously.
    let xa = sorted_atoms(a);
    let xb = sorted_atoms(b);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xa[0].1, xb[0].1);
    let mut acc = 0.0;
    loop {
        let mass = ra.min(rb);
        let diff = xa[i].0 - xb[j].0;
        acc += mass * diff * diff;
        ra -= mass;
        rb -= mass;
        if ra <= 1e-15 {
            i += 1;
            if i == xa.len() {
                break;
            }
            ra = xa[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == xb.len() {
                break;
            }
            rb = xb[j].1;
        }
    }
    acc
}

/// Exact W2 between one-dimensional measures.
pub fn wasserstein2_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.d != 1 || b.d != 1 {
        return Err(Error::Domain(format!("one-dimensional W2 called with dimensions {} and {}", a.d, b.d)));
    }
    Ok(w2_squared_1d(a, b).max(0.0).sqrt())
}

/// Unit directions used by the sliced distance.
pub fn projection_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0, Purpose::Projections);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Root-mean of projected one-dimensional W2² over random directions.
pub fn sliced_wasserstein2(a: &EmpiricalMeasure, b: &EmpiricalMeasure, n_projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("sliced W2 needs atoms on both sides".into()));
    }
    if a.d != b.d {
        return Err(Error::Domain(format!("dimension mismatch {} vs {}", a.d, b.d)));
    }
    if n_projections == 0 {
        return Err(Error::Domain("at least one projection is required".into()));
    }
    let dirs = if a.d == 1 { vec![vec![1.0]; 1] } else { projection_directions(a.d, n_projections, seed) };
    let sq: Vec<f64> = dirs.iter().map(|u| w2_squared_1d(&a.project(u), &b.project(u))).collect();
    Ok(crate::stats::mean(&sq).max(0.0).sqrt())
}

/// Minimum-cost perfect matching on a square cost matrix.
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Exact W2 between uniform measures with equal atom counts.
pub fn exact_wasserstein2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.len() != b.len() || !a.is_uniform() || !b.is_uniform() {
        return Err(Error::Domain("exact W2 needs uniform measures of equal size".into()));
    }
    if a.len() > EXACT_LIMIT {
        return Err(Error::Domain(format!("exact W2 limited to {EXACT_LIMIT} atoms")));
    }
    if a.d != b.d {
        return Err(Error::Domain("dimension mismatch".into()));
    }
    let m = a.len();
    let cost = DMatrix::from_fn(m, m, |i, j| a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum());
    let assign = hungarian(&cost);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((total / m as f64).sqrt())
}

/// Resamples a uniform measure to `m` atoms with replacement.
pub fn resample(a: &EmpiricalMeasure, m: usize, seed: u64) -> EmpiricalMeasure {
    use rand::Rng;
    let mut r = rng::stream(seed, 0, Purpose::Resample);
    let mut points = Vec::with_capacity(m * a.d);
    for _ in 0..m {
        let i = r.random_range(0..a.len());
        points.extend_from_slice(a.point(i));
    }
    EmpiricalMeasure { d: a.d, points, weights: vec![1.0 / m as f64; m] }
}

pub use crate::engine::conditional_mean;
