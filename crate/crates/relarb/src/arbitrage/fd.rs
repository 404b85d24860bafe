use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{oracle::abs_covariance_from, Coefficients, MarketOracle, MarketState, ScenarioConfig, YMode};

/// Boundary treatment on the x-faces of the truncation box.
#[derive(Clone)]
pub enum Boundary {
    /// One-sided upwind transport where characteristics leave the box,
    /// frozen values where they would enter it.
    Outflow,
    /// Prescribed values g(τ, x, y).
    Dirichlet(Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl Boundary {
    pub fn label(&self) -> &'static str {
        match self {
            Boundary::Outflow => "outflow",
            Boundary::Dirichlet(_) => "dirichlet",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdSpec {
    pub nodes_x: usize,
    pub nodes_y: usize,
    /// Box is [x0/f, f·x0] per axis in log space.
    pub box_factor: f64,
    pub cfl: f64,
    pub boundary: Boundary,
    /// Number of stored τ-slices (at least 2: initial and final).
    pub slices: usize,
    /// Peer average entering Vbench at the grid points.
    pub m: f64,
    pub c: f64,
    /// Re-solve on a smaller box and flag boundary influence.
    pub sentinel: bool,
}

impl FdSpec {
    pub fn new(nodes: usize, c: f64) -> Self {
        FdSpec {
            nodes_x: nodes,
            nodes_y: nodes,
            box_factor: 8.0,
            cfl: 0.9,
            boundary: Boundary::Outflow,
            slices: 2,
            m: 1.0,
            c,
            sentinel: false,
        }
    }
}

/// Solution of the Cauchy problem for n = 1 on a log-space (x, y) grid.
#[derive(Debug, Clone, Serialize)]
pub struct CauchyGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub taus: Vec<f64>,
    /// One row-major (x-major) array per stored τ.
    pub slices: Vec<Vec<f64>>,
    pub boundary: String,
    pub cfl: f64,
    pub dtau: f64,
    pub substeps: usize,
    pub c: f64,
    /// max over the grid after every substep.
    pub max_by_step: Vec<f64>,
    pub max_non_increasing: bool,
    pub min_value: f64,
    pub boundary_warning: bool,
    pub sentinel_gap: Option<f64>,
    #[serde(skip)]
    op: Operator,
}

#[derive(Debug, Clone, Default)]
struct Operator {
    nx: usize,
    ny: usize,
    dxi: f64,
    deta: f64,
    dx: Vec<f64>,
    bx: Vec<f64>,
    dy: Vec<f64>,
    by: Vec<f64>,
}

impl Operator {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    fn rate(&self, k: usize) -> f64 {
        let mut r = 2.0 * self.dx[k] / (self.dxi * self.dxi) + self.bx[k].abs() / self.dxi;
        if self.ny > 1 {
            r += 2.0 * self.dy[k] / (self.deta * self.deta) + self.by[k].abs() / self.deta;
        }
        r
    }

    /// One axis contribution at position `i` of `len` along a line of values.
    fn axis(d: f64, b: f64, h: f64, i: usize, len: usize, get: impl Fn(usize) -> f64) -> f64 {
        if len < 2 {
            return 0.0;
        }
        let u = get(i);
        if i == 0 {
            return if b > 0.0 { b * (get(1) - u) / h } else { 0.0 };
        }
        if i == len - 1 {
            return if b < 0.0 { b * (u - get(i - 1)) / h } else { 0.0 };
        }
        let (um, up) = (get(i - 1), get(i + 1));
        let diffusion = d * (up - 2.0 * u + um) / (h * h);
        let transport = if b > 0.0 { b * (up - u) / h } else { b * (u - um) / h };
        diffusion + transport
    }

    fn apply(&self, u: &[f64], i: usize, j: usize) -> f64 {
        let k = self.idx(i, j);
        let lx = Self::axis(self.dx[k], self.bx[k], self.dxi, i, self.nx, |a| u[self.idx(a, j)]);
        let ly = Self::axis(self.dy[k], self.by[k], self.deta, j, self.ny, |b| u[self.idx(i, b)]);
        lx + ly
    }
}

impl CauchyGrid {
    pub fn final_slice(&self) -> &[f64] {
        self.slices.last().expect("grid has slices")
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.final_slice()[i * self.ys.len() + j]
    }

    fn locate(axis: &[f64], v: f64) -> (usize, f64) {
        if axis.len() == 1 {
            return (0, 0.0);
        }
        let (lo, hi) = (axis[0].ln(), axis[axis.len() - 1].ln());
        let s = ((v.ln() - lo) / (hi - lo) * (axis.len() - 1) as f64).clamp(0.0, (axis.len() - 1) as f64);
        let i = (s.floor() as usize).min(axis.len() - 2);
        (i, s - i as f64)
    }

    /// ũ(T, x, y) by bilinear interpolation in log coordinates.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let (i, fx) = Self::locate(&self.xs, x);
        let (j, fy) = Self::locate(&self.ys, y);
        let ny = self.ys.len();
        let u = self.final_slice();
        let g = |a: usize, b: usize| u[a * ny + b];
        let j1 = (j + 1).min(ny - 1);
        let lo = g(i, j) * (1.0 - fy) + g(i, j1) * fy;
        let hi = g(i + 1, j) * (1.0 - fy) + g(i + 1, j1) * fy;
        lo * (1.0 - fx) + hi * fx
    }

    /// D_x log ũ(T, ·, y) at grid column `i` (interior).
    pub fn grad_log_x(&self, i: usize, j: usize) -> f64 {
        let (up, down) = (self.value(i + 1, j).ln(), self.value(i - 1, j).ln());
        (up - down) / (2.0 * self.op.dxi * self.xs[i])
    }

    /// Index of the grid node closest to `x`.
    pub fn nearest_x(&self, x: f64) -> usize {
        let (i, f) = Self::locate(&self.xs, x);
        if f > 0.5 { i + 1 } else { i }
    }

    pub fn nearest_y(&self, y: f64) -> usize {
        let (j, f) = Self::locate(&self.ys, y);
        if f > 0.5 && self.ys.len() > 1 { j + 1 } else { j }
    }

    /// max over interior nodes of |L_h u| for the stored operator.
    pub fn residual_of(&self, u: &[f64]) -> f64 {
        residual(&self.op, u)
    }
}

fn residual(op: &Operator, u: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 1..op.nx.saturating_sub(1) {
        for j in 0..op.ny {
            if op.ny > 1 && (j == 0 || j == op.ny - 1) {
                continue;
            }
            worst = worst.max(op.apply(u, i, j).abs());
        }
    }
    worst
}

fn log_axis(centre: f64, factor: f64, nodes: usize) -> Vec<f64> {
    if nodes == 1 {
        return vec![centre];
    }
    let (lo, hi) = ((centre / factor).ln(), (centre * factor).ln());
    (0..nodes).map(|k| (lo + (hi - lo) * k as f64 / (nodes - 1) as f64).exp()).collect()
}

fn build_operator(
    oracle: &dyn MarketOracle,
    xs: &[f64],
    ys: &[f64],
    delta: f64,
    m: f64,
    y_diffuses: bool,
) -> Result<Operator> {
    let (nx, ny) = (xs.len(), ys.len());
    let dxi = (xs[1].ln() - xs[0].ln()).abs();
    let deta = if ny > 1 { ys[1].ln() - ys[0].ln() } else { 1.0 };
    let mut op = Operator { nx, ny, dxi, deta, dx: vec![0.0; nx * ny], bx: vec![0.0; nx * ny], dy: vec![0.0; nx * ny], by: vec![0.0; nx * ny] };
    let mut coef = Coefficients::zeros(1);
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let (px, py) = ([x], [y]);
            let a = match oracle.abs_covariance(&px, &py) {
                Some(a) => a[(0, 0)],
                None => {
                    oracle.evaluate(&MarketState { t: 0.0, x: &px, y: &py, m }, &mut coef)?;
                    abs_covariance_from(&coef, &px)[(0, 0)]
                }
            };
            let psi = if y_diffuses {
                match oracle.abs_covariance_y(&px, &py) {
                    Some(p) => p[(0, 0)],
                    None => {
                        oracle.evaluate(&MarketState { t: 0.0, x: &px, y: &py, m }, &mut coef)?;
                        coef.psi()[(0, 0)]
                    }
                }
            } else {
                0.0
            };
            if !a.is_finite() || !psi.is_finite() {
                return Err(Error::NonFinite { step: 0, what: format!("covariance at x = {x}, y = {y}") });
            }
            let vb = delta * x + (1.0 - delta) * m;
            let k = op.idx(i, j);
            op.dx[k] = 0.5 * a / (x * x);
            op.bx[k] = -0.5 * a / (x * x) + delta * a / (x * vb);
            op.dy[k] = 0.5 * psi / (y * y);
            op.by[k] = -0.5 * psi / (y * y);
        }
    }
    Ok(op)
}

struct March {
    taus: Vec<f64>,
    slices: Vec<Vec<f64>>,
    dtau: f64,
    substeps: usize,
    max_by_step: Vec<f64>,
}

fn march(
    op: &Operator,
    xs: &[f64],
    ys: &[f64],
    horizon: f64,
    spec: &FdSpec,
) -> Result<March> {
    let (nx, ny) = (op.nx, op.ny);
    let max_rate = (0..nx * ny).map(|k| op.rate(k)).fold(0.0, f64::max);
    let substeps = if max_rate == 0.0 { 1 } else { (horizon * max_rate / spec.cfl).ceil().max(1.0) as usize };
    let dtau = horizon / substeps as f64;
    let init = spec.c.exp();
    let mut u = vec![init; nx * ny];
    let mut next = u.clone();
    let keep = spec.slices.max(2);
    let marks: Vec<usize> = (0..keep).map(|s| (s * substeps + (keep - 1) / 2) / (keep - 1)).collect();
    let mut taus = vec![0.0];
    let mut slices = vec![u.clone()];
    let mut max_by_step = Vec::with_capacity(substeps);
    let dirichlet = match &spec.boundary {
        Boundary::Dirichlet(g) => Some(g.clone()),
        Boundary::Outflow => None,
    };
    for step in 1..=substeps {
        let tau = step as f64 * dtau;
        for i in 0..nx {
            for j in 0..ny {
                let k = op.idx(i, j);
                next[k] = match &dirichlet {
                    Some(g) if i == 0 || i == nx - 1 => g(tau, xs[i], ys[j]),
                    _ => u[k] + dtau * op.apply(&u, i, j),
                };
            }
        }
        std::mem::swap(&mut u, &mut next);
        if let Some(k) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, what: format!("grid value at node {k}") });
        }
        max_by_step.push(u.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if marks[1..].contains(&step) {
            taus.push(tau);
            slices.push(u.clone());
        }
    }
    Ok(March { taus, slices, dtau, substeps, max_by_step })
}

/// Explicit marching in τ for ∂_τ ũ = 𝒜ũ, ũ(0) = e^c, n = 1.
pub fn solve_cauchy_fd(oracle: &dyn MarketOracle, config: &ScenarioConfig, spec: &FdSpec) -> Result<CauchyGrid> {
    if config.n != 1 || oracle.dim() != 1 {
        return Err(Error::Domain("the finite-difference solver handles n = 1 only".into()));
    }
    if !oracle.time_homogeneous() {
        return Err(Error::Domain("finite differences need time-homogeneous coefficients".into()));
    }
    if spec.nodes_x < 5 || !(spec.box_factor > 1.0) || !(spec.cfl > 0.0 && spec.cfl <= 0.9) {
        return Err(Error::Config("fd grid needs ≥ 5 x-nodes, box factor > 1 and CFL in (0, 0.9]".into()));
    }
    let x0 = config.x0[0];
    let y0 = config.y0.as_ref().map_or(0.0, |y| y[0]);
    let y_centre = if y0 > 0.0 { y0 } else { 1.0 };
    let xs = log_axis(x0, spec.box_factor, spec.nodes_x);
    let ys = log_axis(y_centre, spec.box_factor, spec.nodes_y.max(1));
    let y_diffuses = config.y_mode == YMode::Exogenous;
    let op = build_operator(oracle, &xs, &ys, config.delta, spec.m, y_diffuses)?;
    let March { taus, slices, dtau, substeps, max_by_step } = march(&op, &xs, &ys, config.horizon, spec)?;
    let cfl = dtau * (0..op.nx * op.ny).map(|k| op.rate(k)).fold(0.0, f64::max);
    let min_value = slices.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let max_non_increasing = max_by_step.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-14));
    let mut grid = CauchyGrid {
        xs,
        ys,
        taus,
        slices,
        boundary: spec.boundary.label().into(),
        cfl,
        dtau,
        substeps,
        c: spec.c,
        max_by_step,
        max_non_increasing,
        min_value,
        boundary_warning: false,
        sentinel_gap: None,
        op,
    };
    if spec.sentinel && matches!(spec.boundary, Boundary::Outflow) {
        let trim = spec.nodes_x / 8;
        let inner = FdSpec {
            nodes_x: spec.nodes_x - 2 * trim,
            box_factor: spec.box_factor.powf((spec.nodes_x - 1 - 2 * trim) as f64 / (spec.nodes_x - 1) as f64),
            sentinel: false,
            ..spec.clone()
        };
        let small = solve_cauchy_fd(oracle, config, &inner)?;
        let here = grid.value_at(x0, y_centre);
        let gap = (small.value_at(x0, y_centre) - here).abs();
        grid.sentinel_gap = Some(gap);
        grid.boundary_warning = gap > 1e-6 + 1e-3 * here.abs();
    }
    Ok(grid)
}
