use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the investor population the coefficients react to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureDependence {
    None,
    MeanInvested,
    FullMeasure,
}

/// Point at which coefficients are evaluated.
#[derive(Debug, Clone, Copy)]
pub struct MarketState<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    /// Peer-average normalized wealth (1/N) Σ V/v.
    pub m: f64,
}

/// Coefficient values at one state. `beta`, `sigma` are relative to the
/// price (dX_i = X_i(β_i dt + Σ_k σ_ik dW_k)); `gamma`, `tau` are absolute
/// coefficients of the invested capital.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub tau: DMatrix<f64>,
    /// Set by the oracle when `sigma` and `tau` are diagonal.
    pub diagonal: bool,
}

impl Coefficients {
    pub fn zeros(n: usize) -> Self {
        Coefficients {
            beta: DVector::zeros(n),
            sigma: DMatrix::zeros(n, n),
            gamma: DVector::zeros(n),
            tau: DMatrix::zeros(n, n),
            diagonal: true,
        }
    }

    pub fn alpha(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    pub fn psi(&self) -> DMatrix<f64> {
        &self.tau * self.tau.transpose()
    }

    /// θ = σ⁻¹β. Fails when σ is singular beyond `COND_LIMIT`.
    pub fn theta(&self, step: usize) -> Result<DVector<f64>> {
        solve_checked(&self.sigma, &self.beta, self.diagonal, step)
    }

    /// λ = τ⁻¹γ, with λ := 0 when both γ and τ vanish.
    pub fn lambda(&self, step: usize) -> Result<DVector<f64>> {
        if self.gamma.iter().all(|&g| g == 0.0) {
            return Ok(DVector::zeros(self.gamma.len()));
        }
        solve_checked(&self.tau, &self.gamma, self.diagonal, step)
    }

    /// Cheap condition estimate of σ (ratio of extreme pivots / diagonals).
    pub fn sigma_condition(&self) -> f64 {
        condition_estimate(&self.sigma, self.diagonal)
    }
}

pub const COND_LIMIT: f64 = 1e12;

fn condition_estimate(m: &DMatrix<f64>, diagonal: bool) -> f64 {
    let n = m.nrows();
    if diagonal {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let d = m[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo == 0.0 { f64::INFINITY } else { hi / lo }
    } else {
        let sv = m.clone().singular_values();
        let hi = sv.max();
        let lo = sv.min();
        if lo == 0.0 { f64::INFINITY } else { hi / lo }
    }
}

fn solve_checked(m: &DMatrix<f64>, rhs: &DVector<f64>, diagonal: bool, step: usize) -> Result<DVector<f64>> {
    let n = m.nrows();
    if diagonal {
        let cond = condition_estimate(m, true);
        if !(cond < COND_LIMIT) {
            return Err(Error::SingularSigma { step, cond });
        }
        return Ok(DVector::from_fn(n, |i, _| rhs[i] / m[(i, i)]));
    }
    let lu = m.clone().full_piv_lu();
    let u = lu.u();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..n {
        lo = lo.min(u[(i, i)].abs());
        hi = hi.max(u[(i, i)].abs());
    }
    let cond = if lo == 0.0 { f64::INFINITY } else { hi / lo };
    if !(cond < COND_LIMIT) {
        return Err(Error::SingularSigma { step, cond });
    }
    lu.solve(rhs).ok_or(Error::SingularSigma { step, cond })
}

/// Market coefficient oracle.
///
/// Implementations are pure functions of the state and must be shareable
/// across threads.
pub trait MarketOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, state: &MarketState<'_>, out: &mut Coefficients) -> Result<()>;

    fn time_homogeneous(&self) -> bool {
        true
    }

    fn measure_dependence(&self) -> MeasureDependence {
        MeasureDependence::None
    }

    /// Absolute covariance a_ij = x_i x_j α_ij, valid up to the faces.
    fn abs_covariance(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let _ = (x, y);
        None
    }

    /// Absolute covariance ψ of the invested capital, valid up to the faces.
    fn abs_covariance_y(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let _ = (x, y);
        None
    }

    /// Σ_j ∂a_ij/∂x_j in closed form.
    fn a_divergence(&self, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let _ = (x, y);
        None
    }

    /// Σ_q ∂ψ_pq/∂y_q in closed form.
    fn psi_divergence(&self, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let _ = (x, y);
        None
    }

    /// Gradient of H with b = a·DH.
    fn potential_grad_x(&self, x: &[f64]) -> Option<Vec<f64>> {
        let _ = x;
        None
    }

    /// Gradient of I with γ = ψ·DI.
    fn potential_grad_y(&self, y: &[f64]) -> Option<Vec<f64>> {
        let _ = y;
        None
    }

    fn name(&self) -> String;
}

/// Absolute covariance from an evaluation: a = diag(x) α diag(x).
pub fn abs_covariance_from(c: &Coefficients, x: &[f64]) -> DMatrix<f64> {
    let alpha = c.alpha();
    DMatrix::from_fn(x.len(), x.len(), |i, j| x[i] * x[j] * alpha[(i, j)])
}
