use nalgebra::{DMatrix, DVector};

use super::config::MarketSpec;
use super::oracle::{Coefficients, MarketOracle, MarketState, MeasureDependence};
use crate::error::{Error, Result};

/// Constant relative drift and volatility.
#[derive(Debug, Clone)]
pub struct ConstantMarket {
    beta: DVector<f64>,
    sigma: DMatrix<f64>,
    gamma: DVector<f64>,
    tau: DMatrix<f64>,
    diagonal: bool,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

impl ConstantMarket {
    pub fn new(beta: Vec<f64>, sigma: DMatrix<f64>) -> Self {
        let n = beta.len();
        Self::with_capital(beta, sigma, vec![0.0; n], DMatrix::zeros(n, n))
    }

    pub fn with_capital(beta: Vec<f64>, sigma: DMatrix<f64>, gamma: Vec<f64>, tau: DMatrix<f64>) -> Self {
        let diagonal = is_diagonal(&sigma) && is_diagonal(&tau);
        ConstantMarket {
            beta: DVector::from_vec(beta),
            sigma,
            gamma: DVector::from_vec(gamma),
            tau,
            diagonal,
        }
    }

    /// Diagonal market with σ_ii = `vol` and β = σθ.
    pub fn diagonal_gbm(theta: &[f64], vol: f64) -> Self {
        let n = theta.len();
        let beta = theta.iter().map(|t| vol * t).collect();
        Self::new(beta, DMatrix::from_diagonal_element(n, n, vol))
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

impl MarketOracle for ConstantMarket {
    fn dim(&self) -> usize {
        self.beta.len()
    }

    fn evaluate(&self, _state: &MarketState<'_>, out: &mut Coefficients) -> Result<()> {
        out.beta.copy_from(&self.beta);
        out.sigma.copy_from(&self.sigma);
        out.gamma.copy_from(&self.gamma);
        out.tau.copy_from(&self.tau);
        out.diagonal = self.diagonal;
        Ok(())
    }

    fn abs_covariance(&self, x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        let alpha = &self.sigma * self.sigma.transpose();
        Some(DMatrix::from_fn(x.len(), x.len(), |i, j| x[i] * x[j] * alpha[(i, j)]))
    }

    fn abs_covariance_y(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(&self.tau * self.tau.transpose())
    }

    fn a_divergence(&self, x: &[f64], _y: &[f64]) -> Option<Vec<f64>> {
        // ∂_j (x_i x_j α_ij) summed over j: x_i (Σ_j α_ij + α_ii)
        let alpha = &self.sigma * self.sigma.transpose();
        let n = x.len();
        Some((0..n).map(|i| x[i] * ((0..n).map(|j| alpha[(i, j)]).sum::<f64>() + alpha[(i, i)])).collect())
    }

    fn psi_divergence(&self, x: &[f64], _y: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; x.len()])
    }

    fn potential_grad_x(&self, x: &[f64]) -> Option<Vec<f64>> {
        let alpha = &self.sigma * self.sigma.transpose();
        let w = alpha.lu().solve(&self.beta)?;
        Some(x.iter().zip(w.iter()).map(|(xi, wi)| wi / xi).collect())
    }

    fn potential_grad_y(&self, _y: &[f64]) -> Option<Vec<f64>> {
        let n = self.gamma.len();
        if self.gamma.iter().all(|&g| g == 0.0) {
            return Some(vec![0.0; n]);
        }
        let psi = &self.tau * self.tau.transpose();
        psi.lu().solve(&self.gamma).map(|v| v.iter().copied().collect())
    }

    fn name(&self) -> String {
        "constant".into()
    }
}

/// Volatility-stabilized market driven by invested capital Z = Y:
/// β_i = (1+ζ) Z_i / (2 m_i), a_ii = X_i, γ = β, ψ_ii = Z_i.
#[derive(Debug, Clone)]
pub struct VolStabilizedMarket {
    n: usize,
    zeta: f64,
}

/// Lower clamp applied to market weights and invested capital in drifts.
pub const VSM_FLOOR: f64 = 1e-12;

impl VolStabilizedMarket {
    pub fn new(n: usize, zeta: f64) -> Result<Self> {
        if !(zeta >= 0.0) {
            return Err(Error::Domain(format!("zeta must be nonnegative, got {zeta}")));
        }
        Ok(VolStabilizedMarket { n, zeta })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }
}

impl MarketOracle for VolStabilizedMarket {
    fn dim(&self) -> usize {
        self.n
    }

    fn evaluate(&self, s: &MarketState<'_>, out: &mut Coefficients) -> Result<()> {
        let total: f64 = s.x.iter().sum();
        out.sigma.fill(0.0);
        out.tau.fill(0.0);
        out.diagonal = true;
        for i in 0..self.n {
            let xi = s.x[i];
            if !(xi > 0.0) {
                return Err(Error::Singularity(format!("market weight of stock {i} is zero")));
            }
            let mi = (xi / total).max(VSM_FLOOR);
            let zi = s.y[i].max(VSM_FLOOR);
            let b = (1.0 + self.zeta) * zi / (2.0 * mi);
            out.beta[i] = b;
            out.sigma[(i, i)] = xi.powf(-0.5);
            out.gamma[i] = b;
            out.tau[(i, i)] = s.y[i].max(0.0).sqrt();
        }
        Ok(())
    }

    fn measure_dependence(&self) -> MeasureDependence {
        MeasureDependence::MeanInvested
    }

    fn abs_covariance(&self, x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_diagonal(&DVector::from_column_slice(x)))
    }

    fn abs_covariance_y(&self, _x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_diagonal(&DVector::from_column_slice(y)))
    }

    fn a_divergence(&self, x: &[f64], _y: &[f64]) -> Option<Vec<f64>> {
        Some(vec![1.0; x.len()])
    }

    fn psi_divergence(&self, _x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        Some(vec![1.0; y.len()])
    }

    fn name(&self) -> String {
        format!("volatility_stabilized(zeta={})", self.zeta)
    }
}

/// Builds the oracle described by a market spec.
pub fn builtin_market(spec: &MarketSpec, n: usize) -> Result<Box<dyn MarketOracle>> {
    match spec {
        MarketSpec::Constant { beta, sigma, gamma, tau } => {
            if beta.len() != n || sigma.len() != n {
                return Err(Error::Config("constant market dimension mismatch".into()));
            }
            let s = DMatrix::from_fn(n, n, |i, j| sigma[i][j]);
            let g = gamma.clone().unwrap_or_else(|| vec![0.0; n]);
            let t = match tau {
                Some(t) => DMatrix::from_fn(n, n, |i, j| t[i][j]),
                None => DMatrix::zeros(n, n),
            };
            Ok(Box::new(ConstantMarket::with_capital(beta.clone(), s, g, t)))
        }
        MarketSpec::VolatilityStabilized { zeta } => Ok(Box::new(VolStabilizedMarket::new(n, *zeta)?)),
    }
}
