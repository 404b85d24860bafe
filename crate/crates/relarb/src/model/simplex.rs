use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Portfolio proportions over n stocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    w: Vec<f64>,
}

impl SimplexWeights {
    /// Accepts `w` if every entry is ≥ −tol and the sum is 1 within tol.
    pub fn checked(w: Vec<f64>, tol: f64) -> Result<Self> {
        let dev = simplex_deviation(&w);
        if dev > tol {
            return Err(Error::Domain(format!("weights {w:?} leave the simplex by {dev:.3e}")));
        }
        Ok(SimplexWeights { w })
    }

    /// Wraps weights without checking; see [`SimplexWeights::deviation`].
    pub fn unchecked(w: Vec<f64>) -> Self {
        SimplexWeights { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }

    pub fn deviation(&self) -> f64 {
        simplex_deviation(&self.w)
    }
}

/// max(−min_i w_i, |Σ w_i − 1|), clipped below at 0.
pub fn simplex_deviation(w: &[f64]) -> f64 {
    let neg = w.iter().fold(0.0f64, |acc, &x| acc.max(-x));
    let sum: f64 = w.iter().sum();
    neg.max((sum - 1.0).abs())
}

/// Market weights x_i / Σ x_j.
pub fn market_weights(x: &[f64]) -> Result<SimplexWeights> {
    if let Some(i) = x.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("market weights need positive prices, x[{i}] = {}", x[i])));
    }
    let total: f64 = x.iter().sum();
    Ok(SimplexWeights { w: x.iter().map(|v| v / total).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_market() {
        assert_eq!(market_weights(&[1.0; 4]).unwrap().as_slice(), &[0.25; 4]);
    }

    #[test]
    fn two_stocks() {
        assert_eq!(market_weights(&[3.0, 1.0]).unwrap().as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn rejects_zero_price() {
        assert!(market_weights(&[2.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn checked_rejects_short_positions() {
        assert!(SimplexWeights::checked(vec![1.2, -0.2], 1e-9).is_err());
        assert!(SimplexWeights::checked(vec![0.5, 0.5], 1e-9).is_ok());
    }

    proptest! {
        #[test]
        fn scaling_invariance(x in prop::collection::vec(0.01f64..100.0, 1..6), lam in 0.01f64..100.0) {
            let a = market_weights(&x).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * lam).collect();
            let b = market_weights(&scaled).unwrap();
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((p - q).abs() <= 1e-15);
            }
            prop_assert!(a.deviation() < 1e-14);
        }
    }
}
