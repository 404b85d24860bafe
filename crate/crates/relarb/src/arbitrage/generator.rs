use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{oracle::abs_covariance_from, Coefficients, MarketOracle, MarketState};

/// First and second derivatives of a test function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJet {
    pub grad_x: Vec<f64>,
    pub hess_x: DMatrix<f64>,
    pub hess_y: DMatrix<f64>,
}

/// Function values on a tensor stencil over (x, y), `width` points per
/// axis centred at the evaluation point, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub h: Vec<f64>,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Stencil {
    /// Samples `f(x, y)` on a 3-point stencil with spacings `hx`, `hy`.
    pub fn sample(f: impl Fn(&[f64], &[f64]) -> f64, x: &[f64], y: &[f64], hx: &[f64], hy: &[f64]) -> Self {
        let n = x.len();
        let d = 2 * n;
        let h: Vec<f64> = hx.iter().chain(hy).copied().collect();
        let total = 3usize.pow(d as u32);
        let mut values = Vec::with_capacity(total);
        let mut px = x.to_vec();
        let mut py = y.to_vec();
        for idx in 0..total {
            let mut rem = idx;
            for axis in (0..d).rev() {
                let off = (rem % 3) as f64 - 1.0;
                rem /= 3;
                if axis < n {
                    px[axis] = x[axis] + off * h[axis];
                } else {
                    py[axis - n] = y[axis - n] + off * h[axis];
                }
            }
            values.push(f(&px, &py));
        }
        Stencil { h, width: 3, values }
    }

    fn at(&self, offsets: &[(usize, i64)]) -> f64 {
        let d = self.h.len();
        let c = (self.width / 2) as i64;
        let mut pos = vec![c; d];
        for &(axis, o) in offsets {
            pos[axis] += o;
        }
        let mut idx = 0usize;
        for p in pos {
            idx = idx * self.width + p as usize;
        }
        self.values[idx]
    }

    /// Central-difference jet at the stencil centre.
    pub fn jet(&self, n: usize) -> Result<LocalJet> {
        let d = 2 * n;
        if self.width < 3 || self.width.is_multiple_of(2) {
            return Err(Error::Domain(format!("stencil width {} too small for second differences", self.width)));
        }
        if self.h.len() != d || self.values.len() != self.width.pow(d as u32) {
            return Err(Error::Domain("stencil shape does not match the state dimension".into()));
        }
        if self.h.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Domain("stencil spacings must be positive".into()));
        }
        let f0 = self.at(&[]);
        let second = |i: usize, j: usize| -> f64 {
            if i == j {
                (self.at(&[(i, 1)]) - 2.0 * f0 + self.at(&[(i, -1)])) / (self.h[i] * self.h[i])
            } else {
                (self.at(&[(i, 1), (j, 1)]) - self.at(&[(i, 1), (j, -1)]) - self.at(&[(i, -1), (j, 1)])
                    + self.at(&[(i, -1), (j, -1)]))
                    / (4.0 * self.h[i] * self.h[j])
            }
        };
        Ok(LocalJet {
            grad_x: (0..n).map(|i| (self.at(&[(i, 1)]) - self.at(&[(i, -1)])) / (2.0 * self.h[i])).collect(),
            hess_x: DMatrix::from_fn(n, n, &second),
            hess_y: DMatrix::from_fn(n, n, |p, q| second(n + p, n + q)),
        })
    }
}

fn covariances(oracle: &dyn MarketOracle, state: &MarketState<'_>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = oracle.abs_covariance(state.x, state.y);
    let psi = oracle.abs_covariance_y(state.x, state.y);
    match (a, psi) {
        (Some(a), Some(p)) => Ok((a, p)),
        (a, p) => {
            let mut c = Coefficients::zeros(oracle.dim());
            oracle.evaluate(state, &mut c)?;
            Ok((a.unwrap_or_else(|| abs_covariance_from(&c, state.x)), p.unwrap_or_else(|| c.psi())))
        }
    }
}

/// 𝒜f = ½ Σ a_ij (D²_ij f + 2δ D_i f / Vbench(0)) + ½ Σ ψ_pq D²_pq f.
pub fn apply_generator(
    oracle: &dyn MarketOracle,
    state: &MarketState<'_>,
    delta: f64,
    vbench0: f64,
    jet: &LocalJet,
) -> Result<f64> {
    let n = oracle.dim();
    if jet.grad_x.len() != n || jet.hess_x.nrows() != n || jet.hess_y.nrows() != n {
        return Err(Error::Shape("jet does not match market dimension".into()));
    }
    let (a, psi) = covariances(oracle, state)?;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * (jet.hess_x[(i, j)] + 2.0 * delta * jet.grad_x[i] / vbench0);
            acc += psi[(i, j)] * jet.hess_y[(i, j)];
        }
    }
    Ok(0.5 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConstantMarket;
    use proptest::prelude::*;

    fn state<'a>(x: &'a [f64], y: &'a [f64]) -> MarketState<'a> {
        MarketState { t: 0.0, x, y, m: 1.0 }
    }

    fn market() -> ConstantMarket {
        // a_11 = σ² x² = 0.04 at x = 1
        ConstantMarket::diagonal_gbm(&[0.0], 0.2)
    }

    #[test]
    fn constants_are_annihilated() {
        let s = Stencil::sample(|_, _| 0.01f64.exp(), &[1.0], &[0.3], &[0.01], &[0.01]);
        let jet = s.jet(1).unwrap();
        assert_eq!(apply_generator(&market(), &state(&[1.0], &[0.3]), 0.5, 1.0, &jet).unwrap(), 0.0);
    }

    #[test]
    fn linear_and_quadratic_hand_values() {
        let o = market();
        let lin = Stencil::sample(|x, _| x[0], &[1.0], &[0.0], &[0.25], &[0.25]).jet(1).unwrap();
        let v = apply_generator(&o, &state(&[1.0], &[0.0]), 0.5, 1.0, &lin).unwrap();
        assert!((v - 0.02).abs() < 1e-14, "{v}");
        let quad = Stencil::sample(|x, _| x[0] * x[0], &[1.0], &[0.0], &[1e-3], &[1e-3]).jet(1).unwrap();
        let v = apply_generator(&o, &state(&[1.0], &[0.0]), 0.0, 1.0, &quad).unwrap();
        assert!((v - 0.04).abs() < 1e-9, "{v}");
        let exact = LocalJet { grad_x: vec![2.0], hess_x: DMatrix::from_element(1, 1, 2.0), hess_y: DMatrix::zeros(1, 1) };
        assert!((apply_generator(&o, &state(&[1.0], &[0.0]), 0.0, 1.0, &exact).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn narrow_stencil_rejected() {
        let s = Stencil { h: vec![0.1, 0.1], width: 1, values: vec![1.0] };
        assert!(matches!(s.jet(1), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn generator_is_linear(
            x1 in 0.5f64..2.0, x2 in 0.5f64..2.0, y1 in 0.1f64..1.0,
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
        ) {
            let s = nalgebra::DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.2]);
            let t = nalgebra::DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.02, 0.3]);
            let o = ConstantMarket::with_capital(vec![0.01, 0.02], s, vec![0.0, 0.0], t);
            let (x, y) = ([x1, x2], [y1, 0.4]);
            let h = [1e-2, 1e-2];
            let f = |x: &[f64], y: &[f64]| (x[0] * x[1]).sin() + y[0] * y[1] * x[0];
            let g = |x: &[f64], y: &[f64]| x[0].exp() - y[1].powi(3) + x[1] * y[0];
            let fg = |x: &[f64], y: &[f64]| alpha * f(x, y) + beta * g(x, y);
            let st = state(&x, &y);
            let af = apply_generator(&o, &st, 0.4, 1.3, &Stencil::sample(f, &x, &y, &h, &h).jet(2).unwrap()).unwrap();
            let ag = apply_generator(&o, &st, 0.4, 1.3, &Stencil::sample(g, &x, &y, &h, &h).jet(2).unwrap()).unwrap();
            let afg = apply_generator(&o, &st, 0.4, 1.3, &Stencil::sample(fg, &x, &y, &h, &h).jet(2).unwrap()).unwrap();
            prop_assert!((afg - alpha * af - beta * ag).abs() < 1e-10 * (1.0 + afg.abs()));
        }
    }
}
