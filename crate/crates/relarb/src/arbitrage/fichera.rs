use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{oracle::abs_covariance_from, Coefficients, MarketOracle, MarketState};

/// Values of f within this distance of zero count as nonnegative.
pub const SIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceKind {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceVerdict {
    NonnegativeOnFace,
    NegativeOnFace,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalVerdict {
    NoRelativeArbitrage,
    RelativeArbitrageExists,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceRecord {
    pub kind: FaceKind,
    pub index: usize,
    pub min_f: f64,
    pub max_f: f64,
    pub samples: usize,
    pub verdict: FaceVerdict,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FicheraReport {
    pub faces: Vec<FaceRecord>,
    pub verdict: GlobalVerdict,
    pub analytic: bool,
}

/// Sampling box for the coordinates that are not pinned to a face.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FicheraBox {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    /// Peer average entering Vbench.
    pub m: f64,
    pub delta: f64,
}

impl FicheraBox {
    pub fn around(x0: &[f64], y0: &[f64], delta: f64) -> Self {
        let xs = x0.iter().copied().fold(0.0f64, f64::max).max(1.0);
        let ys = y0.iter().copied().fold(0.0f64, f64::max).max(1.0);
        FicheraBox { x_lo: xs / 8.0, x_hi: 8.0 * xs, y_lo: ys / 8.0, y_hi: 8.0 * ys, m: 1.0, delta }
    }
}

/// Face-limit evaluation of f_k with k < n for x-faces and k ≥ n for y-faces.
struct Evaluator<'a> {
    oracle: &'a dyn MarketOracle,
    n: usize,
    bx: &'a FicheraBox,
    coef: Coefficients,
}

impl Evaluator<'_> {
    fn covariances(&mut self, x: &[f64], y: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = self.oracle.abs_covariance(x, y);
        let p = self.oracle.abs_covariance_y(x, y);
        if let (Some(a), Some(p)) = (&a, &p) {
            return Ok((a.clone(), p.clone()));
        }
        self.oracle.evaluate(&MarketState { t: 0.0, x, y, m: self.bx.m }, &mut self.coef)?;
        Ok((a.unwrap_or_else(|| abs_covariance_from(&self.coef, x)), p.unwrap_or_else(|| self.coef.psi())))
    }

    fn b_hat(&mut self, x: &[f64], y: &[f64], i: usize) -> Result<f64> {
        let (a, _) = self.covariances(x, y)?;
        let vb = self.bx.delta * x.iter().sum::<f64>() + (1.0 - self.bx.delta) * self.bx.m;
        Ok(self.bx.delta / vb * (0..self.n).map(|j| a[(i, j)]).sum::<f64>())
    }

    /// ½ Σ_j D_j â_kj by finite differences, one-sided into the interior
    /// along the face coordinate.
    fn numeric_half_divergence(&mut self, x: &[f64], y: &[f64], k: usize, h_face: f64) -> Result<f64> {
        let n = self.n;
        let mut div = 0.0;
        for j in 0..n {
            let (on_x, block) = if k < n { (true, k) } else { (false, k - n) };
            let coord = |v: &[f64], w: &[f64]| if on_x { v[j] } else { w[j] };
            let face = j == block;
            let base = coord(x, y);
            let h = if face { h_face } else { 1e-5 * base.max(1.0) };
            let mut shift = |delta: f64| -> Result<f64> {
                let mut px = x.to_vec();
                let mut py = y.to_vec();
                if on_x {
                    px[j] += delta;
                } else {
                    py[j] += delta;
                }
                let (a, p) = self.covariances(&px, &py)?;
                Ok(if on_x { a[(block, j)] } else { p[(block, j)] })
            };
            div += if face {
                (-3.0 * shift(0.0)? + 4.0 * shift(h)? - shift(2.0 * h)?) / (2.0 * h)
            } else {
                (shift(h)? - shift(-h)?) / (2.0 * h)
            };
        }
        Ok(0.5 * div)
    }

    fn f_at(&mut self, x: &[f64], y: &[f64], k: usize, h_face: f64) -> Result<(f64, bool)> {
        let n = self.n;
        let analytic = if k < n { self.oracle.a_divergence(x, y).map(|d| d[k]) } else { self.oracle.psi_divergence(x, y).map(|d| d[k - n]) };
        let half_div = match analytic {
            Some(d) => 0.5 * d,
            None => self.numeric_half_divergence(x, y, k, h_face)?,
        };
        let b = if k < n { self.b_hat(x, y, k)? } else { 0.0 };
        Ok((b - half_div, analytic.is_some()))
    }

    /// Limit of f_k as the face coordinate tends to zero, by linear
    /// extrapolation from h and 2h.
    fn face_limit(&mut self, point: &[f64], k: usize, h: f64) -> Result<(f64, bool)> {
        let n = self.n;
        let mut x = point[..n].to_vec();
        let mut y = point[n..].to_vec();
        let pin = |x: &mut Vec<f64>, y: &mut Vec<f64>, v: f64| if k < n { x[k] = v } else { y[k - n] = v };
        pin(&mut x, &mut y, h);
        let (f1, analytic) = self.f_at(&x, &y, k, h)?;
        pin(&mut x, &mut y, 2.0 * h);
        let (f2, _) = self.f_at(&x, &y, k, h)?;
        Ok((2.0 * f1 - f2, analytic))
    }
}

fn verdict_of(min_f: f64, max_f: f64) -> FaceVerdict {
    if min_f >= -SIGN_TOL {
        FaceVerdict::NonnegativeOnFace
    } else if max_f < -SIGN_TOL {
        FaceVerdict::NegativeOnFace
    } else {
        FaceVerdict::Mixed
    }
}

/// Samples f_i = b̂_i − ½ Σ_j D_j â_ij on every face {x_i = 0} and {y_i = 0}.
pub fn fichera_check(oracle: &dyn MarketOracle, bx: &FicheraBox, samples_per_face: usize) -> Result<FicheraReport> {
    if samples_per_face == 0 {
        return Err(Error::Config("at least one sample per face is required".into()));
    }
    if !(bx.x_lo > 0.0 && bx.x_hi > bx.x_lo && bx.y_lo > 0.0 && bx.y_hi > bx.y_lo) {
        return Err(Error::Config("Fichera box must have 0 < lo < hi on both axes".into()));
    }
    let n = oracle.dim();
    let d = 2 * n;
    let mut ev = Evaluator { oracle, n, bx, coef: Coefficients::zeros(n) };
    // Kronecker sequence with square-root-of-prime increments
    const ROOTS: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
    let mut faces = Vec::with_capacity(d);
    let mut all_analytic = true;
    for k in 0..d {
        let scale = if k < n { bx.x_hi } else { bx.y_hi };
        let h = 1e-6 * scale;
        let mut min_f = f64::INFINITY;
        let mut max_f = f64::NEG_INFINITY;
        let mut diagnostic = None;
        for s in 0..samples_per_face {
            let point: Vec<f64> = (0..d)
                .map(|c| {
                    let frac = ((s as f64 + 0.5) * ROOTS[c % ROOTS.len()].sqrt().fract() + 0.37 * c as f64).fract();
                    let (lo, hi) = if c < n { (bx.x_lo, bx.x_hi) } else { (bx.y_lo, bx.y_hi) };
                    (lo.ln() + frac * (hi.ln() - lo.ln())).exp()
                })
                .collect();
            match ev.face_limit(&point, k, h) {
                Ok((f, analytic)) if f.is_finite() => {
                    all_analytic &= analytic;
                    min_f = min_f.min(f);
                    max_f = max_f.max(f);
                }
                Ok((f, _)) => {
                    diagnostic = Some(format!("non-finite derivative estimate {f} at sample {s}"));
                    break;
                }
                Err(e) => {
                    diagnostic = Some(format!("evaluation failed at sample {s}: {e}"));
                    break;
                }
            }
        }
        let verdict = if diagnostic.is_some() { FaceVerdict::Mixed } else { verdict_of(min_f, max_f) };
        faces.push(FaceRecord {
            kind: if k < n { FaceKind::X } else { FaceKind::Y },
            index: if k < n { k } else { k - n },
            min_f,
            max_f,
            samples: samples_per_face,
            verdict,
            diagnostic,
        });
    }
    let verdict = if faces.iter().all(|f| f.verdict == FaceVerdict::NonnegativeOnFace) {
        GlobalVerdict::NoRelativeArbitrage
    } else if faces.iter().all(|f| f.verdict == FaceVerdict::NegativeOnFace) {
        GlobalVerdict::RelativeArbitrageExists
    } else {
        GlobalVerdict::Inconclusive
    };
    Ok(FicheraReport { faces, verdict, analytic: all_analytic })
}
