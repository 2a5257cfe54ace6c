//! Weighted least squares and weighted logistic regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// IRLS stops once no coefficient moves by more than this.
pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
/// Any logit-scale coefficient beyond this magnitude is taken as separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    /// Means for linear fits, probabilities for logistic fits.
    pub fitted: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn check_weights(x: &DMatrix<f64>, w: &[f64]) -> Result<()> {
    let (n, p) = x.shape();
    if w.len() != n {
        return Err(Error::Invalid(format!("{} weights for {n} rows", w.len())));
    }
    if n < p {
        return Err(Error::Invalid(format!(
            "{n} rows cannot identify {p} coefficients"
        )));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid(format!(
            "weight {} at row {} is not a nonnegative number",
            w[i],
            i + 1
        )));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroWeights);
    }
    Ok(())
}

/// A thin QR factorization of `diag(sqrt(w)) X`, reusable for any number of
/// responses sharing the same design and weights.
#[derive(Debug, Clone)]
pub struct WlsSolver {
    sqrt_w: Vec<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl WlsSolver {
    pub fn new(x: &DMatrix<f64>, w: &[f64]) -> Result<Self> {
        check_weights(x, w)?;
        let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let mut xw = x.clone();
        for mut col in xw.column_iter_mut() {
            for (v, s) in col.iter_mut().zip(&sqrt_w) {
                *v *= s;
            }
        }
        let norms: Vec<f64> = xw.column_iter().map(|c| c.norm()).collect();
        let qr = xw.qr();
        let r = qr.r();
        for (j, norm) in norms.iter().enumerate() {
            if r[(j, j)].abs() <= RANK_TOL * norm.max(f64::MIN_POSITIVE) || *norm == 0.0 {
                return Err(Error::RankDeficient {
                    column: j,
                    label: None,
                });
            }
        }
        Ok(Self {
            sqrt_w,
            q: qr.q(),
            r,
        })
    }

    pub fn n_coefficients(&self) -> usize {
        self.r.ncols()
    }

    /// Coefficients minimizing the weighted squared error for response `y`.
    pub fn solve(&self, y: &[f64]) -> DVector<f64> {
        let yw = DVector::from_iterator(y.len(), y.iter().zip(&self.sqrt_w).map(|(a, s)| a * s));
        let c = self.q.tr_mul(&yw);
        self.r
            .solve_upper_triangular(&c)
            .expect("diagonal checked nonzero at construction")
    }
}

/// Attaches a column label to a rank-deficiency error.
pub fn label_rank_error(err: Error, labels: &[String]) -> Error {
    match err {
        Error::RankDeficient {
            column,
            label: None,
        } => Error::RankDeficient {
            column,
            label: labels.get(column).cloned(),
        },
        other => other,
    }
}

pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<FitResult> {
    if y.len() != x.nrows() {
        return Err(Error::Invalid(format!(
            "{} responses for {} rows",
            y.len(),
            x.nrows()
        )));
    }
    let solver = WlsSolver::new(x, w)?;
    let beta = solver.solve(y);
    let fitted = x * &beta;
    Ok(FitResult {
        coefficients: beta,
        fitted,
        converged: true,
        iterations: 1,
    })
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1).
#[inline]
fn clamp_prob(mu: f64) -> f64 {
    mu.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn logistic_irls(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> Result<FitResult> {
    check_weights(x, w)?;
    if z.len() != x.nrows() {
        return Err(Error::Invalid(format!(
            "{} responses for {} rows",
            z.len(),
            x.nrows()
        )));
    }
    if let Some(i) = z.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!(
            "binary response is {} at row {}",
            z[i],
            i + 1
        )));
    }
    let ones = z.iter().zip(w).any(|(&zi, &wi)| wi > 0.0 && zi == 1.0);
    let zeros = z.iter().zip(w).any(|(&zi, &wi)| wi > 0.0 && zi == 0.0);
    if !(ones && zeros) {
        return Err(Error::SingleClass);
    }
    let n = x.nrows();
    let mut gamma = DVector::zeros(x.ncols());
    let mut eta = DVector::zeros(n);
    let mut irls_w = vec![0.0; n];
    let mut work = vec![0.0; n];
    for iter in 1..=IRLS_MAX_ITER {
        for i in 0..n {
            let mu = clamp_prob(logistic(eta[i]));
            let v = mu * (1.0 - mu);
            irls_w[i] = w[i] * v;
            work[i] = eta[i] + (z[i] - mu) / v;
        }
        let next = match WlsSolver::new(x, &irls_w) {
            Ok(s) => s.solve(&work),
            // vanishing IRLS weights on every row mean the fit has run off
            Err(Error::ZeroWeights) => {
                return Err(Error::NonConvergence(
                    "IRLS weights collapsed to zero".into(),
                ))
            }
            Err(e) => return Err(e),
        };
        if let Some(j) = next
            .iter()
            .position(|g| !g.is_finite() || g.abs() > SEPARATION_BOUND)
        {
            return Err(Error::NonConvergence(format!(
                "coefficient {j} reached {:.3} at iteration {iter}; the classes appear separated",
                next[j]
            )));
        }
        let step = (&next - &gamma).amax();
        gamma = next;
        eta = x * &gamma;
        if step <= IRLS_TOL {
            return Ok(FitResult {
                fitted: eta.map(|e| clamp_prob(logistic(e))),
                coefficients: gamma,
                converged: true,
                iterations: iter,
            });
        }
    }
    log::warn!("logistic regression stopped after {IRLS_MAX_ITER} iterations without converging");
    Ok(FitResult {
        fitted: eta.map(|e| clamp_prob(logistic(e))),
        coefficients: gamma,
        converged: false,
        iterations: IRLS_MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weighted_mean_examples() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let fit = wls(&x, &[2.0, 4.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 3.0, epsilon = 1e-14);
        let fit = wls(&x, &[2.0, 4.0], &[3.0, 1.0]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_weights_and_rank_deficiency() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            wls(&x, &[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::ZeroWeights)
        ));
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0]);
        match wls(&x, &[1.0, 2.0, 3.0], &[1.0; 3]) {
            Err(Error::RankDeficient { column, .. }) => assert_eq!(column, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn intercept_only_logistic_is_log_odds() {
        let x = DMatrix::from_element(10, 1, 1.0);
        let z = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let fit = logistic_irls(&x, &z, &[1.0; 10]).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], (0.6f64 / 0.4).ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(fit.fitted[0], 0.6, epsilon = 1e-10);
    }

    #[test]
    fn separation_detected() {
        let xs = [-3.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 3.0];
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let z: Vec<f64> = xs.iter().map(|&v| (v > 0.0) as u8 as f64).collect();
        assert!(matches!(
            logistic_irls(&x, &z, &[1.0; 8]),
            Err(Error::NonConvergence(_))
        ));
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(
            logistic_irls(&x, &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]),
            Err(Error::SingleClass)
        ));
    }
}
