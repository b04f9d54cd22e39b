use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct Gaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    pub(crate) fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let chol = Cholesky::new(cov)
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite("covariance determinant is not finite".into()));
        }
        Ok(Self {
            mean,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub(crate) fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Returns `(log N(x), cov^{-1} (x - mean))`.
    pub(crate) fn log_pdf_and_solve(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = x - &self.mean;
        let sol = self.chol.solve(&diff);
        (self.log_norm - 0.5 * diff.dot(&sol), sol)
    }

    pub(crate) fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.log_pdf_and_solve(x).0
    }

    /// `mean + L z` for a standard-normal `z`.
    pub(crate) fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        // l_dirty leaves garbage above the diagonal; only read the lower triangle.
        let d = z.len();
        let mut out = self.mean.clone();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[(i, j)] * z[j];
            }
            out[i] += acc;
        }
        out
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter(format!("{what} is not symmetric")));
            }
        }
    }
    Ok(())
}
