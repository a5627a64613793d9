//! Multivariate normal kernels: Cholesky factorization, correlated
//! sampling, and deterministic CDF evaluation.

mod cdf;

use crate::error::{Error, Result};
use crate::normal;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Lower-triangular Cholesky factor of a positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// Cholesky factorization of a symmetric matrix; fails with the offending
/// pivot index when the matrix is not positive definite.
pub fn cholesky(matrix: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = matrix.nrows();
    debug_assert_eq!(n, matrix.ncols(), "cholesky input must be square");
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = matrix[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// Draws `count` rows of `mean + L z` with `z` standard normal.
/// Deterministic given the RNG state: values are consumed row by row.
pub fn sample_mvn<R: Rng>(
    mean: &[f64],
    factor: &CholeskyFactor,
    count: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = factor.dim();
    assert_eq!(mean.len(), n, "mean length must match factor dimension");
    let l = &factor.lower;
    let mut out = DMatrix::zeros(count, n);
    let mut z = vec![0.0; n];
    for row in 0..count {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let mut v = mean[i];
            for k in 0..=i {
                v += l[(i, k)] * z[k];
            }
            out[(row, i)] = v;
        }
    }
    out
}

/// Deterministic P(X_i <= upper_i for all i) for X ~ N(0, correlation).
///
/// Coordinates with `upper = +inf` are marginalized out exactly and any
/// `-inf` coordinate short-circuits to 0. After reduction, dimensions one
/// to three are evaluated by exact quadratures and dimension four by an
/// adaptive conditioning quadrature over the trivariate kernel; higher
/// dimensions use a separation-of-variables transform driven by
/// quasi-random sequences with a fixed scrambling seed, so repeated calls
/// are bit-identical.
pub fn mvn_cdf(upper: &[f64], correlation: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let n = upper.len();
    if correlation.nrows() != n || correlation.ncols() != n {
        return Err(Error::InvalidInput {
            what: "mvn_cdf",
            why: format!(
                "correlation is {}x{} but upper has length {n}",
                correlation.nrows(),
                correlation.ncols()
            ),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput {
            what: "mvn_cdf",
            why: format!("tol must be positive, got {tol}"),
        });
    }
    for &u in upper {
        if u == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        if u.is_nan() {
            return Err(Error::InvalidInput {
                what: "mvn_cdf",
                why: "upper limit is NaN".into(),
            });
        }
    }
    // Marginalize +inf coordinates.
    let keep: Vec<usize> = (0..n).filter(|&i| upper[i].is_finite()).collect();
    match keep.len() {
        0 => Ok(1.0),
        1 => Ok(normal::cdf(upper[keep[0]])),
        2 => {
            let (i, j) = (keep[0], keep[1]);
            Ok(cdf::bvn_cdf(
                upper[i],
                upper[j],
                correlation[(i, j)],
                tol,
            ))
        }
        3 => {
            let (i, j, k) = (keep[0], keep[1], keep[2]);
            Ok(cdf::tvn_cdf(
                [upper[i], upper[j], upper[k]],
                [
                    correlation[(i, j)],
                    correlation[(i, k)],
                    correlation[(j, k)],
                ],
                tol,
            ))
        }
        m => {
            let b: Vec<f64> = keep.iter().map(|&i| upper[i]).collect();
            let mut sub = DMatrix::zeros(m, m);
            for (a, &i) in keep.iter().enumerate() {
                for (c, &j) in keep.iter().enumerate() {
                    sub[(a, c)] = correlation[(i, j)];
                }
            }
            if m == 4 {
                Ok(cdf::qvn_cdf(&b, &sub, tol))
            } else {
                cdf::qmc_cdf(&b, &sub, tol)
            }
        }
    }
}
