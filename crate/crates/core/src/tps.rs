//! Thin-plate-spline surfaces over one to three dimensions with analytic
//! gradients and generalized-cross-validation smoothing selection.
//!
//! The regularized system is
//!
//! ```text
//! (K + lambda I) w + P c = y,    P^T w = 0
//! ```
//!
//! solved through the null-space transform: with P = Q1 R (Householder QR)
//! and Q2 spanning the orthogonal complement, the kernel coefficients are
//! `w = Q2 (B + lambda I)^{-1} Q2^T y` where `B = Q2^T K Q2` is positive
//! semidefinite, which also yields the GCV trace terms from one symmetric
//! eigendecomposition.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Smoothing-parameter choice for [`fit_tps`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    Fixed(f64),
    /// Select lambda by generalized cross-validation over a log grid.
    Auto,
}

/// A fitted polyharmonic surface. Immutable; evaluation is thread-safe.
#[derive(Debug, Clone)]
pub struct TpsSurface {
    dim: usize,
    /// Training sites in standardized coordinates, one row per knot.
    knots: DMatrix<f64>,
    weights: DVector<f64>,
    /// Affine part (constant, then one slope per standardized coordinate).
    poly: DVector<f64>,
    lambda: f64,
    shift: Vec<f64>,
    scale: Vec<f64>,
    bbox_lo: Vec<f64>,
    bbox_hi: Vec<f64>,
    values: Vec<f64>,
}

/// Evaluation result carrying the extrapolation flag (outside the knot
/// bounding box, the smooth extension is exact but unconstrained by data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub value: f64,
    pub extrapolated: bool,
}

#[inline]
fn kernel(dim: usize, rho2: f64) -> f64 {
    if rho2 <= 0.0 {
        return 0.0;
    }
    if dim == 2 {
        // rho^2 ln rho
        0.5 * rho2 * rho2.ln()
    } else {
        // rho^3 for d = 1 and d = 3
        rho2 * rho2.sqrt()
    }
}

/// phi'(rho)/rho, the radial factor of the kernel gradient; defined as 0 at
/// the knot itself (the k = 2 polyharmonic limit).
#[inline]
fn kernel_grad_factor(dim: usize, rho2: f64) -> f64 {
    if rho2 < 1e-280 {
        return 0.0;
    }
    if dim == 2 {
        rho2.ln() + 1.0
    } else {
        3.0 * rho2.sqrt()
    }
}

struct HouseholderQr {
    /// Reflector vectors, the k-th acting on rows k..N.
    reflectors: Vec<DVector<f64>>,
    r: DMatrix<f64>,
}

fn householder_qr(p: &DMatrix<f64>) -> HouseholderQr {
    let (n, m) = (p.nrows(), p.ncols());
    let mut a = p.clone();
    let mut reflectors = Vec::with_capacity(m);
    for k in 0..m {
        let x: DVector<f64> = DVector::from_fn(n - k, |i, _| a[(k + i, k)]);
        let norm = x.norm();
        let mut v = x;
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm > 0.0 {
            v /= vnorm;
            // Apply I - 2 v v^T to the trailing block.
            for j in k..m {
                let mut dot = 0.0;
                for i in 0..(n - k) {
                    dot += v[i] * a[(k + i, j)];
                }
                for i in 0..(n - k) {
                    a[(k + i, j)] -= 2.0 * dot * v[i];
                }
            }
        }
        reflectors.push(v);
    }
    let r = a.view((0, 0), (m, m)).upper_triangle();
    HouseholderQr { reflectors, r }
}

impl HouseholderQr {
    /// Q e_col for a unit vector (used to materialize Q2 columns).
    fn q_times_unit(&self, n: usize, col: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[col] = 1.0;
        for (k, refl) in self.reflectors.iter().enumerate().rev() {
            let mut dot = 0.0;
            for i in 0..refl.len() {
                dot += refl[i] * v[k + i];
            }
            for i in 0..refl.len() {
                v[k + i] -= 2.0 * dot * refl[i];
            }
        }
        v
    }

    /// First m entries of Q^T t.
    fn qt_head(&self, t: &DVector<f64>) -> DVector<f64> {
        let mut v = t.clone();
        for (k, refl) in self.reflectors.iter().enumerate() {
            let mut dot = 0.0;
            for i in 0..refl.len() {
                dot += refl[i] * v[k + i];
            }
            for i in 0..refl.len() {
                v[k + i] -= 2.0 * dot * refl[i];
            }
        }
        v.rows(0, self.reflectors.len()).into_owned()
    }
}

/// Fits a polyharmonic spline (cubic kernel in 1-D/3-D, `rho^2 log rho` in
/// 2-D) with an affine polynomial part.
pub fn fit_tps(sites: &DMatrix<f64>, values: &[f64], smoothing: Smoothing) -> Result<TpsSurface> {
    let n = sites.nrows();
    let d = sites.ncols();
    if d == 0 || d > 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    if values.len() != n {
        return Err(Error::InvalidInput {
            what: "fit_tps",
            why: format!("{n} sites but {} values", values.len()),
        });
    }
    let m = d + 1;
    if n < d + 2 {
        return Err(Error::InvalidInput {
            what: "fit_tps",
            why: format!("need at least {} sites for dimension {d}, got {n}", d + 2),
        });
    }
    if let Smoothing::Fixed(l) = smoothing {
        if !(l >= 0.0) {
            return Err(Error::InvalidInput {
                what: "fit_tps",
                why: format!("lambda must be >= 0, got {l}"),
            });
        }
    }

    // Standardize coordinates; alpha coordinates live on (0, 0.025) and raw
    // kernel distances would be badly scaled otherwise.
    let mut shift = vec![0.0; d];
    let mut scale = vec![0.0; d];
    let mut bbox_lo = vec![f64::INFINITY; d];
    let mut bbox_hi = vec![f64::NEG_INFINITY; d];
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            let v = sites[(i, j)];
            mean += v;
            bbox_lo[j] = bbox_lo[j].min(v);
            bbox_hi[j] = bbox_hi[j].max(v);
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            var += (sites[(i, j)] - mean).powi(2);
        }
        let sd = (var / n as f64).sqrt();
        if sd < 1e-12 * (1.0 + mean.abs()) {
            return Err(Error::RankDeficient(format!(
                "coordinate {j} is constant across sites"
            )));
        }
        shift[j] = mean;
        scale[j] = sd;
    }
    let knots = DMatrix::from_fn(n, d, |i, j| (sites[(i, j)] - shift[j]) / scale[j]);

    // Duplicate detection in standardized space.
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            for t in 0..d {
                r2 += (knots[(i, t)] - knots[(j, t)]).powi(2);
            }
            if r2 < 1e-20 {
                return Err(Error::DuplicateSites(i, j));
            }
        }
    }

    let k = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let mut r2 = 0.0;
            for t in 0..d {
                r2 += (knots[(i, t)] - knots[(j, t)]).powi(2);
            }
            kernel(d, r2)
        }
    });
    let p = DMatrix::from_fn(n, m, |i, j| if j == 0 { 1.0 } else { knots[(i, j - 1)] });

    let qr = householder_qr(&p);
    for j in 0..m {
        if qr.r[(j, j)].abs() < 1e-10 {
            return Err(Error::RankDeficient(format!(
                "polynomial block pivot {j} below threshold (collinear sites)"
            )));
        }
    }

    let n2 = n - m;
    let mut q2 = DMatrix::zeros(n, n2);
    for c in 0..n2 {
        q2.set_column(c, &qr.q_times_unit(n, m + c));
    }
    let y = DVector::from_column_slice(values);
    let b = q2.transpose() * &k * &q2;
    let g = q2.transpose() * &y;

    // B is PSD on the polynomial-orthogonal subspace; symmetrize and clamp
    // roundoff negatives.
    let b = (&b + b.transpose()) * 0.5;
    let eig = b.symmetric_eigen();
    let eig_max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let evals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| v.max(eig_max * 1e-14).max(1e-300))
        .collect();
    let vt_g = eig.eigenvectors.transpose() * &g;

    let gamma_for = |lambda: f64| -> DVector<f64> {
        let coeffs = DVector::from_fn(n2, |i, _| vt_g[i] / (evals[i] + lambda));
        &eig.eigenvectors * coeffs
    };

    let lambda = match smoothing {
        Smoothing::Fixed(l) => l,
        Smoothing::Auto => {
            // GCV(lambda) = N sum(v_i^2/(l_i+lambda)^2) / (sum 1/(l_i+lambda))^2
            let scale0 = (evals.iter().sum::<f64>() / n2 as f64).max(1e-300);
            let mut best = (f64::INFINITY, 0.0);
            for k10 in -100..=40 {
                let lambda = scale0 * 10f64.powf(k10 as f64 / 10.0);
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..n2 {
                    let inv = 1.0 / (evals[i] + lambda);
                    num += (vt_g[i] * inv) * (vt_g[i] * inv);
                    den += inv;
                }
                let gcv = n as f64 * num / (den * den);
                if gcv < best.0 {
                    best = (gcv, lambda);
                }
            }
            best.1
        }
    };

    let gamma = gamma_for(lambda);
    let weights = &q2 * gamma;
    // Back-substitute the affine part: R c = Q1^T (y - (K + lambda I) w).
    let resid = &y - &k * &weights - &weights * lambda;
    let rhs = qr.qt_head(&resid);
    let poly = qr
        .r
        .clone()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::RankDeficient("polynomial back-substitution failed".into()))?;

    Ok(TpsSurface {
        dim: d,
        knots,
        weights,
        poly,
        lambda,
        shift,
        scale,
        bbox_lo,
        bbox_hi,
        values: values.to_vec(),
    })
}

impl TpsSurface {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.knots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.nrows() == 0
    }

    pub fn training_values(&self) -> &[f64] {
        &self.values
    }

    /// Knot coordinates in the original (unstandardized) space.
    pub fn site(&self, i: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|j| self.knots[(i, j)] * self.scale[j] + self.shift[j])
            .collect()
    }

    /// Bounding box of the training sites.
    pub fn bbox(&self) -> (&[f64], &[f64]) {
        (&self.bbox_lo, &self.bbox_hi)
    }

    pub fn kernel_weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Side-condition residuals (sum of weights, then per-coordinate
    /// weighted moments); all should vanish.
    pub fn orthogonality_residuals(&self) -> Vec<f64> {
        let n = self.knots.nrows();
        let mut out = vec![0.0; self.dim + 1];
        for i in 0..n {
            out[0] += self.weights[i];
            for j in 0..self.dim {
                out[j + 1] += self.weights[i] * self.knots[(i, j)];
            }
        }
        out
    }
}

/// Surface value at `x`.
pub fn eval_tps(surface: &TpsSurface, x: &[f64]) -> f64 {
    eval_tps_flagged(surface, x).value
}

/// Surface value plus the extrapolation flag.
pub fn eval_tps_flagged(surface: &TpsSurface, x: &[f64]) -> EvalOutcome {
    let d = surface.dim;
    assert_eq!(x.len(), d, "point dimension mismatch");
    let mut u = [0.0f64; 3];
    let mut extrapolated = false;
    for j in 0..d {
        u[j] = (x[j] - surface.shift[j]) / surface.scale[j];
        extrapolated |= x[j] < surface.bbox_lo[j] || x[j] > surface.bbox_hi[j];
    }
    let mut v = surface.poly[0];
    for j in 0..d {
        v += surface.poly[j + 1] * u[j];
    }
    for i in 0..surface.knots.nrows() {
        let mut r2 = 0.0;
        for j in 0..d {
            let diff = u[j] - surface.knots[(i, j)];
            r2 += diff * diff;
        }
        v += surface.weights[i] * kernel(d, r2);
    }
    EvalOutcome {
        value: v,
        extrapolated,
    }
}

/// Analytic gradient of [`eval_tps`] with respect to the original
/// (unstandardized) coordinates.
pub fn grad_tps(surface: &TpsSurface, x: &[f64]) -> Vec<f64> {
    let d = surface.dim;
    assert_eq!(x.len(), d, "point dimension mismatch");
    let mut u = [0.0f64; 3];
    for j in 0..d {
        u[j] = (x[j] - surface.shift[j]) / surface.scale[j];
    }
    let mut g = vec![0.0f64; d];
    for j in 0..d {
        g[j] = surface.poly[j + 1];
    }
    for i in 0..surface.knots.nrows() {
        let mut diff = [0.0f64; 3];
        let mut r2 = 0.0;
        for j in 0..d {
            diff[j] = u[j] - surface.knots[(i, j)];
            r2 += diff[j] * diff[j];
        }
        let f = kernel_grad_factor(d, r2) * surface.weights[i];
        for j in 0..d {
            g[j] += f * diff[j];
        }
    }
    for j in 0..d {
        g[j] /= surface.scale[j];
    }
    g
}
