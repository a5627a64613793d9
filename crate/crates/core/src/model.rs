//! Trial-design domain types and the deterministic formulas that build
//! distribution parameters from them.

use crate::error::{Error, Result};
use crate::normal;
use nalgebra::DMatrix;

/// Largest supported number of nested populations.
pub const MAX_POPULATIONS: usize = 8;

/// Guard on adjacent subpopulation ratios; ratios above `1 - RATIO_GUARD`
/// make the Z-statistic covariance numerically singular.
pub const RATIO_GUARD: f64 = 1e-6;

/// Fixed trial geometry: nested subpopulation fractions, information units
/// and the family-wise error budget.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedDesign {
    r: Vec<f64>,
    i3: f64,
    alpha0: f64,
}

impl NestedDesign {
    pub fn new(r: Vec<f64>, i3: f64, alpha0: f64) -> Result<Self> {
        let invalid = |why: String| Error::InvalidInput {
            what: "NestedDesign",
            why,
        };
        if r.is_empty() {
            return Err(invalid("population fractions must be non-empty".into()));
        }
        if r.len() > MAX_POPULATIONS {
            return Err(invalid(format!(
                "at most {MAX_POPULATIONS} nested populations supported, got {}",
                r.len()
            )));
        }
        if r[0] != 1.0 {
            return Err(invalid(format!("r[0] must be exactly 1, got {}", r[0])));
        }
        for w in r.windows(2) {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(invalid(format!(
                    "fractions must be strictly decreasing and positive, got {} then {}",
                    w[0], w[1]
                )));
            }
            if w[1] / w[0] > 1.0 - RATIO_GUARD {
                return Err(invalid(format!(
                    "adjacent ratio {}/{} exceeds 1 - {RATIO_GUARD:e}",
                    w[1], w[0]
                )));
            }
        }
        if !(i3 > 0.0 && i3.is_finite()) {
            return Err(invalid(format!("information units must be positive, got {i3}")));
        }
        if !(alpha0 > 0.0 && alpha0 < 1.0) {
            return Err(invalid(format!("FWER budget must be in (0,1), got {alpha0}")));
        }
        Ok(Self { r, i3, alpha0 })
    }

    /// Number of nested populations (entire population included).
    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.r
    }

    pub fn information_units(&self) -> f64 {
        self.i3
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    /// Per-population noncentrality scales `sqrt(r_i * I3)`.
    pub fn mean_scales(&self) -> Vec<f64> {
        self.r.iter().map(|&ri| (ri * self.i3).sqrt()).collect()
    }

    /// Design restricted to the first `k` populations (used when the sweep
    /// drops boundary subpopulations).
    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(self.r[..k].to_vec(), self.i3, self.alpha0)
    }
}

/// Type-I/type-II rates and the assumed hazard reduction used to size the
/// trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizingParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl SizingParams {
    pub fn new(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let ok = |x: f64| x > 0.0 && x < 1.0;
        if !(ok(alpha) && ok(beta) && ok(delta)) {
            return Err(Error::InvalidInput {
                what: "SizingParams",
                why: format!("alpha={alpha}, beta={beta}, delta={delta} must all lie in (0,1)"),
            });
        }
        Ok(Self { alpha, beta, delta })
    }
}

/// Information units implied by the sizing parameters:
/// `(z_{1-alpha} + z_{1-beta})^2 / ln(1-delta)^2`.
///
/// The exact value is returned; round for reporting.
pub fn information_units(p: &SizingParams) -> f64 {
    let z = normal::quantile(1.0 - p.alpha) + normal::quantile(1.0 - p.beta);
    let l = (1.0 - p.delta).ln();
    z * z / (l * l)
}

/// Effect-size law across subpopulations: the point estimate of hazard
/// reduction as an affine function of the subpopulation fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    intercept: f64,
    slope: f64,
}

impl Scenario {
    /// Constant hazard reduction across all populations.
    pub fn constant(delta0: f64) -> Result<Self> {
        Self::linear(delta0, 0.0)
    }

    /// Hazard reduction `intercept + slope * r`.
    pub fn linear(intercept: f64, slope: f64) -> Result<Self> {
        let s = Self { intercept, slope };
        // All r in (0, 1] must yield a valid hazard reduction; the affine
        // law makes the endpoints sufficient.
        for v in [s.delta0(0.0), s.delta0(1.0)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidInput {
                    what: "Scenario",
                    why: format!(
                        "law {intercept} + {slope}*r leaves (0,1): value {v} on r in (0,1]"
                    ),
                });
            }
        }
        Ok(s)
    }

    pub fn delta0(&self, r: f64) -> f64 {
        self.intercept + self.slope * r
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }
}

/// Multivariate normal prior over per-population hazard reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectPrior {
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-population significance levels with derived normal-quantile
/// thresholds. `alpha[i] = 0` maps to `z[i] = +inf`: test i never rejects.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    alpha: Vec<f64>,
    z: Vec<f64>,
}

impl AlphaVector {
    pub fn new(alpha: Vec<f64>, alpha0: f64) -> Result<Self> {
        for &a in &alpha {
            if !(0.0..=alpha0).contains(&a) || !a.is_finite() {
                return Err(Error::InvalidInput {
                    what: "AlphaVector",
                    why: format!("alpha {a} outside [0, {alpha0}]"),
                });
            }
        }
        let z = alpha.iter().map(|&a| normal::quantile(1.0 - a)).collect();
        Ok(Self { alpha, z })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Correlation matrix of the Z-statistics under either hypothesis:
/// `sigma[k][l] = sqrt(r_l / r_k)` for k < l, ones on the diagonal.
pub fn build_null_covariance(design: &NestedDesign) -> Result<DMatrix<f64>> {
    let r = design.fractions();
    let n = r.len();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = 1.0;
        for l in (k + 1)..n {
            let v = (r[l] / r[k]).sqrt();
            m[(k, l)] = v;
            m[(l, k)] = v;
        }
    }
    // Fail fast while the caller still knows which design produced it.
    crate::mvn::cholesky(&m).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot } => Error::SingularCovariance(format!(
            "null covariance pivot {pivot} not positive for r={:?}",
            r
        )),
        other => other,
    })?;
    Ok(m)
}

/// Mean vector of the Z-statistics under the alternative:
/// `mean[i] = sqrt(r_i * I3) * delta[i]`.
pub fn build_alternative_mean(design: &NestedDesign, delta: &[f64]) -> Vec<f64> {
    assert_eq!(delta.len(), design.n(), "delta length must match design");
    design
        .mean_scales()
        .iter()
        .zip(delta)
        .map(|(s, d)| s * d)
        .collect()
}

/// Effect-size prior implied by a scenario:
/// `theta_i = -ln(1 - delta0_i)`, `sigma_i = 1/sqrt(20 r_i)`, covariance
/// scaled by the null correlation structure.
pub fn build_prior(design: &NestedDesign, scenario: &Scenario) -> Result<EffectPrior> {
    let r = design.fractions();
    let n = r.len();
    let mut theta = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for &ri in r {
        let d0 = scenario.delta0(ri);
        if !(d0 > 0.0 && d0 < 1.0) {
            return Err(Error::HazardOutOfRange { value: d0, r: ri });
        }
        theta.push(-(1.0 - d0).ln());
        sigma.push(1.0 / (80.0 * ri / 4.0).sqrt());
    }
    let corr = build_null_covariance(design)?;
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            cov[(k, l)] = corr[(k, l)] * sigma[k] * sigma[l];
        }
    }
    crate::mvn::cholesky(&cov).map_err(|_| {
        Error::SingularCovariance("effect prior covariance is not positive definite".into())
    })?;
    Ok(EffectPrior { theta, sigma, cov })
}
