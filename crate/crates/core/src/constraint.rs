//! Family-wise error rate constraint: evaluation, re-parametrization of the
//! last significance level, and generation of constraint-satisfying
//! candidate points for surface fitting.

use crate::error::{Error, Result};
use crate::model::{build_null_covariance, AlphaVector, NestedDesign};
use crate::mvn::mvn_cdf;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// CDF tolerance used for constraint solving.
pub const FWER_CDF_TOL: f64 = 1e-8;

/// Bisection tolerance on the solved alpha_n.
pub const ALPHA_N_TOL: f64 = 1e-9;

/// Band around zero inside which the constraint is considered met at the
/// interval endpoints (covers CDF tolerance plus bisection slack).
const FEAS_TOL: f64 = 5e-8;

/// Family-wise error rate `1 - Phi_Sigma(z_1, ..., z_n)` of the design at
/// the given significance levels.
pub fn fwer(design: &NestedDesign, alpha: &AlphaVector) -> Result<f64> {
    if alpha.len() != design.n() {
        return Err(Error::InvalidInput {
            what: "AlphaVector",
            why: format!("length {} != design populations {}", alpha.len(), design.n()),
        });
    }
    let null = build_null_covariance(design)?;
    let p = mvn_cdf(alpha.thresholds(), &null, FWER_CDF_TOL)?;
    Ok(1.0 - p)
}

/// Solves the unique `alpha_n` in `[0, alpha0]` with
/// `fwer(partial..., alpha_n) = alpha0`, or `None` when no such value
/// exists (the partial levels alone already exceed the budget, or the full
/// budget cannot be reached).
pub fn solve_alpha_n(design: &NestedDesign, partial: &[f64]) -> Result<Option<f64>> {
    let n = design.n();
    let a0 = design.alpha0();
    if partial.len() + 1 != n {
        return Err(Error::InvalidInput {
            what: "solve_alpha_n",
            why: format!("partial length {} != n-1 = {}", partial.len(), n - 1),
        });
    }
    for &a in partial {
        if !(0.0..=a0).contains(&a) {
            return Err(Error::InvalidInput {
                what: "solve_alpha_n",
                why: format!("partial alpha {a} outside [0, {a0}]"),
            });
        }
    }
    if n == 1 {
        // A single test uses the full budget exactly.
        return Ok(Some(a0));
    }

    let eval = |an: f64| -> Result<f64> {
        let mut alphas = partial.to_vec();
        alphas.push(an);
        let a = AlphaVector::new(alphas, a0)?;
        Ok(fwer(design, &a)? - a0)
    };

    let f_lo = eval(0.0)?;
    if f_lo > FEAS_TOL {
        return Ok(None);
    }
    if f_lo >= 0.0 {
        return Ok(Some(0.0));
    }
    let f_hi = eval(a0)?;
    if f_hi < -FEAS_TOL {
        return Ok(None);
    }
    if f_hi <= 0.0 {
        return Ok(Some(a0));
    }

    let mut lo = 0.0f64;
    let mut hi = a0;
    while hi - lo > ALPHA_N_TOL {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// A set of constraint-satisfying significance-level vectors sampled from a
/// spanning grid.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub points: Vec<AlphaVector>,
    pub n3: usize,
    pub grid_m: usize,
    pub seed: u64,
}

/// Spans `grid_m^(n-1)` points of the open box `(0, alpha0)^(n-1)`
/// (half-step offset from the boundaries), solves `alpha_n` for each,
/// discards infeasible points, and draws `n3` of the valid ones uniformly
/// without replacement.
pub fn generate_candidates(
    design: &NestedDesign,
    n3: usize,
    grid_m: usize,
    seed: u64,
) -> Result<CandidateSet> {
    if n3 < 1 {
        return Err(Error::InvalidInput {
            what: "generate_candidates",
            why: "n3 must be >= 1".into(),
        });
    }
    if grid_m < 2 {
        return Err(Error::InvalidInput {
            what: "generate_candidates",
            why: format!("grid_m must be >= 2, got {grid_m}"),
        });
    }
    let n = design.n();
    let a0 = design.alpha0();

    if n == 1 {
        if n3 > 1 {
            return Err(Error::InsufficientValidPoints {
                valid: 1,
                requested: n3,
            });
        }
        return Ok(CandidateSet {
            points: vec![AlphaVector::new(vec![a0], a0)?],
            n3,
            grid_m,
            seed,
        });
    }

    let d = n - 1;
    let total = grid_m.checked_pow(d as u32).ok_or(Error::InvalidInput {
        what: "generate_candidates",
        why: "grid too large".into(),
    })?;

    let valid: Vec<AlphaVector> = (0..total)
        .into_par_iter()
        .map(|flat| -> Result<Option<AlphaVector>> {
            let mut rem = flat;
            let mut partial = vec![0.0f64; d];
            for p in partial.iter_mut().rev() {
                *p = a0 * ((rem % grid_m) as f64 + 0.5) / grid_m as f64;
                rem /= grid_m;
            }
            match solve_alpha_n(design, &partial)? {
                Some(an) => {
                    let mut alphas = partial;
                    alphas.push(an);
                    Ok(Some(AlphaVector::new(alphas, a0)?))
                }
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    if valid.len() < n3 {
        return Err(Error::InsufficientValidPoints {
            valid: valid.len(),
            requested: n3,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, valid.len(), n3).into_vec();
    chosen.sort_unstable();
    let points = chosen.into_iter().map(|i| valid[i].clone()).collect();
    Ok(CandidateSet {
        points,
        n3,
        grid_m,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvn::{cholesky, sample_mvn};
    use crate::normal;
    use rand::Rng;

    fn design(r: Vec<f64>) -> NestedDesign {
        NestedDesign::new(r, 211.0, 0.025).unwrap()
    }

    #[test]
    fn fwer_univariate_identity() {
        let d = design(vec![1.0]);
        let a = AlphaVector::new(vec![0.025], 0.025).unwrap();
        let f = fwer(&d, &a).unwrap();
        assert!((f - 0.025).abs() < 1e-9);
    }

    #[test]
    fn fwer_perfect_correlation_limit() {
        let d = design(vec![1.0, 1.0 - 1e-6]);
        let a = AlphaVector::new(vec![0.025, 0.025], 0.025).unwrap();
        let f = fwer(&d, &a).unwrap();
        assert!((f - 0.025).abs() < 1e-4, "coincident tests fwer {f}");
    }

    #[test]
    fn fwer_two_tests_against_sampling_oracle() {
        let d = design(vec![1.0, 0.5]);
        let a = AlphaVector::new(vec![0.0125, 0.0125], 0.025).unwrap();
        let f = fwer(&d, &a).unwrap();
        assert!(f > 0.0125 && f < 0.025);

        let corr = build_null_covariance(&d).unwrap();
        let factor = cholesky(&corr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000_000usize;
        let s = sample_mvn(&[0.0, 0.0], &factor, n, &mut rng);
        let z = a.thresholds();
        let rejected = (0..n)
            .filter(|&i| s[(i, 0)] > z[0] || s[(i, 1)] > z[1])
            .count();
        let est = rejected as f64 / n as f64;
        let band = 3.0 * (est * (1.0 - est) / n as f64).sqrt();
        assert!((f - est).abs() < band, "fwer {f} vs oracle {est} +- {band}");
    }

    #[test]
    fn fwer_strictly_increasing() {
        let d = design(vec![1.0, 0.6, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.001..0.02)).collect();
            let a = AlphaVector::new(base.clone(), 0.025).unwrap();
            let f0 = fwer(&d, &a).unwrap();
            for i in 0..3 {
                let mut up = base.clone();
                up[i] += 0.002;
                let a1 = AlphaVector::new(up, 0.025).unwrap();
                let f1 = fwer(&d, &a1).unwrap();
                assert!(f1 > f0 + 1e-6, "fwer not increasing in alpha[{i}]");
            }
        }
    }

    #[test]
    fn solve_single_population() {
        let d = design(vec![1.0]);
        assert_eq!(solve_alpha_n(&d, &[]).unwrap(), Some(0.025));
    }

    #[test]
    fn solve_full_budget_on_first_test() {
        let d = design(vec![1.0, 0.5]);
        // fwer((0.025, 0)) = 0.025 exactly, so the solved alpha_2 is 0.
        let an = solve_alpha_n(&d, &[0.025]).unwrap();
        assert_eq!(an, Some(0.0));
    }

    #[test]
    fn solve_reaches_budget_and_matches_oracle_root() {
        let d = design(vec![1.0, 0.5]);
        let an = solve_alpha_n(&d, &[0.02]).unwrap().expect("feasible");
        let a = AlphaVector::new(vec![0.02, an], 0.025).unwrap();
        let f = fwer(&d, &a).unwrap();
        assert!((f - 0.025).abs() < 1e-8, "fwer at solved point {f}");

        // Sampling-oracle root: bisect the empirical FWER on a fixed large
        // sample; agreement is limited by the oracle's own noise.
        let corr = build_null_covariance(&d).unwrap();
        let factor = cholesky(&corr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000_000usize;
        let s = sample_mvn(&[0.0, 0.0], &factor, n, &mut rng);
        let z1 = normal::quantile(1.0 - 0.02);
        let oracle_fwer = |an: f64| {
            let z2 = normal::quantile(1.0 - an);
            let rejected = (0..n)
                .filter(|&i| s[(i, 0)] > z1 || s[(i, 1)] > z2)
                .count();
            rejected as f64 / n as f64
        };
        let (mut lo, mut hi) = (0.0f64, 0.025f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if oracle_fwer(mid) <= 0.025 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle_root = 0.5 * (lo + hi);
        // d(fwer)/d(alpha_2) <= 1, oracle noise ~5e-5 => alpha band ~2e-4.
        assert!(
            (an - oracle_root).abs() < 5e-4,
            "solved {an} vs oracle root {oracle_root}"
        );
    }

    #[test]
    fn correlated_tests_allow_alpha_sum_above_budget() {
        let d = design(vec![1.0, 0.5, 0.25]);
        let partial = [0.025 * 0.9 / 2.0, 0.025 * 0.9 / 2.0];
        let an = solve_alpha_n(&d, &partial).unwrap().expect("feasible");
        let total = partial.iter().sum::<f64>() + an;
        assert!(
            total > 0.025,
            "nested correlation should allow sum {total} > 0.025"
        );
    }

    #[test]
    fn round_trip_drop_and_resolve() {
        let d = design(vec![1.0, 0.5, 0.25]);
        let set = generate_candidates(&d, 40, 12, 9).unwrap();
        for point in &set.points {
            let partial = &point.alphas()[..2];
            let re = solve_alpha_n(&d, partial).unwrap().expect("still feasible");
            assert!(
                (re - point.alphas()[2]).abs() <= 1e-8,
                "round trip {} vs {re}",
                point.alphas()[2]
            );
        }
    }

    #[test]
    fn candidates_single_population() {
        let d = design(vec![1.0]);
        let set = generate_candidates(&d, 1, 50, 1).unwrap();
        assert_eq!(set.points.len(), 1);
        assert_eq!(set.points[0].alphas(), &[0.025]);
    }

    #[test]
    fn candidates_all_satisfy_constraint() {
        let d = design(vec![1.0, 0.5, 0.25]);
        let set = generate_candidates(&d, 60, 15, 4).unwrap();
        assert_eq!(set.points.len(), 60);
        for p in &set.points {
            let f = fwer(&d, p).unwrap();
            assert!(
                (f - 0.025).abs() <= 1e-7,
                "candidate fwer {f} violates validity"
            );
        }
    }

    #[test]
    fn candidates_insufficient_points_error() {
        let d = design(vec![1.0, 0.5]);
        match generate_candidates(&d, 1_000_000, 20, 0) {
            Err(Error::InsufficientValidPoints { valid, requested }) => {
                assert!(valid < requested);
            }
            other => panic!("expected insufficiency, got {other:?}"),
        }
    }

    #[test]
    fn candidates_deterministic() {
        let d = design(vec![1.0, 0.6, 0.2]);
        let a = generate_candidates(&d, 25, 10, 123).unwrap();
        let b = generate_candidates(&d, 25, 10, 123).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.alphas(), y.alphas());
        }
    }
}
