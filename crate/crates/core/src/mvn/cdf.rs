//! Deterministic multivariate normal CDF kernels.
//!
//! Dimensions two and three are computed by exact quadrature of the
//! Plackett correlation-path identities (angular parameterization keeps the
//! integrands analytic up to |rho| -> 1). Higher dimensions use the
//! separation-of-variables transform with greedy variable reordering,
//! integrated by a shifted Richtmyer lattice with a fixed scrambling seed.

use crate::error::{Error, Result};
use crate::normal::{cdf, pdf, quantile};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Gauss-Legendre points and weights, N = 12 (half, symmetric).
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, 0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, 0.904_117_256_370_475),
    (0.160_078_328_543_346_4, 0.769_902_674_194_305),
    (0.203_167_426_723_065_9, 0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, 0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, 0.125_233_408_511_469_2),
];

/// Gauss-Legendre points and weights, N = 20 (half, symmetric).
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, 0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, 0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, 0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, 0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, 0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, 0.636_053_680_726_515),
    (0.131_688_638_449_176_6, 0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, 0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, 0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, 0.076_526_521_133_497_33),
];

fn gl_sum(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, rule: &[(f64, f64)]) -> f64 {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let mut s = 0.0;
    for &(w, x) in rule {
        s += w * (f(c - h * x) + f(c + h * x));
    }
    s * h
}

fn adaptive_quad(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
    let coarse = gl_sum(f, lo, hi, &GL12);
    let fine = gl_sum(f, lo, hi, &GL20);
    if (fine - coarse).abs() <= tol || depth >= 24 {
        fine
    } else {
        let mid = 0.5 * (lo + hi);
        adaptive_quad(f, lo, mid, 0.5 * tol, depth + 1)
            + adaptive_quad(f, mid, hi, 0.5 * tol, depth + 1)
    }
}

/// Bivariate normal P(X <= h, Y <= k) with correlation `rho`, via
/// `phi2(h,k) = Phi(h)Phi(k) + (1/2pi) \int_0^{asin rho} exp(-(h^2+k^2-2hk sin t)/(2 cos^2 t)) dt`.
pub(crate) fn bvn_cdf(h: f64, k: f64, rho: f64, tol: f64) -> f64 {
    if rho >= 1.0 {
        return cdf(h.min(k));
    }
    if rho <= -1.0 {
        return (cdf(h) + cdf(k) - 1.0).max(0.0);
    }
    let base = cdf(h) * cdf(k);
    if rho == 0.0 {
        return base;
    }
    let a = rho.asin();
    let f = |t: f64| {
        let s = t.sin();
        let c2 = 1.0 - s * s;
        (-(h * h + k * k - 2.0 * h * k * s) / (2.0 * c2)).exp()
    };
    // The integrand is analytic on the closed interval; fixed rules cover
    // everything but the near-singular band, where panels clustered toward
    // the endpoint resolve the boundary layer.
    let (lo, hi) = (0.0f64.min(a), 0.0f64.max(a));
    let integral = if rho.abs() <= 0.9 && tol >= 1e-10 {
        gl_sum(&f, lo, hi, &GL20) * a.signum()
    } else if rho.abs() <= 0.995 && tol >= 1e-10 {
        let cut1 = lo + 0.6 * (hi - lo);
        let cut2 = lo + 0.9 * (hi - lo);
        (gl_sum(&f, lo, cut1, &GL20)
            + gl_sum(&f, cut1, cut2, &GL20)
            + gl_sum(&f, cut2, hi, &GL20))
            * a.signum()
    } else if a > 0.0 {
        adaptive_quad(&f, 0.0, a, tol.min(1e-10), 0)
    } else {
        -adaptive_quad(&f, a, 0.0, tol.min(1e-10), 0)
    };
    (base + integral / (2.0 * PI)).clamp(0.0, 1.0)
}

/// Trivariate normal P(X_i <= b_i) with correlations
/// `rho = [rho12, rho13, rho23]`, via the Plackett identity along angular
/// correlation paths: the pair with the largest |rho| is held fixed and the
/// two remaining correlations are shrunk to zero.
pub(crate) fn tvn_cdf(b: [f64; 3], rho: [f64; 3], tol: f64) -> f64 {
    // Pair indices for rho: (0,1), (0,2), (1,2); pivot = index outside the
    // fixed (largest-|rho|) pair.
    let fixed = (0..3)
        .max_by(|&i, &j| rho[i].abs().partial_cmp(&rho[j].abs()).unwrap())
        .unwrap();
    let (p, q, s, rho_qs) = match fixed {
        0 => (2, 0, 1, rho[0]),
        1 => (1, 0, 2, rho[1]),
        _ => (0, 1, 2, rho[2]),
    };
    let rho_pq = pair_rho(&rho, p, q);
    let rho_ps = pair_rho(&rho, p, s);
    let (bp, bq, bs) = (b[p], b[q], b[s]);

    let base = cdf(bp) * bvn_cdf(bq, bs, rho_qs, 0.1 * tol);
    if rho_pq == 0.0 && rho_ps == 0.0 {
        return base;
    }

    let aq = rho_pq.clamp(-1.0, 1.0).asin();
    let asn = rho_ps.clamp(-1.0, 1.0).asin();
    let leg = |t: f64, a_act: f64, b_act: f64, s_oth: f64, b_oth: f64| -> f64 {
        // Active pair (p, act) at angle t*a_act; condition the remaining
        // variable on (X_p = bp, X_act = b_act).
        if a_act == 0.0 {
            return 0.0;
        }
        let sin_a = (t * a_act).sin();
        let c2 = (1.0 - sin_a * sin_a).max(1e-300);
        let e = (-(bp * bp + b_act * b_act - 2.0 * bp * b_act * sin_a) / (2.0 * c2)).exp();
        let det = c2;
        let w_p = (s_oth - sin_a * rho_qs) / det;
        let w_a = (rho_qs - sin_a * s_oth) / det;
        let var = (1.0 - (w_p * s_oth + w_a * rho_qs)).max(1e-14);
        let u = (b_oth - w_p * bp - w_a * b_act) / var.sqrt();
        a_act * e * cdf(u)
    };
    let integrand = |t: f64| {
        let s_pq = (t * aq).sin();
        let s_ps = (t * asn).sin();
        leg(t, aq, bq, s_ps, bs) + leg(t, asn, bs, s_pq, bq)
    };
    let path_rho = rho_pq.abs().max(rho_ps.abs());
    let integral = if path_rho <= 0.75 && tol >= 1e-7 {
        gl_sum(&integrand, 0.0, 1.0, &GL12)
    } else if path_rho <= 0.9 && tol >= 1e-10 {
        gl_sum(&integrand, 0.0, 1.0, &GL20)
    } else {
        adaptive_quad(&integrand, 0.0, 1.0, (tol * PI).min(1e-9), 0)
    };
    (base + integral / (2.0 * PI)).clamp(0.0, 1.0)
}

fn pair_rho(rho: &[f64; 3], i: usize, j: usize) -> f64 {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    match (a, b) {
        (0, 1) => rho[0],
        (0, 2) => rho[1],
        _ => rho[2],
    }
}

/// Four-variate CDF by conditioning on the most-connected variable: the
/// remaining three are trivariate normal with correlations independent of
/// the conditioning value, so one adaptive 1-D quadrature over the pivot
/// rides on the exact trivariate kernel.
pub(crate) fn qvn_cdf(b: &[f64], corr: &DMatrix<f64>, tol: f64) -> f64 {
    debug_assert_eq!(b.len(), 4);
    // Pivot: largest total absolute correlation to the others.
    let p = (0..4)
        .max_by(|&i, &j| {
            let si: f64 = (0..4).filter(|&k| k != i).map(|k| corr[(i, k)].abs()).sum();
            let sj: f64 = (0..4).filter(|&k| k != j).map(|k| corr[(j, k)].abs()).sum();
            si.partial_cmp(&sj).unwrap()
        })
        .unwrap();
    let rest: Vec<usize> = (0..4).filter(|&k| k != p).collect();
    let rho_p: Vec<f64> = rest.iter().map(|&j| corr[(j, p)]).collect();
    let s: Vec<f64> = rho_p
        .iter()
        .map(|r| (1.0 - r * r).max(1e-14).sqrt())
        .collect();
    let mut cond_rho = [0.0f64; 3];
    // Pairs (0,1), (0,2), (1,2) of the reduced index set.
    for (slot, (a, c)) in [(0usize, 1usize), (0, 2), (1, 2)].iter().enumerate() {
        let raw = corr[(rest[*a], rest[*c])] - rho_p[*a] * rho_p[*c];
        cond_rho[slot] = (raw / (s[*a] * s[*c])).clamp(-1.0, 1.0);
    }
    let bp = b[p];
    let integrand = |x: f64| {
        let bb = [
            (b[rest[0]] - rho_p[0] * x) / s[0],
            (b[rest[1]] - rho_p[1] * x) / s[1],
            (b[rest[2]] - rho_p[2] * x) / s[2],
        ];
        pdf(x) * tvn_cdf(bb, cond_rho, 0.05 * tol)
    };
    let hi = bp.min(8.5);
    if hi <= -8.5 {
        return 0.0;
    }
    // Composite panels keep the Gaussian bump resolved before refinement.
    let mut total = 0.0;
    let mut lo = -8.5f64;
    let n_panels = ((hi - lo) / 2.0).ceil().max(1.0) as usize;
    let width = (hi - lo) / n_panels as f64;
    for _ in 0..n_panels {
        let hi_k = lo + width;
        total += adaptive_quad(&integrand, lo, hi_k, 0.2 * tol / n_panels as f64, 0);
        lo = hi_k;
    }
    total.clamp(0.0, 1.0)
}

const SCRAMBLE_SEED: u64 = 0x5eed_cdf0_13d7_a11c;
const QMC_SHIFTS: usize = 10;
const QMC_START: usize = 512;
const QMC_MAX_POINTS: usize = 1 << 19;

/// Separation-of-variables CDF for dimension >= 4 (also exercised at lower
/// dimensions by tests). Deterministic: lattice shifts come from a fixed
/// scrambling seed.
pub(crate) fn qmc_cdf(b: &[f64], corr: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let n = b.len();
    let (l, bt) = reordered_cholesky(corr, b)?;
    let e1 = cdf(bt[0] / l[(0, 0)]);
    if n == 1 || e1 <= 0.0 {
        return Ok(e1);
    }
    let d = n - 1;
    // frac(sqrt(prime)) generators.
    let primes = [2.0f64, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0];
    let gen: Vec<f64> = primes[..d].iter().map(|p| p.sqrt().fract()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(SCRAMBLE_SEED);
    let shifts: Vec<Vec<f64>> = (0..QMC_SHIFTS)
        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
        .collect();

    let mut w = vec![0.0; d];
    let mut y = vec![0.0; n];
    let eval = |w: &[f64], y: &mut [f64]| -> f64 {
        let mut prod = 1.0;
        let mut e_prev = e1;
        for i in 1..n {
            let u = (w[i - 1] * e_prev).clamp(1e-320, 1.0 - 1e-16);
            y[i - 1] = quantile(u);
            let mut z = bt[i];
            for t in 0..i {
                z -= l[(i, t)] * y[t];
            }
            z /= l[(i, i)];
            let e = cdf(z);
            if e <= 0.0 {
                return 0.0;
            }
            prod *= e;
            e_prev = e;
        }
        prod
    };

    let mut n_points = QMC_START;
    loop {
        let mut means = [0.0f64; QMC_SHIFTS];
        for (s, shift) in shifts.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..n_points {
                for j in 0..d {
                    let x = ((k + 1) as f64 * gen[j] + shift[j]).fract();
                    w[j] = x;
                }
                let v1 = eval(&w, &mut y);
                for wj in w.iter_mut() {
                    *wj = 1.0 - *wj;
                }
                let v2 = eval(&w, &mut y);
                acc += 0.5 * (v1 + v2);
            }
            means[s] = acc / n_points as f64;
        }
        let mean = means.iter().sum::<f64>() / QMC_SHIFTS as f64;
        let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / (QMC_SHIFTS as f64 * (QMC_SHIFTS - 1) as f64);
        let err = 3.0 * var.sqrt();
        if err <= tol {
            return Ok((e1 * mean).clamp(0.0, 1.0));
        }
        if n_points >= QMC_MAX_POINTS {
            return Err(Error::CdfNonConvergence {
                error: err * e1,
                tol,
                points: n_points,
            });
        }
        n_points *= 2;
    }
}

/// Greedy variable reordering (smallest conditional probability first) with
/// an in-place Cholesky; `y` tracks truncated conditional expectations.
fn reordered_cholesky(corr: &DMatrix<f64>, b: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = b.len();
    let mut c = corr.clone();
    let mut bb = b.to_vec();
    let mut l = DMatrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..n {
            let mut num = bb[j];
            let mut ss = c[(j, j)];
            for t in 0..i {
                num -= l[(j, t)] * y[t];
                ss -= l[(j, t)] * l[(j, t)];
            }
            let p = if ss > 1e-14 {
                cdf(num / ss.sqrt())
            } else if num >= 0.0 {
                1.0
            } else {
                0.0
            };
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            c.swap_rows(i, best);
            c.swap_columns(i, best);
            l.swap_rows(i, best);
            bb.swap(i, best);
        }
        let mut d = c[(i, i)];
        for t in 0..i {
            d -= l[(i, t)] * l[(i, t)];
        }
        if d <= 1e-13 {
            return Err(Error::NotPositiveDefinite { pivot: i });
        }
        let lii = d.sqrt();
        l[(i, i)] = lii;
        for j in (i + 1)..n {
            let mut s = c[(j, i)];
            for t in 0..i {
                s -= l[(j, t)] * l[(i, t)];
            }
            l[(j, i)] = s / lii;
        }
        let mut zhat = bb[i];
        for t in 0..i {
            zhat -= l[(i, t)] * y[t];
        }
        zhat /= lii;
        let e = cdf(zhat);
        y[i] = if e > 1e-12 {
            -pdf(zhat) / e
        } else {
            // E[Z | Z <= z] ~ z - 1/z in the far lower tail.
            zhat - 1.0 / zhat
        };
    }
    Ok((l, bb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bvn_zero_correlation() {
        assert_abs_diff_eq!(
            bvn_cdf(0.3, -0.7, 0.0, 1e-12),
            cdf(0.3) * cdf(-0.7),
            epsilon = 1e-15
        );
    }

    #[test]
    fn bvn_orthant_formula() {
        for rho in [-0.95, -0.5, -0.1, 0.2, 0.45, 0.707107, 0.9, 0.99, 0.9999995] {
            let exact = 0.25 + (rho as f64).asin() / (2.0 * PI);
            assert_abs_diff_eq!(bvn_cdf(0.0, 0.0, rho, 1e-12), exact, epsilon = 1e-11);
        }
    }

    #[test]
    fn bvn_perfect_correlation_limits() {
        assert_abs_diff_eq!(bvn_cdf(1.0, 0.5, 1.0, 1e-12), cdf(0.5), epsilon = 1e-15);
        assert_abs_diff_eq!(
            bvn_cdf(1.0, 0.5, -1.0, 1e-12),
            cdf(1.0) + cdf(0.5) - 1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn tvn_orthant_formula() {
        // Exact trivariate orthant probability 1/8 + sum(asin)/4pi.
        let cases = [
            [0.5, 0.5, 0.5],
            [0.707107, 0.5, 0.707107],
            [0.9, 0.6, 0.65],
            [-0.3, 0.2, 0.1],
        ];
        for rho in cases {
            let exact =
                0.125 + (f64::asin(rho[0]) + f64::asin(rho[1]) + f64::asin(rho[2])) / (4.0 * PI);
            let got = tvn_cdf([0.0, 0.0, 0.0], rho, 1e-10);
            assert_abs_diff_eq!(got, exact, epsilon = 1e-9);
        }
    }

    #[test]
    fn tvn_factorizes_when_pivot_uncorrelated() {
        let b = [0.4, -0.2, 1.1];
        // rho13 = rho23 = 0: third variable independent.
        let got = tvn_cdf(b, [0.6, 0.0, 0.0], 1e-10);
        let exact = bvn_cdf(0.4, -0.2, 0.6, 1e-12) * cdf(1.1);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-10);
    }

    #[test]
    fn tvn_matches_qmc_route() {
        let cases = [
            ([0.3, -0.4, 1.2], [0.8f64.sqrt(), 0.3f64.sqrt(), (0.3f64 / 0.8).sqrt()]),
            ([1.5, 1.0, 0.2], [0.5f64.sqrt(), 0.1f64.sqrt(), (0.1f64 / 0.5).sqrt()]),
            ([-0.5, 0.9, 2.0], [0.95f64.sqrt(), 0.9f64.sqrt(), (0.9f64 / 0.95).sqrt()]),
        ];
        for (b, rho) in cases {
            let corr = DMatrix::from_row_slice(
                3,
                3,
                &[
                    1.0, rho[0], rho[1], rho[0], 1.0, rho[2], rho[1], rho[2], 1.0,
                ],
            );
            let tv = tvn_cdf(b, rho, 1e-9);
            let qm = qmc_cdf(&b, &corr, 5e-7).unwrap();
            assert!(
                (tv - qm).abs() < 2e-6,
                "tvn {tv} vs qmc {qm} for b={b:?} rho={rho:?}"
            );
        }
    }

    #[test]
    fn bvn_matches_qmc_route() {
        for (h, k, rho) in [(0.5, -0.3, 0.7), (1.2, 1.4, 0.95), (-1.0, 2.0, 0.3)] {
            let corr = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let bv = bvn_cdf(h, k, rho, 1e-10);
            let qm = qmc_cdf(&[h, k], &corr, 5e-7).unwrap();
            assert!((bv - qm).abs() < 2e-6, "bvn {bv} vs qmc {qm}");
        }
    }

    #[test]
    fn single_rule_fast_paths_match_adaptive() {
        // tol below 1e-9 forces the adaptive route, giving a same-family
        // oracle for the single-rule short cut.
        for rho in [
            -0.995f64, -0.9, -0.6, -0.2, 0.3, 0.7, 0.85, 0.9, 0.95, 0.99, 0.995,
        ] {
            for (h, k) in [
                (0.0, 0.0),
                (1.3, -0.4),
                (-2.0, 2.5),
                (3.0, 3.0),
                (0.5, 0.6),
                (2.2414, 2.2414),
            ] {
                let fast = bvn_cdf(h, k, rho, 1e-8);
                let slow = bvn_cdf(h, k, rho, 1e-13);
                assert!(
                    (fast - slow).abs() < 1e-10,
                    "bvn fast path off at rho={rho}, h={h}, k={k}: {fast} vs {slow}"
                );
            }
        }
        let rhos = [
            [0.9f64, 0.3, 0.4],
            [0.5, 0.5, 0.5],
            [-0.4, 0.2, 0.6],
            [0.88, 0.9, 0.85],
            // Nested-design shapes: sqrt(r2), sqrt(r3), sqrt(r3/r2).
            [0.707107, 0.5, 0.707107],
            [0.974679, 0.948683, 0.973329],
        ];
        for rho in rhos {
            for b0 in [-1.5f64, 0.0, 2.0] {
                let b = [b0, 0.3, -0.2];
                for tol in [1e-6f64, 1e-8] {
                    let fast = tvn_cdf(b, rho, tol);
                    let slow = tvn_cdf(b, rho, 1e-13);
                    assert!(
                        (fast - slow).abs() < 1e-8,
                        "tvn fast path off at rho={rho:?}, b={b:?}, tol={tol}: {fast} vs {slow}"
                    );
                }
            }
        }
    }

    #[test]
    fn qvn_matches_qmc_and_factorization() {
        // r = (1, 0.7, 0.4, 0.2) nested correlation.
        let r = [1.0f64, 0.7, 0.4, 0.2];
        let mut corr = DMatrix::identity(4, 4);
        for i in 0..4 {
            for j in (i + 1)..4 {
                corr[(i, j)] = (r[j] / r[i]).sqrt();
                corr[(j, i)] = corr[(i, j)];
            }
        }
        for b in [
            [0.5f64, 0.2, -0.3, 1.0],
            [2.0, 2.0, 2.0, 2.0],
            [-1.0, 0.0, 1.0, 2.5],
        ] {
            let qv = qvn_cdf(&b, &corr, 1e-9);
            // The lattice route plateaus around 1e-5 at this dimension,
            // which is why it only backs n >= 5.
            let qm = qmc_cdf(&b, &corr, 1e-5).unwrap();
            assert!(
                (qv - qm).abs() < 4e-5,
                "qvn {qv} vs qmc {qm} at b={b:?}"
            );
        }
        // Independence factorizes exactly.
        let id = DMatrix::identity(4, 4);
        let b = [0.4f64, -0.2, 1.1, 0.0];
        let qv = qvn_cdf(&b, &id, 1e-10);
        let exact: f64 = b.iter().map(|&x| cdf(x)).product();
        assert!((qv - exact).abs() < 1e-10, "{qv} vs {exact}");
    }

    #[test]
    fn qmc_deterministic() {
        let rho = [0.7, 0.5, 0.6];
        let corr = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, rho[0], rho[1], rho[0], 1.0, rho[2], rho[1], rho[2], 1.0],
        );
        let a = qmc_cdf(&[0.5, 0.2, -0.1], &corr, 1e-6).unwrap();
        let b = qmc_cdf(&[0.5, 0.2, -0.1], &corr, 1e-6).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
