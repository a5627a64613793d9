//! Outer loop over subpopulation sizes: optimize alpha at every lattice
//! point, smooth optimal power over r-space, select the optimal design, and
//! compute the method-comparison statistics.

use crate::error::{Error, Result};
use crate::model::{
    build_prior, information_units, AlphaVector, EffectPrior, NestedDesign, Scenario,
    SizingParams,
};
use crate::optimizer::{
    maximize_bounded, optimize_alpha, optimize_alpha_gridsum, BoxBounds, Seeds,
};
use crate::power::{power_fine_grid, EstimatorKind, GridConfig, McConfig};
use crate::tps::{eval_tps, fit_tps, grad_tps, Smoothing, TpsSurface};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::time::Instant;

/// Lattice of strictly decreasing subpopulation-fraction tuples
/// (r_2, ..., r_n), each entry a multiple of `step` inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RGrid {
    pub step: f64,
    pub pairs: Vec<Vec<f64>>,
}

impl RGrid {
    pub fn new(n: usize, step: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput {
                what: "RGrid",
                why: "the sweep needs at least one subpopulation (n >= 2)".into(),
            });
        }
        if !(step > 0.0 && step < 1.0) {
            return Err(Error::InvalidInput {
                what: "RGrid",
                why: format!("step must lie in (0,1), got {step}"),
            });
        }
        let levels: Vec<f64> = (1..)
            .map(|k| k as f64 * step)
            .take_while(|v| *v < 1.0 - 1e-12)
            .collect();
        let d = n - 1;
        let mut pairs = Vec::new();
        // Enumerate strictly decreasing d-tuples over the level set.
        fn rec(levels: &[f64], d: usize, start: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
            if cur.len() == d {
                out.push(cur.clone());
                return;
            }
            for i in start..levels.len() {
                cur.push(levels[levels.len() - 1 - i]);
                rec(levels, d, i + 1, cur, out);
                cur.pop();
            }
        }
        let mut cur = Vec::with_capacity(d);
        rec(&levels, d, 0, &mut cur, &mut pairs);
        Ok(Self { step, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-lattice-point record of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub r: Vec<f64>,
    pub alpha: AlphaVector,
    pub power: f64,
    pub method: EstimatorKind,
    pub seconds: f64,
}

/// Full sweep outcome, including the smoothed power-over-r surface and the
/// selected design.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub surface: TpsSurface,
    pub r_opt: Vec<f64>,
    /// Per coordinate of `r_opt`: clamped at the lattice lower edge.
    pub boundary_low: Vec<bool>,
    /// Number of trailing subpopulations dropped at the optimum (boundary
    /// fractions are read as "drop that subpopulation" rather than
    /// extrapolating the singular r -> 0 limit).
    pub dropped: usize,
    /// Optimal significance levels for the surviving populations at r_opt.
    pub alpha_at_r_opt: AlphaVector,
    pub power_at_r_opt: f64,
}

/// Inputs shared by every lattice point of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepSpec {
    pub alpha0: f64,
    /// Type-I rate used to size the trial (two-sided convention).
    pub sizing_alpha: f64,
    /// Type-II rate used to size the trial.
    pub sizing_beta: f64,
    /// Explicit information units; when None they are derived from the
    /// scenario's entire-population hazard reduction and rounded, matching
    /// the reported sizing convention.
    pub i3: Option<f64>,
    pub n3: usize,
    pub grid_m: usize,
    pub mc: McConfig,
    pub master_seed: u64,
}

impl SweepSpec {
    pub fn resolve_i3(&self, scenario: &Scenario) -> Result<f64> {
        if let Some(i3) = self.i3 {
            return Ok(i3);
        }
        let sizing = SizingParams::new(self.sizing_alpha, self.sizing_beta, scenario.delta0(1.0))?;
        Ok(information_units(&sizing).round())
    }
}

fn seeds_for_point(master: u64, index: usize) -> (u64, Seeds) {
    crate::optimizer::pipeline_seed(master, index)
}

/// Runs `optimize_alpha` at every lattice point, fits the power-over-r
/// surface, and re-optimizes the design at the surface argmax (dropping
/// subpopulations whose optimal fraction sits on the lattice's lower edge).
pub fn sweep(spec: &SweepSpec, scenario: &Scenario, rgrid: &RGrid) -> Result<SweepResult> {
    let i3 = spec.resolve_i3(scenario)?;
    let total = rgrid.pairs.len();
    if total == 0 {
        return Err(Error::InvalidInput {
            what: "sweep",
            why: "empty r-grid".into(),
        });
    }

    let outcomes: Vec<(usize, std::result::Result<SweepRow, Error>)> = rgrid
        .pairs
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| {
            let run = || -> Result<SweepRow> {
                let started = Instant::now();
                let mut r = vec![1.0];
                r.extend_from_slice(pair);
                let design = NestedDesign::new(r.clone(), i3, spec.alpha0)?;
                let prior = build_prior(&design, scenario)?;
                let (mc_seed, seeds) = seeds_for_point(spec.master_seed, idx);
                let mc = McConfig::new(spec.mc.n1, spec.mc.n2, mc_seed)?;
                let res = optimize_alpha(&design, &prior, spec.n3, spec.grid_m, mc, seeds)?;
                Ok(SweepRow {
                    r: pair.clone(),
                    alpha: res.alpha,
                    power: res.power.value,
                    method: EstimatorKind::MonteCarlo,
                    seconds: started.elapsed().as_secs_f64(),
                })
            };
            (idx, run())
        })
        .collect();

    let mut rows = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (idx, out) in outcomes {
        match out {
            Ok(row) => rows.push((idx, row)),
            Err(e) => failures.push((idx, e)),
        }
    }
    if failures.len() * 20 > total {
        return Err(Error::SweepFailed {
            failed: failures.len(),
            total,
            first: failures[0].1.to_string(),
        });
    }
    rows.sort_by_key(|(idx, _)| *idx);
    let rows: Vec<SweepRow> = rows.into_iter().map(|(_, r)| r).collect();

    // Smooth optimal power over r-space and maximize.
    let d = rows[0].r.len();
    let sites = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].r[j]);
    let values: Vec<f64> = rows.iter().map(|r| r.power).collect();
    let surface = fit_tps(&sites, &values, Smoothing::Auto)?;
    let (lo, hi) = surface.bbox();
    let bounds = BoxBounds::new(lo.to_vec(), hi.to_vec())?;
    let best_row = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let opt = maximize_bounded(
        |x| Ok((eval_tps(&surface, x), grad_tps(&surface, x))),
        &bounds,
        &rows[best_row].r,
    )?;
    let r_opt = opt.x_opt.clone();
    let boundary_low: Vec<bool> = r_opt
        .iter()
        .zip(lo)
        .map(|(v, l)| *v <= l + 1e-9)
        .collect();

    // Drop trailing subpopulations clamped at the lower edge.
    let mut dropped = 0;
    for flag in boundary_low.iter().rev() {
        if *flag {
            dropped += 1;
        } else {
            break;
        }
    }
    let kept = d - dropped;
    let mut r_final = vec![1.0];
    r_final.extend_from_slice(&r_opt[..kept]);
    let design = NestedDesign::new(r_final, i3, spec.alpha0)?;
    let prior = build_prior(&design, scenario)?;
    let (mc_seed, seeds) = seeds_for_point(spec.master_seed, total + 1);
    let mc = McConfig::new(spec.mc.n1, spec.mc.n2, mc_seed)?;
    // A reduced design has fewer spanning-grid points than the full one;
    // never request more candidates than the grid can hold.
    let n3 = if design.n() > 1 {
        spec.n3
            .min(spec.grid_m.saturating_pow(design.n() as u32 - 1))
    } else {
        1
    };
    let res = optimize_alpha(&design, &prior, n3, spec.grid_m, mc, seeds)?;

    Ok(SweepResult {
        rows,
        surface,
        r_opt,
        boundary_low,
        dropped,
        alpha_at_r_opt: res.alpha,
        power_at_r_opt: res.power.value,
    })
}

/// Relative difference `R = (a_std - a_novel) / ((a_std + a_novel)/2)`,
/// zero when both levels vanish.
pub fn relative_difference(a_std: f64, a_novel: f64) -> f64 {
    let mean = 0.5 * (a_std + a_novel);
    if mean == 0.0 {
        0.0
    } else {
        (a_std - a_novel) / mean
    }
}

/// Precision difference `Q = |P_s - P_f(std)| - |P_n - P_f(novel)|`; the
/// gold standard is evaluated at each method's own optimum.
pub fn precision_difference(p_s: f64, p_n: f64, p_f_std: f64, p_f_novel: f64) -> f64 {
    (p_s - p_f_std).abs() - (p_n - p_f_novel).abs()
}

/// Per-problem comparison of the two optimizers against the fine-grid gold
/// standard.
#[derive(Debug, Clone)]
pub struct ComparisonStats {
    pub r: Vec<f64>,
    pub alpha_std: AlphaVector,
    pub alpha_novel: AlphaVector,
    /// Relative difference per significance level, in [-2, 2].
    pub r_rel: Vec<f64>,
    pub q: f64,
    pub p_s: f64,
    pub p_n: f64,
    pub p_f_std: f64,
    pub p_f_novel: f64,
    pub seconds_std: f64,
    pub seconds_novel: f64,
}

/// Runs the novel and grid-sum optimizers on each problem and scores both
/// against the fine grid at their own optima.
pub fn compare_methods(
    problems: &[(NestedDesign, EffectPrior)],
    mc: McConfig,
    grid: &GridConfig,
    n3: usize,
    grid_m: usize,
    master_seed: u64,
) -> Result<Vec<ComparisonStats>> {
    problems
        .iter()
        .enumerate()
        .map(|(idx, (design, prior))| {
            let (mc_seed, seeds) = seeds_for_point(master_seed, idx);
            let mc_cfg = McConfig::new(mc.n1, mc.n2, mc_seed)?;

            let t0 = Instant::now();
            let novel = optimize_alpha(design, prior, n3, grid_m, mc_cfg, seeds)?;
            let seconds_novel = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            let std_res = optimize_alpha_gridsum(design, prior, grid)?;
            let seconds_std = t1.elapsed().as_secs_f64();

            let p_f_novel = power_fine_grid(design, prior, &novel.alpha)?.value;
            let p_f_std = power_fine_grid(design, prior, &std_res.alpha)?.value;

            let r_rel: Vec<f64> = std_res
                .alpha
                .alphas()
                .iter()
                .zip(novel.alpha.alphas())
                .map(|(s, n)| relative_difference(*s, *n))
                .collect();
            let q = precision_difference(
                std_res.power.value,
                novel.power.value,
                p_f_std,
                p_f_novel,
            );

            Ok(ComparisonStats {
                r: design.fractions().to_vec(),
                alpha_std: std_res.alpha,
                alpha_novel: novel.alpha,
                r_rel,
                q,
                p_s: std_res.power.value,
                p_n: novel.power.value,
                p_f_std,
                p_f_novel,
                seconds_std,
                seconds_novel,
            })
        })
        .collect()
}

/// Convenience: the paper's three effect-size conditions.
pub fn scenario_a() -> Scenario {
    Scenario::constant(0.25).expect("valid constant law")
}

pub fn scenario_b() -> Scenario {
    Scenario::linear(0.3, -0.1).expect("valid weak-effect law")
}

pub fn scenario_c() -> Scenario {
    Scenario::linear(0.8, -0.6).expect("valid strong-effect law")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_count_matches_combinatorics() {
        // C(19, 2) strictly decreasing pairs at step 0.05.
        let g = RGrid::new(3, 0.05).unwrap();
        assert_eq!(g.len(), 171);
        // Desk-scale lattice: C(9, 2).
        let g = RGrid::new(3, 0.1).unwrap();
        assert_eq!(g.len(), 36);
        // One subpopulation: 19 singletons.
        let g = RGrid::new(2, 0.05).unwrap();
        assert_eq!(g.len(), 19);
    }

    #[test]
    fn lattice_tuples_strictly_decreasing() {
        let g = RGrid::new(4, 0.2).unwrap();
        for t in &g.pairs {
            assert_eq!(t.len(), 3);
            for w in t.windows(2) {
                assert!(w[0] > w[1]);
            }
            for v in t {
                assert!(*v > 0.0 && *v < 1.0);
                let k = v / 0.2;
                assert!((k - k.round()).abs() < 1e-9, "{v} is not a step multiple");
            }
        }
        // C(4,3) = 4 decreasing triples over {0.2, 0.4, 0.6, 0.8}.
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn relative_difference_identities() {
        assert_eq!(relative_difference(0.0, 0.0), 0.0);
        assert_eq!(relative_difference(0.01, 0.01), 0.0);
        assert!((relative_difference(0.011, 0.009) - 0.2).abs() < 1e-12);
        // Bounded by construction in [-2, 2] for nonnegative levels.
        assert!((relative_difference(0.02, 0.0) - 2.0).abs() < 1e-12);
        assert!((relative_difference(0.0, 0.02) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn precision_difference_identity() {
        assert_eq!(precision_difference(0.7, 0.7, 0.7, 0.7), 0.0);
        assert!(precision_difference(0.71, 0.701, 0.7, 0.7) > 0.0);
    }

    #[test]
    fn sweep_spec_derives_rounded_i3() {
        let spec = SweepSpec {
            alpha0: 0.025,
            sizing_alpha: 0.025,
            sizing_beta: 0.1,
            i3: None,
            n3: 10,
            grid_m: 10,
            mc: McConfig::new(64, 64, 0).unwrap(),
            master_seed: 0,
        };
        assert_eq!(spec.resolve_i3(&scenario_a()).unwrap(), 127.0);
        assert_eq!(spec.resolve_i3(&scenario_b()).unwrap(), 211.0);
        assert_eq!(spec.resolve_i3(&scenario_c()).unwrap(), 211.0);
    }
}
