//! Bound-constrained quasi-Newton maximization and the end-to-end
//! "optimal alpha for fixed r" pipelines.

mod pipeline;

pub use pipeline::{
    optimize_alpha, optimize_alpha_gridsum, pipeline_seed, AlphaOptimum, Seeds,
    SURFACE_DEVIATION_FLAG,
};

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Componentwise box constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidInput {
                what: "BoxBounds",
                why: "bound vectors must be non-empty and of equal length".into(),
            });
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l < u) {
                return Err(Error::InvalidInput {
                    what: "BoxBounds",
                    why: format!("lower {l} must be strictly below upper {u}"),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| v >= l && v <= u)
    }
}

/// Outcome of a bounded maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub x_opt: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the projected gradient at the final point.
    pub gradient_norm: f64,
}

const MEMORY: usize = 10;
const MAX_ITER: usize = 500;
const PG_TOL: f64 = 1e-8;
const REL_F_TOL: f64 = 1e-12;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

/// Limited-memory quasi-Newton maximization with gradient projection onto
/// the box. The objective returns the value and its gradient; both must be
/// finite everywhere inside the bounds.
pub fn maximize_bounded<F>(mut objective: F, bounds: &BoxBounds, x0: &[f64]) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = bounds.dim();
    if x0.len() != n {
        return Err(Error::InvalidInput {
            what: "maximize_bounded",
            why: format!("x0 has length {} but bounds have {n}", x0.len()),
        });
    }
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);

    // Internally minimize phi = -f.
    let mut eval = |pt: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, mut g) = objective(pt)?;
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            return Err(Error::NonFiniteObjective {
                value: v,
                point: pt.to_vec(),
            });
        }
        for gi in g.iter_mut() {
            *gi = -*gi;
        }
        Ok((-v, g))
    };

    let (mut phi, mut grad) = eval(&x)?;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    let eps_active = 1e-12;
    let projected = |x: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if x[i] <= bounds.lower[i] + eps_active && g[i] > 0.0 {
                    0.0
                } else if x[i] >= bounds.upper[i] - eps_active && g[i] < 0.0 {
                    0.0
                } else {
                    g[i]
                }
            })
            .collect()
    };

    while iterations < MAX_ITER {
        iterations += 1;
        let pg = projected(&x, &grad);
        let pg_norm = pg.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if pg_norm <= PG_TOL {
            converged = true;
            break;
        }

        // Search direction from the two-loop recursion on the projected
        // gradient; fall back to steepest descent when it fails to descend.
        let mut dir = two_loop(&memory, &pg);
        for d in dir.iter_mut() {
            *d = -*d;
        }
        // Zero direction components that push an active bound outward.
        for i in 0..n {
            if (x[i] <= bounds.lower[i] + eps_active && dir[i] < 0.0)
                || (x[i] >= bounds.upper[i] - eps_active && dir[i] > 0.0)
            {
                dir[i] = 0.0;
            }
        }
        let mut descent: f64 = dir.iter().zip(&pg).map(|(d, g)| d * g).sum();
        if !(descent < 0.0) {
            memory.clear();
            dir = pg.iter().map(|g| -g).collect();
            descent = -pg.iter().map(|g| g * g).sum::<f64>();
            if !(descent < 0.0) {
                converged = true;
                break;
            }
        }

        // Largest step keeping every coordinate inside the box.
        let mut t_max = f64::INFINITY;
        for i in 0..n {
            if dir[i] > 0.0 {
                t_max = t_max.min((bounds.upper[i] - x[i]) / dir[i]);
            } else if dir[i] < 0.0 {
                t_max = t_max.min((bounds.lower[i] - x[i]) / dir[i]);
            }
        }
        if !t_max.is_finite() {
            t_max = 1e16;
        }
        if t_max <= 0.0 {
            converged = pg_norm <= PG_TOL;
            break;
        }

        match wolfe_search(&mut eval, &x, phi, &dir, descent, t_max, bounds)? {
            Some((x_new, phi_new, grad_new)) => {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
                let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y_norm = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
                if sy > 1e-10 * s_norm * y_norm {
                    if memory.len() == MEMORY {
                        memory.pop_front();
                    }
                    memory.push_back((s, yv, sy));
                }
                let rel_change = (phi - phi_new).abs() / phi.abs().max(1.0);
                x = x_new;
                phi = phi_new;
                grad = grad_new;
                if rel_change <= REL_F_TOL {
                    converged = true;
                    break;
                }
            }
            None => {
                // Line search failed; retry once from steepest descent,
                // then give up.
                if memory.is_empty() {
                    break;
                }
                memory.clear();
            }
        }
    }

    let pg = projected(&x, &grad);
    let gradient_norm = pg.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    if gradient_norm <= PG_TOL {
        converged = true;
    }
    Ok(OptResult {
        value: -phi,
        x_opt: x,
        iterations,
        converged,
        gradient_norm,
    })
}

fn two_loop(memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    if memory.is_empty() {
        return q;
    }
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, sy) in memory.iter().rev() {
        let a = s.iter().zip(&q).map(|(si, qi)| si * qi).sum::<f64>() / sy;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    // Initial Hessian scaling from the most recent pair.
    let (_, y_last, sy_last) = memory.back().unwrap();
    let yy: f64 = y_last.iter().map(|v| v * v).sum();
    if yy > 0.0 {
        let scale = sy_last / yy;
        for qi in q.iter_mut() {
            *qi *= scale;
        }
    }
    for ((s, y, sy), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = y.iter().zip(&q).map(|(yi, qi)| yi * qi).sum::<f64>() / sy;
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

type SearchHit = (Vec<f64>, f64, Vec<f64>);

/// Strong-Wolfe line search on the segment x + t*dir, t in (0, t_max];
/// accepting t_max on Armijo alone when the step is bound-limited.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<E>(
    eval: &mut E,
    x: &[f64],
    phi0: f64,
    dir: &[f64],
    descent: f64,
    t_max: f64,
    bounds: &BoxBounds,
) -> Result<Option<SearchHit>>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let point_at = |t: f64| -> Vec<f64> {
        let mut p: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + t * di).collect();
        bounds.clamp(&mut p);
        p
    };
    let dphi0 = descent;
    let armijo_ok = |t: f64, phi_t: f64| phi_t <= phi0 + WOLFE_C1 * t * dphi0;
    let curvature_ok = |dphi_t: f64| dphi_t.abs() <= WOLFE_C2 * dphi0.abs();

    // Bracketing phase.
    let mut t_prev = 0.0f64;
    let mut phi_prev = phi0;
    let mut t = t_max.min(1.0);
    let mut bracket: Option<(f64, f64, f64)> = None; // (lo, phi_lo, hi)
    for iter in 0..20 {
        let p = point_at(t);
        let (phi_t, grad_t) = eval(&p)?;
        let dphi_t: f64 = grad_t.iter().zip(dir).map(|(g, d)| g * d).sum();
        if !armijo_ok(t, phi_t) || (iter > 0 && phi_t >= phi_prev) {
            bracket = Some((t_prev, phi_prev, t));
            break;
        }
        if curvature_ok(dphi_t) {
            return Ok(Some((p, phi_t, grad_t)));
        }
        if dphi_t >= 0.0 {
            bracket = Some((t, phi_t, t_prev));
            break;
        }
        if t >= t_max * (1.0 - 1e-15) {
            // Bound-limited step that still descends: take it.
            return Ok(Some((p, phi_t, grad_t)));
        }
        t_prev = t;
        phi_prev = phi_t;
        t = (2.0 * t).min(t_max);
    }

    // Zoom phase by bisection.
    let (mut lo, mut phi_lo, mut hi) = match bracket {
        Some(b) => b,
        None => return Ok(None),
    };
    for _ in 0..50 {
        let tm = 0.5 * (lo + hi);
        let p = point_at(tm);
        let (phi_t, grad_t) = eval(&p)?;
        let dphi_t: f64 = grad_t.iter().zip(dir).map(|(g, d)| g * d).sum();
        if !armijo_ok(tm, phi_t) || phi_t >= phi_lo {
            hi = tm;
        } else {
            if curvature_ok(dphi_t) {
                return Ok(Some((p, phi_t, grad_t)));
            }
            if dphi_t * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = tm;
            phi_lo = phi_t;
        }
        if (hi - lo).abs() <= 1e-12 * t_max.max(1.0) {
            break;
        }
    }
    if phi_lo < phi0 && lo > 0.0 {
        let p = point_at(lo);
        let (phi_t, grad_t) = eval(&p)?;
        return Ok(Some((p, phi_t, grad_t)));
    }
    Ok(None)
}

/// Central finite-difference gradient respecting box bounds (one-sided at
/// the faces); used by the grid-sum baseline pipeline.
pub fn fd_gradient<F>(f: &mut F, x: &[f64], bounds: &BoxBounds, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    for i in 0..n {
        let hi = (x[i] + h).min(bounds.upper()[i]);
        let lo = (x[i] - h).max(bounds.lower()[i]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] = hi;
        xm[i] = lo;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        g[i] = (fp - fm) / (hi - lo);
    }
    Ok(g)
}
