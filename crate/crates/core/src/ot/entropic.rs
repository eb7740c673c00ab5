//! Log-domain entropic transport with temperature annealing.
//!
//! The coupling is kept in Gibbs form
//! `pi_ij = a_i b_j exp((f_i + g_j - c_ij) / lambda)` and the potentials are
//! updated by exact log-sum-exp reductions, so small temperatures never
//! underflow. The temperature starts at the cost scale and is halved down to
//! the requested value, warm-starting each stage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::DiscreteMeasure;
use crate::ot::{CostMatrix, DualPotentials, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropicParams {
    /// Entropic temperature.
    pub lambda: f64,
    /// Marginal violation (total variation) at which iterations stop.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropicStats {
    pub iterations: usize,
    pub violation: f64,
}

/// `-lambda * log sum_j exp(log_w_j + (pot_j - cost_j) / lambda)`.
fn soft_min(cost: &[f64], pot: &[f64], log_w: &[f64], lambda: f64) -> f64 {
    let inv = 1.0 / lambda;
    let mut best = f64::NEG_INFINITY;
    for ((c, p), w) in cost.iter().zip(pot).zip(log_w) {
        let e = w + (p - c) * inv;
        if e > best {
            best = e;
        }
    }
    if best == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = cost
        .iter()
        .zip(pot)
        .zip(log_w)
        .map(|((c, p), w)| (w + (p - c) * inv - best).exp())
        .sum();
    -lambda * (best + sum.ln())
}

/// Updates `out` from the opposite potential; returns the total variation
/// of the marginal this side had before the update.
/// Rows per block of the column sums.
const COL_BLOCK: usize = 64;

fn half_step(
    cost_rows: &[f64],
    width: usize,
    other: &[f64],
    log_w_other: &[f64],
    masses: &[f64],
    out: &mut [f64],
    lambda: f64,
) -> f64 {
    out.par_iter_mut()
        .zip(cost_rows.par_chunks(width))
        .zip(masses.par_iter())
        .map(|((f, row), &m)| {
            let new = soft_min(row, other, log_w_other, lambda);
            let old = std::mem::replace(f, new);
            if m > 0.0 && old.is_finite() {
                m * (((old - new) / lambda).exp() - 1.0).abs()
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * 0.5
}

fn log_weights(m: &DiscreteMeasure) -> Vec<f64> {
    m.masses()
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Entropic optimal transport for `cost_eps` at temperature `lambda`.
///
/// Returns the coupling with exact target marginal and source marginal
/// within `tol` in total variation, together with the anchored potentials.
pub fn solve_entropic(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    eps: f64,
    params: EntropicParams,
) -> Result<(TransportPlan, DualPotentials, EntropicStats)> {
    let cost = CostMatrix::build(src, tgt, eps);
    solve_entropic_with_cost(src, tgt, &cost, params)
}

// scalings beyond exp(ABSORB) are folded back into the potentials
const ABSORB: f64 = 30.0;

/// Gibbs kernel `a_i b_j exp((f_i + g_j - c_ij) / lambda)` with separate
/// scalings `u`, `v`; iterations only touch the scalings.
struct Kernel<'a> {
    cost: &'a CostMatrix,
    a: &'a [f64],
    b: &'a [f64],
    kernel: Vec<f64>,
    lambda: f64,
}

impl<'a> Kernel<'a> {
    fn new(cost: &'a CostMatrix, a: &'a [f64], b: &'a [f64]) -> Self {
        let kernel = vec![0.0; cost.rows() * cost.cols()];
        Self { cost, a, b, kernel, lambda: f64::NAN }
    }

    fn rebuild(&mut self, f: &[f64], g: &[f64], lambda: f64) {
        let n = self.cost.cols();
        let inv = 1.0 / lambda;
        let (cost, b) = (self.cost, self.b);
        self.kernel
            .par_chunks_mut(n)
            .zip(f.par_iter().zip(self.a.par_iter()))
            .enumerate()
            .for_each(|(i, (row, (&fi, &ai)))| {
                for ((k, &c), (&gj, &bj)) in row.iter_mut().zip(cost.row(i)).zip(g.iter().zip(b)) {
                    *k = ai * bj * ((fi + gj - c) * inv).exp();
                }
            });
        self.lambda = lambda;
    }

    fn row_sums(&self, v: &[f64]) -> Vec<f64> {
        let n = self.cost.cols();
        self.kernel.par_chunks(n).map(|row| row.iter().zip(v).map(|(k, x)| k * x).sum()).collect()
    }

    fn col_sums(&self, u: &[f64]) -> Vec<f64> {
        let n = self.cost.cols();
        // fixed blocks summed in order, so the result does not depend on
        // the thread count or on scheduling
        let partials: Vec<Vec<f64>> = self
            .kernel
            .par_chunks(n * COL_BLOCK)
            .zip(u.par_chunks(COL_BLOCK))
            .map(|(block, us)| {
                let mut acc = vec![0.0; n];
                for (row, &ui) in block.chunks(n).zip(us) {
                    for (s, &k) in acc.iter_mut().zip(row) {
                        *s += ui * k;
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; n];
        for p in &partials {
            total.iter_mut().zip(p).for_each(|(t, q)| *t += q);
        }
        total
    }
}

/// `out = target / sums`; false when a sum vanished on a massive point.
fn rescale(target: &[f64], sums: &[f64], out: &mut [f64]) -> bool {
    for ((o, &t), &s) in out.iter_mut().zip(target).zip(sums) {
        if t > 0.0 {
            if !(s > 0.0) || !s.is_finite() {
                return false;
            }
            *o = t / s;
        } else {
            *o = 1.0;
        }
    }
    true
}

fn absorb(pot: &mut [f64], scale: &mut [f64], lambda: f64) {
    for (p, s) in pot.iter_mut().zip(scale.iter_mut()) {
        if *s > 0.0 {
            *p += lambda * s.ln();
        }
        *s = 1.0;
    }
}

fn needs_absorb(scale: &[f64]) -> bool {
    scale.iter().any(|&s| s > 0.0 && s.ln().abs() > ABSORB)
}

pub fn solve_entropic_with_cost(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    cost: &CostMatrix,
    params: EntropicParams,
) -> Result<(TransportPlan, DualPotentials, EntropicStats)> {
    let EntropicParams { lambda, tol, max_iter } = params;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LabError::Input(format!("lambda = {lambda} must be positive")));
    }
    if !(tol > 0.0) {
        return Err(LabError::Input(format!("tol = {tol} must be positive")));
    }
    let (m, n) = (src.len(), tgt.len());
    let (a, b) = (src.masses(), tgt.masses());
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let mut kernel = Kernel::new(cost, a, b);
    let mut cost_t: Option<Vec<f64>> = None;

    let mut stage_lambda = lambda.max(0.5 * cost.max());
    let mut iterations = 0;
    loop {
        let last_stage = stage_lambda <= lambda;
        let stage_tol = if last_stage { tol } else { (10.0 * tol).max(1e-3) };
        kernel.rebuild(&f, &g, stage_lambda);
        loop {
            // v first: the u-update then sees the source marginal of the current plan
            let cols = kernel.col_sums(&u);
            let ok_v = rescale(b, &cols, &mut v);
            let rows = kernel.row_sums(&v);
            let violation: f64 =
                0.5 * rows.iter().zip(&u).zip(a).map(|((r, ui), ai)| (ui * r - ai).abs()).sum::<f64>();
            let ok_u = ok_v && rescale(a, &rows, &mut u);
            iterations += 1;
            if !ok_u {
                // a row or column lost all its kernel mass: exact log-domain sweep
                absorb(&mut f, &mut u, stage_lambda);
                absorb(&mut g, &mut v, stage_lambda);
                let ct = cost_t.get_or_insert_with(|| cost.transpose());
                let (log_a, log_b) = (log_weights(src), log_weights(tgt));
                half_step(ct, m, &f, &log_a, b, &mut g, stage_lambda);
                half_step(cost.entries(), n, &g, &log_b, a, &mut f, stage_lambda);
                kernel.rebuild(&f, &g, stage_lambda);
            } else if needs_absorb(&u) || needs_absorb(&v) {
                absorb(&mut f, &mut u, stage_lambda);
                absorb(&mut g, &mut v, stage_lambda);
                kernel.rebuild(&f, &g, stage_lambda);
            }
            if violation <= stage_tol || iterations >= max_iter {
                break;
            }
        }
        absorb(&mut f, &mut u, stage_lambda);
        absorb(&mut g, &mut v, stage_lambda);
        if last_stage || iterations >= max_iter {
            break;
        }
        stage_lambda = (0.5 * stage_lambda).max(lambda);
    }
    // exact log-domain g-update leaves the target marginal exact
    let ct = cost_t.get_or_insert_with(|| cost.transpose());
    half_step(ct, m, &f, &log_weights(src), b, &mut g, lambda);
    let violation = source_violation(cost, &f, &g, src, tgt, lambda);
    if violation > tol {
        return Err(LabError::NonConvergence { iterations, violation });
    }

    let inv = 1.0 / lambda;
    let mut coupling = vec![0.0; m * n];
    coupling
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let ai = a[i];
            for (j, p) in row.iter_mut().enumerate() {
                let bj = b[j];
                if ai > 0.0 && bj > 0.0 {
                    *p = ai * bj * ((f[i] + g[j] - cost.get(i, j)) * inv).exp();
                }
            }
        });
    let objective = coupling.iter().zip(cost.entries()).map(|(p, c)| p * c).sum();
    let plan = TransportPlan { coupling, source: src.clone(), target: tgt.clone(), objective };
    let duals = DualPotentials { phi: f, psi: g }.anchored();
    Ok((plan, duals, EntropicStats { iterations, violation }))
}

fn source_violation(
    cost: &CostMatrix,
    f: &[f64],
    g: &[f64],
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    lambda: f64,
) -> f64 {
    let log_b = log_weights(tgt);
    f.par_iter()
        .zip(src.masses().par_iter())
        .enumerate()
        .map(|(i, (&fi, &a))| {
            if a == 0.0 {
                return 0.0;
            }
            let fresh = soft_min(cost.row(i), g, &log_b, lambda);
            a * (((fi - fresh) / lambda).exp() - 1.0).abs()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use approx::assert_abs_diff_eq;

    fn params(lambda: f64) -> EntropicParams {
        EntropicParams { lambda, tol: 1e-10, max_iter: 100_000 }
    }

    #[test]
    fn identical_measures_concentrate_on_the_diagonal() {
        let pts: Vec<Vec2> = (0..5).map(|k| Vec2::new(k as f64, 0.0)).collect();
        let m = DiscreteMeasure::uniform(pts).unwrap();
        let (plan, _, stats) = solve_entropic(&m, &m, 0.1, params(0.02)).unwrap();
        assert!(stats.violation <= 1e-10);
        for i in 0..5 {
            assert!(plan.get(i, i) > 0.2 - 1e-9);
        }
        assert!(plan.objective <= 0.1 + 1e-6);
    }

    #[test]
    fn symmetric_instance_gives_symmetric_coupling() {
        let src = DiscreteMeasure::uniform(vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)]).unwrap();
        let tgt = DiscreteMeasure::uniform(vec![Vec2::new(-0.5, 1.0), Vec2::new(0.5, 1.0)]).unwrap();
        let (plan, _, _) = solve_entropic(&src, &tgt, 0.2, params(0.3)).unwrap();
        assert_abs_diff_eq!(plan.get(0, 0), plan.get(1, 1), epsilon = 1e-10);
        assert_abs_diff_eq!(plan.get(0, 1), plan.get(1, 0), epsilon = 1e-10);
        assert!(plan.marginal_error() <= 1e-10);
    }

    #[test]
    fn nonconvergence_reports_the_violation() {
        let src = DiscreteMeasure::uniform((0..20).map(|k| Vec2::new(k as f64 * 0.05, 0.0)).collect()).unwrap();
        let tgt = DiscreteMeasure::uniform((0..20).map(|k| Vec2::new(0.3 + k as f64 * 0.02, 0.5)).collect()).unwrap();
        let err = solve_entropic(&src, &tgt, 0.1, EntropicParams { lambda: 1e-3, tol: 1e-12, max_iter: 3 }).unwrap_err();
        match err {
            LabError::NonConvergence { iterations, violation } => {
                assert_eq!(iterations, 3);
                assert!(violation > 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let m = DiscreteMeasure::uniform(vec![Vec2::ZERO]).unwrap();
        assert!(solve_entropic(&m, &m, 0.1, EntropicParams { lambda: 0.0, tol: 1e-6, max_iter: 10 }).is_err());
        assert!(solve_entropic(&m, &m, 0.1, EntropicParams { lambda: 0.1, tol: 0.0, max_iter: 10 }).is_err());
    }
}
