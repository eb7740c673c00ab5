//! Fast invariant suite behind `monge-lab selftest`.
//!
//! Every check is deterministic for a given seed, so two runs write
//! byte-identical files.

use std::path::Path;

use monge_lab::counterexample::{eta, eta_ode_coeffs, a_of_y, potential_u, strip_mass_check, t0_map, TriangleSpec};
use monge_lab::diagnostics::{holder_fit, report, solve_map};
use monge_lab::instance::{InstanceSpec, MapExtraction, SolverMode, SolverSpec};
use monge_lab::ot::{solve_entropic, solve_exact, EntropicParams};
use monge_lab::transport_density::{beckmann_flow, mk_residual};
use monge_lab::{build_grid, cost_eps, discretize, DiscreteMeasure, LabError, Rect, ScalarField, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{self, LogRange};
use crate::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 7;

/// One invariant: `value` must lie in `[lower, upper]`.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &'static str, value: f64, lower: f64, upper: f64) -> Self {
        Self { name, value, lower, upper, pass: value >= lower && value <= upper }
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    seed: u64,
    passed: usize,
    total: usize,
    checks: Vec<Check>,
}

fn eta_ode_residual() -> Result<f64, LabError> {
    let mut worst: f64 = 0.0;
    for i in 0..40 {
        let y = 0.01 + (3.9 - 0.01) * i as f64 / 39.0;
        let h = 1e-4 * y.max(0.1);
        let d = (-eta(y + 2.0 * h)? + 8.0 * eta(y + h)? - 8.0 * eta(y - h)? + eta(y - 2.0 * h)?) / (12.0 * h);
        let (p, q) = eta_ode_coeffs(a_of_y(y)?);
        worst = worst.max((d + q / y * eta(y)? - y * p).abs());
    }
    Ok(worst)
}

fn strip_imbalance() -> Result<f64, LabError> {
    let mut worst: f64 = 0.0;
    for i in 1..=10 {
        let (mf, mg) = strip_mass_check(0.1 * i as f64)?;
        worst = worst.max((mf - mg).abs() / mf);
    }
    Ok(worst)
}

fn random_triangle_point(rng: &mut ChaCha8Rng) -> Vec2 {
    loop {
        let p = Vec2::new(rng.gen_range(-3.0..1.0), rng.gen_range(-4.0..4.0));
        if p.y.abs() <= p.x + 3.0 {
            return p;
        }
    }
}

/// Largest `|u(p) - u(q)| - |p - q|` over random pairs.
fn potential_excess(rng: &mut ChaCha8Rng) -> Result<f64, LabError> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..2000 {
        let (p, q) = (random_triangle_point(rng), random_triangle_point(rng));
        let du = (potential_u(p.x, p.y)? - potential_u(q.x, q.y)?).abs();
        worst = worst.max(du - (p - q).norm());
    }
    Ok(worst)
}

fn blowup() -> Result<(f64, f64, f64), LabError> {
    let base = t0_map(TriangleSpec::BLOWUP.x, TriangleSpec::BLOWUP.y)?;
    let mut pairs = Vec::new();
    for k in 0..9 {
        let s = 10f64.powf(-2.0 - 0.5 * k as f64);
        pairs.push((s, (t0_map(-2.0, s)? - base).norm()));
    }
    let fit = holder_fit(&pairs)?;
    let x = t0_map(-2.0, 1e-6)?.x;
    let ratio = (x + 2.0) / 1e-4;
    Ok((fit.exponent, fit.r2, (ratio - (14f64.sqrt() - 3.0)).abs() / (14f64.sqrt() - 3.0)))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn exact_vs_permutations(rng: &mut ChaCha8Rng) -> Result<f64, LabError> {
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = 2 + trial % 5;
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec2> {
            (0..n).map(|_| Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
        };
        let (x, y) = (cloud(rng), cloud(rng));
        for eps in [0.0, 0.1, 1.0] {
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost_eps(x[i], y[j], eps)).sum::<f64>() / n as f64)
                .fold(f64::INFINITY, f64::min);
            let (plan, _) = solve_exact(&DiscreteMeasure::uniform(x.clone())?, &DiscreteMeasure::uniform(y.clone())?, eps)?;
            worst = worst.max((plan.objective - best).abs());
        }
    }
    Ok(worst)
}

fn solver(mode: SolverMode) -> SolverSpec {
    SolverSpec { mode, lambda: 0.005, tol: 1e-7, max_iter: 20_000, map: MapExtraction::Potential }
}

/// Relative excess of the entropic transport cost over the exact one.
fn entropic_gap() -> Result<f64, LabError> {
    let inst = InstanceSpec::smooth_mixture(10, solver(SolverMode::Entropic));
    let (_, src, tgt) = inst.build()?;
    let (exact, _) = solve_exact(&src, &tgt, 0.2)?;
    let params = EntropicParams { lambda: inst.solver.lambda, tol: inst.solver.tol, max_iter: inst.solver.max_iter };
    let (plan, _, _) = solve_entropic(&src, &tgt, 0.2, params)?;
    Ok((plan.objective - exact.objective) / exact.objective)
}

/// Share of real positive spectra and the identity residual on the smooth
/// instance at eps = 0.2.
fn smooth_spectra() -> Result<(f64, f64), LabError> {
    let mut spec = solver(SolverMode::Entropic);
    spec.lambda = 0.01;
    spec.tol = 1e-6;
    let inst = InstanceSpec::smooth_mixture(17, spec);
    let (map, _) = solve_map(&inst, 0.2)?;
    let r = report(&map, 0.2, &Rect::UNIT)?;
    Ok((r.real_positive_count as f64 / r.node_count as f64, r.identity_residual))
}

fn aligned_beckmann() -> Result<f64, LabError> {
    let grid = build_grid(12, 2, Rect::new(0.0, 3.0, 0.0, 0.5), |_| true)?;
    let fm = discretize(|p| 1.0 + (p.x).sin().powi(2), &grid)?;
    let gm = discretize(|p| 0.2 + p.x * p.x, &grid)?;
    let flow = beckmann_flow(&fm, &gm, &grid)?;
    let (plan, _) = solve_exact(&fm, &gm, 0.0)?;
    Ok((flow.graph_cost() - plan.objective).abs())
}

/// Divergence residual of a manufactured one-dimensional pair, over `h`.
fn manufactured_residual() -> Result<f64, LabError> {
    let n = 33;
    let grid = build_grid(n, n, Rect::UNIT, |_| true)?;
    let tau = std::f64::consts::TAU;
    let fm = discretize(|_| 1.0, &grid)?;
    let gm = discretize(|p| 1.0 + 0.5 * (tau * p.x).sin(), &grid)?;
    let sigma = ScalarField::sample(&grid, |p| (1.0 - (tau * p.x).cos()) / (2.0 * tau));
    let u = ScalarField::sample(&grid, |p| -p.x);
    let r = mk_residual(&sigma, &u, &fm, &gm, 1.0)?;
    Ok(r.div_res / grid.hx())
}

fn checks(seed: u64) -> Result<Vec<Check>, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        Check::new("eta_ode_residual", eta_ode_residual()?, 0.0, 1e-8),
        Check::new("strip_mass_imbalance", strip_imbalance()?, 0.0, 1e-8),
        Check::new("potential_lipschitz_excess", potential_excess(&mut rng)?, f64::NEG_INFINITY, 1e-9),
    ];
    let (exponent, r2, rate) = blowup()?;
    out.push(Check::new("blowup_holder_exponent", exponent, 0.62, 0.72));
    out.push(Check::new("blowup_holder_r2", r2, 0.99, 1.0));
    out.push(Check::new("blowup_rate_deviation", rate, 0.0, 0.01));
    out.push(Check::new("exact_vs_permutations", exact_vs_permutations(&mut rng)?, 0.0, 1e-9));
    out.push(Check::new("entropic_cost_excess", entropic_gap()?, -1e-9, 0.02));
    let (share, identity) = smooth_spectra()?;
    out.push(Check::new("real_positive_share", share, 0.99, 1.0));
    out.push(Check::new("trace_identity_residual", identity, 0.0, 1e-9));
    out.push(Check::new("aligned_beckmann_gap", aligned_beckmann()?, 0.0, 1e-6));
    out.push(Check::new("manufactured_div_residual_over_h", manufactured_residual()?, 0.0, 2.0));
    Ok(out)
}

/// Runs the suite, writes `selftest.json` and the blowup samples to `out`.
pub fn run(seed: u64, out: &Path) -> CliResult<()> {
    let checks = checks(seed)?;
    std::fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.to_owned(), source })?;
    commands::counterexample(&LogRange { start: 1e-2, end: 1e-6, count: 9 }, out)?;
    for c in &checks {
        println!("selftest: {:<34} {:>12.5e}  {}", c.name, c.value, if c.pass { "ok" } else { "FAILED" });
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    let total = checks.len();
    let summary = Summary { seed, passed, total, checks };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    let path = out.join("selftest.json");
    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    if passed < total {
        return Err(CliError::Invariant(format!("{} of {total} self-test invariants failed", total - passed)));
    }
    println!("selftest: {passed}/{total} invariants hold");
    Ok(())
}
