//! Regularity observables of a sampled transport map: the Jacobian `DT`,
//! its eigenvalues and trace `W`, the ray-aligned components, Lipschitz and
//! Hölder moduli, and sweeps over the regularization parameter.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{Grid2, Rect, ScalarField, Vec2};
use crate::instance::{InstanceSpec, MapExtraction, SolverMode};
use crate::ot::{barycentric_map, map_from_potential, solve_entropic, solve_exact, EntropicParams, MapField};

/// Row-major 2x2 matrix.
pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

/// Eigenvalue pairs with imaginary parts below this (times `1 + |tr|`) are
/// treated as real.
pub const IMAG_FLUSH: f64 = 1e-9;

/// Distance from the mask boundary, in grid steps, that probe nodes keep.
pub const PROBE_MARGIN: usize = 3;

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn apply(m: &Mat2, v: Vec2) -> Vec2 {
    Vec2::new(m[0][0] * v.x + m[0][1] * v.y, m[1][0] * v.x + m[1][1] * v.y)
}

fn quad_form(m: &Mat2, v: Vec2) -> f64 {
    v.dot(apply(m, v))
}

/// Direct inverse by the adjugate.
pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Jacobian of a sampled map at nodes with a full stencil.
#[derive(Debug, Clone)]
pub struct JacobianField {
    pub grid: Grid2,
    pub h: f64,
    pub jac: Vec<Option<Mat2>>,
}

impl JacobianField {
    pub fn get(&self, k: usize) -> Option<&Mat2> {
        self.jac[k].as_ref()
    }

    pub fn defined_count(&self) -> usize {
        self.jac.iter().filter(|j| j.is_some()).count()
    }
}

/// `DT` by central differences of the map samples.
///
/// Only nodes whose four axis neighbors carry valid samples get a
/// Jacobian; `h` must match both grid spacings.
pub fn jacobian_field(map: &MapField, h: f64) -> Result<JacobianField> {
    let g = &map.grid;
    let close = |s: f64| (s - h).abs() <= 1e-9 * h;
    if !(h > 0.0) || !close(g.hx()) || !close(g.hy()) {
        return Err(LabError::Input(format!("stencil h = {h} does not match grid spacing ({}, {})", g.hx(), g.hy())));
    }
    let mut jac = vec![None; g.len()];
    for k in g.masked_indices() {
        if !map.valid[k] {
            continue;
        }
        let nb = |di, dj| g.neighbor(k, di, dj).filter(|&n| map.valid[n]);
        if let (Some(e), Some(w), Some(n), Some(s)) = (nb(1, 0), nb(-1, 0), nb(0, 1), nb(0, -1)) {
            let dx = (map.image[e] - map.image[w]) * (0.5 / h);
            let dy = (map.image[n] - map.image[s]) * (0.5 / h);
            jac[k] = Some([[dx.x, dy.x], [dx.y, dy.y]]);
        }
    }
    let field = JacobianField { grid: g.clone(), h, jac };
    if field.defined_count() == 0 {
        return Err(LabError::Empty("no node has a full interior stencil".into()));
    }
    Ok(field)
}

/// Eigenvalues of a 2x2 matrix, larger real part first.
///
/// Conjugate pairs come out with the positive imaginary part first;
/// imaginary parts below `IMAG_FLUSH * (1 + |tr|)` are set to zero.
pub fn eigs2(j: &Mat2) -> (Complex64, Complex64) {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let half = 0.5 * (j[0][0] - j[1][1]);
    let disc = half * half + j[0][1] * j[1][0];
    let mid = 0.5 * tr;
    if disc >= 0.0 {
        let r = disc.sqrt();
        // pick the root without cancellation, recover the other from det
        let (hi, lo) = if mid >= 0.0 {
            let hi = mid + r;
            (hi, if hi != 0.0 { det / hi } else { mid - r })
        } else {
            let lo = mid - r;
            (if lo != 0.0 { det / lo } else { mid + r }, lo)
        };
        let (a, b) = if hi >= lo { (hi, lo) } else { (lo, hi) };
        return (Complex64::new(a, 0.0), Complex64::new(b, 0.0));
    }
    let im = (-disc).sqrt();
    if im < IMAG_FLUSH * (1.0 + tr.abs()) {
        return (Complex64::new(mid, 0.0), Complex64::new(mid, 0.0));
    }
    (Complex64::new(mid, im), Complex64::new(mid, -im))
}

pub fn trace_w(j: &Mat2) -> f64 {
    j[0][0] + j[1][1]
}

/// The matrices of the linearized equation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwMatrices {
    pub l: f64,
    pub a: Mat2,
    /// Closed-form inverse `L (I + (L^2 / eps^2) Du Du^T)`.
    pub a_inv: Mat2,
    pub w: Mat2,
    /// `tr(A^{-1} w)`.
    pub w_trace: f64,
}

impl AwMatrices {
    /// `A^{-1} w`, the Jacobian implied by the potential.
    pub fn jacobian(&self) -> Mat2 {
        mat_mul(&self.a_inv, &self.w)
    }
}

/// `A = (1/L)(I - Du Du^T)` with `L = eps / sqrt(1 - |Du|^2)`, `w = A - D2u`.
pub fn matrices_aw(du: Vec2, d2u: &Mat2, eps: f64) -> Result<AwMatrices> {
    let s = du.norm_sq();
    if !(s < 1.0) {
        return Err(LabError::Degenerate { bad: 1, total: 1 });
    }
    if !(eps > 0.0) {
        return Err(LabError::Input(format!("eps = {eps} must be positive")));
    }
    let l = eps / (1.0 - s).sqrt();
    let p = [du.x, du.y];
    let k = l * l / (eps * eps);
    let mut a = [[0.0; 2]; 2];
    let mut a_inv = [[0.0; 2]; 2];
    let mut w = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let id = if i == j { 1.0 } else { 0.0 };
            a[i][j] = (id - p[i] * p[j]) / l;
            a_inv[i][j] = l * (id + k * p[i] * p[j]);
            w[i][j] = a[i][j] - d2u[i][j];
        }
    }
    let w_trace = trace_w(&mat_mul(&a_inv, &w));
    Ok(AwMatrices { l, a, a_inv, w, w_trace })
}

/// `(nu^T J nu, xi^T J xi)` with `nu = -Du/|Du|` and `xi` its rotation.
pub fn ray_components(j: &Mat2, du: Vec2) -> Result<(f64, f64)> {
    let len = du.norm();
    if !(len > 1e-12) {
        return Err(LabError::UndefinedDirection(len));
    }
    let nu = du * (-1.0 / len);
    let xi = nu.perp();
    Ok((quad_form(j, nu), quad_form(j, xi)))
}

/// Largest `|T(p) - T(q)| / |p - q|` over axis-adjacent node pairs with
/// both ends in `region`.
pub fn lipschitz_modulus(map: &MapField, region: &Rect) -> Result<f64> {
    let g = &map.grid;
    let inside = |k: usize| map.valid[k] && region.contains(g.point(k));
    let mut best: Option<f64> = None;
    for k in (0..g.len()).filter(|&k| inside(k)) {
        for (di, dj, h) in [(1, 0, g.hx()), (0, 1, g.hy())] {
            if let Some(n) = g.neighbor(k, di, dj).filter(|&n| inside(n)) {
                let q = (map.image[n] - map.image[k]).norm() / h;
                best = Some(best.map_or(q, |b: f64| b.max(q)));
            }
        }
    }
    best.ok_or_else(|| LabError::Empty(format!("no adjacent valid nodes in {region:?}")))
}

/// Least-squares fit of `log value = exponent * log delta + log constant`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderFit {
    pub exponent: f64,
    pub constant: f64,
    pub r2: f64,
    /// Deltas span fewer than three decades.
    pub low_confidence: bool,
}

pub fn holder_fit(pairs: &[(f64, f64)]) -> Result<HolderFit> {
    if pairs.len() < 3 {
        return Err(LabError::Input(format!("need at least 3 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|&(d, v)| !(d > 0.0 && v > 0.0 && d.is_finite() && v.is_finite())) {
        return Err(LabError::Input("deltas and values must be positive".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::Input("deltas must be distinct".into()));
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(HolderFit { exponent, constant: intercept.exp(), r2, low_confidence: span < 3.0 * std::f64::consts::LN_10 })
}

/// Per-node observables of a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostics {
    pub point: Vec2,
    pub w: f64,
    pub eig1: Complex64,
    pub eig2: Complex64,
    /// Ray-aligned components, absent where the displacement vanishes.
    pub t_nu_nu: Option<f64>,
    pub t_xi_xi: Option<f64>,
}

/// Nodes in `probe` whose `PROBE_MARGIN`-step box lies inside the mask.
pub fn probe_nodes(grid: &Grid2, probe: &Rect) -> Vec<usize> {
    let m = PROBE_MARGIN as isize;
    grid.masked_indices()
        .filter(|&k| probe.contains(grid.point(k)))
        .filter(|&k| (-m..=m).all(|di| (-m..=m).all(|dj| grid.neighbor(k, di, dj).is_some())))
        .collect()
}

/// Observables at every probe node with a Jacobian.
pub fn node_diagnostics(map: &MapField, jac: &JacobianField, nodes: &[usize]) -> Vec<(usize, NodeDiagnostics)> {
    nodes
        .iter()
        .filter_map(|&k| {
            let j = jac.get(k)?;
            let (eig1, eig2) = eigs2(j);
            let point = map.grid.point(k);
            // the ray direction is the displacement direction, -Du/|Du|
            let du = match &map.gradient {
                Some(grad) => grad.values[k],
                None => point - map.image[k],
            };
            let (t_nu_nu, t_xi_xi) = match ray_components(j, du) {
                Ok((a, b)) => (Some(a), Some(b)),
                Err(_) => (None, None),
            };
            Some((k, NodeDiagnostics { point, w: trace_w(j), eig1, eig2, t_nu_nu, t_xi_xi }))
        })
        .collect()
}

/// Summary of one solve over a probe region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub eps: f64,
    pub probe_region: Rect,
    pub node_count: usize,
    pub max_w: f64,
    pub min_w: f64,
    /// Extremes of the real parts.
    pub min_eig: f64,
    pub max_eig: f64,
    /// Nodes with a conjugate pair beyond the flush tolerance.
    pub complex_count: usize,
    /// Nodes whose eigenvalues are real (to `1e-6 (1 + |tr|)`) and positive.
    pub real_positive_count: usize,
    pub lipschitz_modulus: f64,
    pub holder_exponent: Option<f64>,
    /// Largest `|W - (l1 + l2)|` and `|W - (T_nu_nu + T_xi_xi)|` over nodes.
    pub identity_residual: f64,
    pub solver_iterations: Option<usize>,
    pub error: Option<String>,
}

impl DiagnosticsReport {
    fn failed(eps: f64, probe: Rect, err: &LabError) -> Self {
        Self {
            eps,
            probe_region: probe,
            node_count: 0,
            max_w: f64::NAN,
            min_w: f64::NAN,
            min_eig: f64::NAN,
            max_eig: f64::NAN,
            complex_count: 0,
            real_positive_count: 0,
            lipschitz_modulus: f64::NAN,
            holder_exponent: None,
            identity_residual: f64::NAN,
            solver_iterations: None,
            error: Some(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Tolerance for counting a node's eigenvalues as real.
pub const REAL_TOL: f64 = 1e-6;

/// Summarizes the map over `probe` (shrunk by the boundary margin).
pub fn report(map: &MapField, eps: f64, probe: &Rect) -> Result<DiagnosticsReport> {
    let g = &map.grid;
    let jac = jacobian_field(map, g.hx())?;
    let nodes = probe_nodes(g, probe);
    let diag = node_diagnostics(map, &jac, &nodes);
    if diag.is_empty() {
        return Err(LabError::Empty(format!("probe {probe:?} holds no interior node")));
    }
    let mut r = DiagnosticsReport {
        eps,
        probe_region: *probe,
        node_count: diag.len(),
        max_w: f64::NEG_INFINITY,
        min_w: f64::INFINITY,
        min_eig: f64::INFINITY,
        max_eig: f64::NEG_INFINITY,
        complex_count: 0,
        real_positive_count: 0,
        lipschitz_modulus: 0.0,
        holder_exponent: None,
        identity_residual: 0.0,
        solver_iterations: None,
        error: None,
    };
    for (_, d) in &diag {
        r.max_w = r.max_w.max(d.w);
        r.min_w = r.min_w.min(d.w);
        r.min_eig = r.min_eig.min(d.eig2.re);
        r.max_eig = r.max_eig.max(d.eig1.re);
        if d.eig1.im != 0.0 {
            r.complex_count += 1;
        }
        if d.eig1.im.abs() <= REAL_TOL * (1.0 + d.w.abs()) && d.eig2.re > 0.0 {
            r.real_positive_count += 1;
        }
        let mut res = (d.w - (d.eig1.re + d.eig2.re)).abs();
        if let (Some(a), Some(b)) = (d.t_nu_nu, d.t_xi_xi) {
            res = res.max((d.w - a - b).abs());
        }
        r.identity_residual = r.identity_residual.max(res);
    }
    let mut valid_map = map.clone();
    // restrict the modulus to the probe nodes themselves
    let keep: std::collections::HashSet<usize> = nodes.iter().copied().collect();
    for k in 0..g.len() {
        valid_map.valid[k] &= keep.contains(&k);
    }
    r.lipschitz_modulus = lipschitz_modulus(&valid_map, probe)?;
    Ok(r)
}

/// Map of a solved instance at one `eps`, with the solver iteration count
/// when there is one.
pub fn solve_map(instance: &InstanceSpec, eps: f64) -> Result<(MapField, Option<usize>)> {
    let (grid, src, tgt) = instance.build()?;
    let spec = &instance.solver;
    let (plan, duals, iterations) = match spec.mode {
        SolverMode::Exact => {
            let (p, d) = solve_exact(&src, &tgt, eps)?;
            (p, d, None)
        }
        SolverMode::Entropic => {
            let params = EntropicParams { lambda: spec.lambda, tol: spec.tol, max_iter: spec.max_iter };
            let (p, d, stats) = solve_entropic(&src, &tgt, eps, params)?;
            (p, d, Some(stats.iterations))
        }
    };
    let map = match spec.map {
        MapExtraction::Barycentric => barycentric_map(&plan, &grid)?,
        MapExtraction::Potential => {
            let mut values = vec![0.0; grid.len()];
            for (k, &phi) in grid.masked_indices().zip(&duals.phi) {
                values[k] = phi;
            }
            map_from_potential(&ScalarField::from_values(&grid, values)?, eps)?
        }
    };
    Ok((map, iterations))
}

/// Solves the instance for each `eps` and reports over `probe`.
///
/// A failing `eps` yields a report carrying the error; the sweep goes on.
pub fn eps_sweep(instance: &InstanceSpec, eps_list: &[f64], probe: &Rect) -> Result<Vec<DiagnosticsReport>> {
    if eps_list.is_empty() {
        return Err(LabError::Input("empty eps list".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(LabError::Input(format!("eps list {eps_list:?} must be decreasing")));
    }
    instance.validate()?;
    let reports = eps_list
        .iter()
        .map(|&eps| {
            let attempt = solve_map(instance, eps).and_then(|(map, iterations)| {
                let mut r = report(&map, eps, probe)?;
                r.solver_iterations = iterations;
                Ok(r)
            });
            attempt.unwrap_or_else(|e| {
                log::warn!("eps = {eps}: {e}");
                DiagnosticsReport::failed(eps, *probe, &e)
            })
        })
        .collect();
    Ok(reports)
}
