//! Transport density: minimum flows on the grid (graph metric and a
//! Euclidean-consistent variant), the ray-wise density of the triangle
//! construction, and residuals of the flux system `div(sigma Du) = f - g`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::counterexample::{ray_cdf_f, ray_cdf_g, ray_of_point};
use crate::error::{LabError, Result};
use crate::geometry::{DiscreteMeasure, Grid2, ScalarField, Vec2};

/// Mass imbalance tolerated between the two measures.
pub const BALANCE_TOL: f64 = 1e-9;

/// Signed mass flow on the axis edges of a grid.
///
/// `flow_x[k]` is the mass sent from node `k` to its east neighbor,
/// `flow_y[k]` to its north neighbor; both are zero unless the two ends are
/// masked. Edge cost is `|flow| * edge length`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: Grid2,
    pub flow_x: Vec<f64>,
    pub flow_y: Vec<f64>,
}

impl FlowField {
    pub fn zero(grid: &Grid2) -> Self {
        Self { grid: grid.clone(), flow_x: vec![0.0; grid.len()], flow_y: vec![0.0; grid.len()] }
    }

    /// Net outflow per node.
    pub fn divergence(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut div = vec![0.0; g.len()];
        for k in g.masked_indices() {
            if let Some(e) = g.neighbor(k, 1, 0) {
                div[k] += self.flow_x[k];
                div[e] -= self.flow_x[k];
            }
            if let Some(n) = g.neighbor(k, 0, 1) {
                div[k] += self.flow_y[k];
                div[n] -= self.flow_y[k];
            }
        }
        div
    }

    /// `sum |flow| * edge length`.
    pub fn graph_cost(&self) -> f64 {
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        self.flow_x.iter().map(|f| f.abs() * hx).sum::<f64>() + self.flow_y.iter().map(|f| f.abs() * hy).sum::<f64>()
    }

    /// Cost of the flow under the isotropic node norm; see
    /// [`flux_density`].
    pub fn isotropic_cost(&self) -> f64 {
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        flux_density(self).values.iter().map(|s| s * hx * hy).sum()
    }

    fn incident(&self, k: usize) -> [f64; 4] {
        let g = &self.grid;
        let w = g.neighbor(k, -1, 0).map_or(0.0, |w| self.flow_x[w]);
        let s = g.neighbor(k, 0, -1).map_or(0.0, |s| self.flow_y[s]);
        let e = if g.neighbor(k, 1, 0).is_some() { self.flow_x[k] } else { 0.0 };
        let n = if g.neighbor(k, 0, 1).is_some() { self.flow_y[k] } else { 0.0 };
        [w, e, s, n]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            flow_x: self.flow_x.iter().map(|f| f * k).collect(),
            flow_y: self.flow_y.iter().map(|f| f * k).collect(),
        }
    }
}

/// `fm - gm` per grid node, after checking the measures sit on the grid.
fn imbalance(fm: &DiscreteMeasure, gm: &DiscreteMeasure, grid: &Grid2) -> Result<Vec<f64>> {
    let count = grid.masked_count();
    if fm.len() != count || gm.len() != count {
        return Err(LabError::Input(format!(
            "measures have {} and {} points, grid has {count} masked nodes",
            fm.len(),
            gm.len()
        )));
    }
    for (k, (p, q)) in grid.masked_indices().zip(fm.points().iter().zip(gm.points())) {
        let node = grid.point(k);
        if (*p - node).norm() > 1e-9 || (*q - node).norm() > 1e-9 {
            return Err(LabError::Input("measure support differs from the grid nodes".into()));
        }
    }
    let total: f64 = fm.masses().iter().sum::<f64>() - gm.masses().iter().sum::<f64>();
    if total.abs() > BALANCE_TOL {
        return Err(LabError::Input(format!("mass imbalance {total:e}")));
    }
    let mut b = vec![0.0; grid.len()];
    for (k, (f, g)) in grid.masked_indices().zip(fm.masses().iter().zip(gm.masses())) {
        b[k] = f - g;
    }
    Ok(b)
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node index
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost flow with divergence `fm - gm` on the 4-neighbor graph.
///
/// Successive shortest paths with node potentials; every augmentation
/// clears a supply, a demand or a reverse residual arc. The objective
/// equals the Wasserstein-1 distance for the graph (Manhattan) metric.
pub fn beckmann_flow(fm: &DiscreteMeasure, gm: &DiscreteMeasure, grid: &Grid2) -> Result<FlowField> {
    let mut excess = imbalance(fm, gm, grid)?;
    let scale = fm.masses().iter().chain(gm.masses()).fold(0.0f64, |m, &x| m.max(x));
    let tol = 1e-13 * scale.max(1e-300);
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut flow = FlowField::zero(grid);
    let mut pi = vec![0.0; grid.len()];
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut pred: Vec<Option<(usize, Arc)>> = vec![None; grid.len()];
    let mut done = vec![false; grid.len()];

    loop {
        let sources: Vec<usize> = grid.masked_indices().filter(|&k| excess[k] > tol).collect();
        if sources.is_empty() {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        pred.iter_mut().for_each(|p| *p = None);
        let mut heap = BinaryHeap::new();
        for &s in &sources {
            dist[s] = 0.0;
            heap.push(HeapItem { dist: 0.0, node: s });
        }
        let mut sink = None;
        while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            if excess[u] < -tol {
                sink = Some(u);
                break;
            }
            for arc in Arc::ALL {
                let Some(v) = grid.neighbor(u, arc.di(), arc.dj()) else { continue };
                let len = if arc.is_x() { hx } else { hy };
                // along the edge orientation the cost is +len, against a
                // positive flow it is -len (cancellation)
                let along = flow.signed(u, arc, grid);
                let cost = if along < 0.0 { -len } else { len };
                let rc = (cost + pi[u] - pi[v]).max(0.0);
                let nd = d + rc;
                if !done[v] && nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = Some((u, arc));
                    heap.push(HeapItem { dist: nd, node: v });
                }
            }
        }
        let Some(t) = sink else {
            return Err(LabError::Topology("supply cannot reach any demand through the mask".into()));
        };
        let dt = dist[t];
        for k in grid.masked_indices() {
            pi[k] += dist[k].min(dt);
        }
        // bottleneck: endpoint imbalances and flows being cancelled
        let mut delta = -excess[t];
        let mut v = t;
        while let Some((u, arc)) = pred[v] {
            let along = flow.signed(u, arc, grid);
            if along < 0.0 {
                delta = delta.min(-along);
            }
            v = u;
        }
        delta = delta.min(excess[v]);
        let mut v = t;
        while let Some((u, arc)) = pred[v] {
            flow.push(u, arc, grid, delta);
            v = u;
        }
        excess[v] -= delta;
        excess[t] += delta;
    }
    Ok(flow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arc {
    East,
    West,
    North,
    South,
}

impl Arc {
    const ALL: [Arc; 4] = [Arc::East, Arc::West, Arc::North, Arc::South];

    fn di(self) -> isize {
        match self {
            Arc::East => 1,
            Arc::West => -1,
            _ => 0,
        }
    }

    fn dj(self) -> isize {
        match self {
            Arc::North => 1,
            Arc::South => -1,
            _ => 0,
        }
    }

    fn is_x(self) -> bool {
        matches!(self, Arc::East | Arc::West)
    }
}

impl FlowField {
    /// Flow from `u` in direction `arc` (negative when it runs back).
    fn signed(&self, u: usize, arc: Arc, grid: &Grid2) -> f64 {
        match arc {
            Arc::East => self.flow_x[u],
            Arc::North => self.flow_y[u],
            Arc::West => -self.flow_x[grid.neighbor(u, -1, 0).unwrap()],
            Arc::South => -self.flow_y[grid.neighbor(u, 0, -1).unwrap()],
        }
    }

    fn push(&mut self, u: usize, arc: Arc, grid: &Grid2, amount: f64) {
        match arc {
            Arc::East => self.flow_x[u] += amount,
            Arc::North => self.flow_y[u] += amount,
            Arc::West => self.flow_x[grid.neighbor(u, -1, 0).unwrap()] -= amount,
            Arc::South => self.flow_y[grid.neighbor(u, 0, -1).unwrap()] -= amount,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicParams {
    pub max_iter: usize,
    /// Relative stationarity (objective change and divergence defect per
    /// check) at which the primal-dual iteration stops.
    pub tol: f64,
}

impl Default for IsotropicParams {
    fn default() -> Self {
        Self { max_iter: 200_000, tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicStats {
    pub iterations: usize,
    pub objective: f64,
    /// Largest divergence defect before the final correction.
    pub defect: f64,
}

/// Minimum flow for the Euclidean-consistent node norm
/// `sqrt(hx^2 (Fw^2 + Fe^2) / 2 + hy^2 (Fs^2 + Fn^2) / 2)`.
///
/// Diagonally preconditioned primal-dual iterations, followed by a
/// graph-Laplacian correction that makes the divergence exact. On smooth
/// data the flow converges to the continuous Beckmann minimizer, which the
/// graph metric of [`beckmann_flow`] cannot do off the axes.
pub fn beckmann_flow_isotropic(
    fm: &DiscreteMeasure,
    gm: &DiscreteMeasure,
    grid: &Grid2,
    params: IsotropicParams,
) -> Result<(FlowField, IsotropicStats)> {
    let b = imbalance(fm, gm, grid)?;
    check_components(grid, &b)?;
    let (hx, hy) = (grid.hx(), grid.hy());
    let (cx, cy) = (hx / 2f64.sqrt(), hy / 2f64.sqrt());
    let n = grid.len();
    let nodes: Vec<usize> = grid.masked_indices().collect();
    let east: Vec<Option<usize>> = (0..n).map(|k| grid.neighbor(k, 1, 0).filter(|_| grid.is_masked(k))).collect();
    let north: Vec<Option<usize>> = (0..n).map(|k| grid.neighbor(k, 0, 1).filter(|_| grid.is_masked(k))).collect();
    let deg: Vec<f64> = (0..n)
        .map(|k| {
            [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().filter(|&&(i, j)| grid.neighbor(k, i, j).is_some()).count() as f64
        })
        .collect();
    let tau_x = 1.0 / (2.0 * cx + 2.0);
    let tau_y = 1.0 / (2.0 * cy + 2.0);
    let sigma_p = 1.0 / cx.max(cy);

    let mut fx = vec![0.0; n];
    let mut fy = vec![0.0; n];
    let mut bar_x = vec![0.0; n];
    let mut bar_y = vec![0.0; n];
    // dual block per node: [west, east, south, north]
    let mut p = vec![[0.0f64; 4]; n];
    let mut phi = vec![0.0; n];
    let b_norm: f64 = b.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);

    let objective = |fx: &[f64], fy: &[f64]| -> f64 {
        nodes
            .iter()
            .map(|&k| {
                let w = grid.neighbor(k, -1, 0).map_or(0.0, |w| fx[w]);
                let s = grid.neighbor(k, 0, -1).map_or(0.0, |s| fy[s]);
                let e = if east[k].is_some() { fx[k] } else { 0.0 };
                let nn = if north[k].is_some() { fy[k] } else { 0.0 };
                (cx * cx * (w * w + e * e) + cy * cy * (s * s + nn * nn)).sqrt()
            })
            .sum()
    };
    let divergence = |fx: &[f64], fy: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|d| *d = 0.0);
        for &k in &nodes {
            if let Some(e) = east[k] {
                out[k] += fx[k];
                out[e] -= fx[k];
            }
            if let Some(nn) = north[k] {
                out[k] += fy[k];
                out[nn] -= fy[k];
            }
        }
    };

    let mut div = vec![0.0; n];
    let mut last_obj = f64::INFINITY;
    let mut iterations = 0;
    let check_every = 100;
    while iterations < params.max_iter {
        iterations += 1;
        // primal step
        for &k in &nodes {
            if let Some(e) = east[k] {
                let grad = cx * (p[k][1] + p[e][0]) + phi[k] - phi[e];
                let new = fx[k] - tau_x * grad;
                bar_x[k] = 2.0 * new - fx[k];
                fx[k] = new;
            }
            if let Some(nn) = north[k] {
                let grad = cy * (p[k][3] + p[nn][2]) + phi[k] - phi[nn];
                let new = fy[k] - tau_y * grad;
                bar_y[k] = 2.0 * new - fy[k];
                fy[k] = new;
            }
        }
        // dual step
        divergence(&bar_x, &bar_y, &mut div);
        for &k in &nodes {
            let w = grid.neighbor(k, -1, 0).map_or(0.0, |w| bar_x[w]);
            let s = grid.neighbor(k, 0, -1).map_or(0.0, |s| bar_y[s]);
            let e = if east[k].is_some() { bar_x[k] } else { 0.0 };
            let nn = if north[k].is_some() { bar_y[k] } else { 0.0 };
            let q = &mut p[k];
            q[0] += sigma_p * cx * w;
            q[1] += sigma_p * cx * e;
            q[2] += sigma_p * cy * s;
            q[3] += sigma_p * cy * nn;
            let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > 1.0 {
                q.iter_mut().for_each(|v| *v /= len);
            }
            phi[k] += (div[k] - b[k]) / deg[k];
        }
        if iterations % check_every == 0 {
            divergence(&fx, &fy, &mut div);
            let defect: f64 = nodes.iter().map(|&k| (div[k] - b[k]).abs()).sum::<f64>() / b_norm;
            let obj = objective(&fx, &fy);
            let change = (obj - last_obj).abs() / obj.max(1e-300);
            last_obj = obj;
            if defect <= params.tol && change <= params.tol {
                break;
            }
        }
    }
    divergence(&fx, &fy, &mut div);
    let defect = nodes.iter().map(|&k| (div[k] - b[k]).abs()).fold(0.0, f64::max);
    let residual: Vec<f64> = (0..n).map(|k| if grid.is_masked(k) { b[k] - div[k] } else { 0.0 }).collect();
    let psi = solve_graph_laplacian(grid, &residual)?;
    for &k in &nodes {
        if let Some(e) = east[k] {
            fx[k] += psi[k] - psi[e];
        }
        if let Some(nn) = north[k] {
            fy[k] += psi[k] - psi[nn];
        }
    }
    let flow = FlowField { grid: grid.clone(), flow_x: fx, flow_y: fy };
    let objective = flow.isotropic_cost();
    log::debug!("isotropic beckmann: {iterations} iterations, defect {defect:e}, objective {objective}");
    Ok((flow, IsotropicStats { iterations, objective, defect }))
}

/// Connected components of the masked 4-neighbor graph.
fn components(grid: &Grid2) -> Vec<Option<usize>> {
    let mut label = vec![None; grid.len()];
    let mut next = 0;
    for start in grid.masked_indices() {
        if label[start].is_some() {
            continue;
        }
        let mut stack = vec![start];
        label[start] = Some(next);
        while let Some(u) = stack.pop() {
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(v) = grid.neighbor(u, di, dj) {
                    if label[v].is_none() {
                        label[v] = Some(next);
                        stack.push(v);
                    }
                }
            }
        }
        next += 1;
    }
    label
}

fn check_components(grid: &Grid2, b: &[f64]) -> Result<()> {
    let label = components(grid);
    let count = label.iter().flatten().max().map_or(0, |m| m + 1);
    let mut net = vec![0.0; count];
    for k in grid.masked_indices() {
        net[label[k].unwrap()] += b[k];
    }
    let scale: f64 = b.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
    if let Some(bad) = net.iter().position(|x| x.abs() > BALANCE_TOL * scale.max(1.0)) {
        return Err(LabError::Topology(format!("component {bad} carries net imbalance {:e}", net[bad])));
    }
    Ok(())
}

/// Solves `L psi = r` for the unweighted graph Laplacian of the mask by
/// conjugate gradients; `r` must sum to zero on every component.
fn solve_graph_laplacian(grid: &Grid2, r: &[f64]) -> Result<Vec<f64>> {
    let n = grid.len();
    let nodes: Vec<usize> = grid.masked_indices().collect();
    let label = components(grid);
    let apply = |x: &[f64], out: &mut [f64]| {
        for &k in &nodes {
            let mut acc = 0.0;
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(v) = grid.neighbor(k, di, dj) {
                    acc += x[k] - x[v];
                }
            }
            out[k] = acc;
        }
    };
    let dot = |a: &[f64], b: &[f64]| nodes.iter().map(|&k| a[k] * b[k]).sum::<f64>();
    // drop the rounding-level component in the kernel (constants per component)
    let count = label.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sums = vec![(0.0, 0usize); count];
    for &k in &nodes {
        let c = label[k].unwrap();
        sums[c].0 += r[k];
        sums[c].1 += 1;
    }
    let mut res = vec![0.0; n];
    for &k in &nodes {
        let (s, m) = sums[label[k].unwrap()];
        res[k] = r[k] - s / m as f64;
    }
    let mut x = vec![0.0; n];
    let mut dir = res.clone();
    let mut ad = vec![0.0; n];
    let mut rr = dot(&res, &res);
    let target = 1e-24 * rr;
    for _ in 0..10 * nodes.len().max(10) {
        if rr <= target || rr == 0.0 {
            return Ok(x);
        }
        apply(&dir, &mut ad);
        let alpha = rr / dot(&dir, &ad);
        for &k in &nodes {
            x[k] += alpha * dir[k];
            res[k] -= alpha * ad[k];
        }
        let rr_new = dot(&res, &res);
        let beta = rr_new / rr;
        for &k in &nodes {
            dir[k] = res[k] + beta * dir[k];
        }
        rr = rr_new;
    }
    Err(LabError::Internal(format!("laplacian correction stalled at residual {:e}", rr.sqrt())))
}

/// Node density `(sum of |flow| * length on incident edges / 2) / cell area`.
pub fn density_from_flow(flow: &FlowField) -> ScalarField {
    let g = &flow.grid;
    let (hx, hy) = (g.hx(), g.hy());
    let values = (0..g.len())
        .map(|k| {
            if !g.is_masked(k) {
                return 0.0;
            }
            let [w, e, s, n] = flow.incident(k);
            let total = (w.abs() + e.abs()) * hx + (s.abs() + n.abs()) * hy;
            0.5 * total / g.cell_area(k)
        })
        .collect();
    ScalarField { grid: g.clone(), values, valid: g.mask().to_vec() }
}

/// Euclidean flux intensity per node: the RMS of the incident edge flows
/// on each axis, converted to flux per unit length of cross-section.
///
/// Its integral `sum sigma * hx * hy` is the isotropic flow cost.
pub fn flux_density(flow: &FlowField) -> ScalarField {
    let g = &flow.grid;
    let (hx, hy) = (g.hx(), g.hy());
    let values = (0..g.len())
        .map(|k| {
            if !g.is_masked(k) {
                return 0.0;
            }
            let [w, e, s, n] = flow.incident(k);
            let vx = ((w * w + e * e) / 2.0).sqrt() / hy;
            let vy = ((s * s + n * n) / 2.0).sqrt() / hx;
            (vx * vx + vy * vy).sqrt()
        })
        .collect();
    ScalarField { grid: g.clone(), values, valid: g.mask().to_vec() }
}

/// Flux vector per node from averaged incident edge flows.
pub fn flux_vector(flow: &FlowField) -> Vec<Vec2> {
    let g = &flow.grid;
    (0..g.len())
        .map(|k| {
            if !g.is_masked(k) {
                return Vec2::ZERO;
            }
            let [w, e, s, n] = flow.incident(k);
            Vec2::new(0.5 * (w + e) / g.hy(), 0.5 * (s + n) / g.hx())
        })
        .collect()
}

/// Transport density on ray `a` of the triangle construction at `t`:
/// residual mass `|F_f(t) - F_g(t)|` crossing the ray's cross-section,
/// whose width per unit `a` is `(t + 2a) / (2 sqrt(a) sqrt(1 + a))`.
pub fn ray_density(a: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(LabError::Input(format!("ray parameter {a} outside [0, 1]")));
    }
    let len = 3.0 + a;
    if !(0.0..=len).contains(&t) {
        return Err(LabError::Domain { x: t - 2.0 - a, y: a.sqrt() * t });
    }
    let w = t + 2.0 * a;
    if w == 0.0 {
        return Ok(0.0);
    }
    let residual = ray_cdf_f(a, t) - ray_cdf_g(a, t);
    Ok(residual.abs() * (1.0 + a).sqrt() / w)
}

/// [`ray_density`] at a Cartesian point of the triangle.
pub fn ray_density_at(p: Vec2) -> Result<f64> {
    let rc = ray_of_point(p.x, p.y)?;
    ray_density(rc.a, rc.t.clamp(0.0, 3.0 + rc.a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MkResidual {
    /// Largest `|div_h(sigma Du_h) - (f - g)|` over nodes with a full stencil.
    pub div_res: f64,
    /// Largest `max(|Du_h| - 1, 0)`.
    pub grad_res: f64,
    /// Largest `1 - |Du_h|` where `sigma > 0.01 max sigma`.
    pub slack_res: f64,
}

/// Share of the peak density above which a node counts as transporting.
pub const SLACK_THRESHOLD: f64 = 0.01;

/// Residuals of `div(sigma Du) = f - g`, `|Du| <= 1`, `|Du| = 1` on
/// `{sigma > 0}`.
///
/// The measures are normalized; `mass` is the total mass they stand for,
/// so node densities are `mass * m_k / cell area`. `sigma` must be given in
/// the same units.
pub fn mk_residual(
    sigma: &ScalarField,
    u: &ScalarField,
    fm: &DiscreteMeasure,
    gm: &DiscreteMeasure,
    mass: f64,
) -> Result<MkResidual> {
    let grid = &sigma.grid;
    if !grid.same_layout(&u.grid) {
        return Err(LabError::Input("sigma and u live on different grids".into()));
    }
    let b = imbalance(fm, gm, grid)?;
    let du = u.gradient();
    let mut grad_res: f64 = 0.0;
    let mut flux = vec![Vec2::ZERO; grid.len()];
    let mut has_flux = vec![false; grid.len()];
    for k in grid.masked_indices() {
        if let (Some(d), Some(s)) = (du.get(k), sigma.get(k)) {
            grad_res = grad_res.max(d.norm() - 1.0);
            flux[k] = d * s;
            has_flux[k] = true;
        }
    }
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut div_res: f64 = 0.0;
    for k in grid.masked_indices() {
        let nb = |di, dj| grid.neighbor(k, di, dj).filter(|&n| has_flux[n]);
        if let (Some(e), Some(w), Some(n), Some(s)) = (nb(1, 0), nb(-1, 0), nb(0, 1), nb(0, -1)) {
            let div = (flux[e].x - flux[w].x) / (2.0 * hx) + (flux[n].y - flux[s].y) / (2.0 * hy);
            let rhs = mass * b[k] / grid.cell_area(k);
            div_res = div_res.max((div - rhs).abs());
        }
    }
    let peak = grid.masked_indices().filter_map(|k| sigma.get(k)).fold(0.0, f64::max);
    let mut slack_res: f64 = 0.0;
    if peak > 0.0 {
        for k in grid.masked_indices() {
            if let (Some(s), Some(d)) = (sigma.get(k), du.get(k)) {
                if s > SLACK_THRESHOLD * peak {
                    slack_res = slack_res.max(1.0 - d.norm());
                }
            }
        }
    }
    Ok(MkResidual { div_res, grad_res, slack_res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, Rect};
    use approx::assert_abs_diff_eq;

    fn point_masses(grid: &Grid2, weights: &[(usize, f64)]) -> DiscreteMeasure {
        let mut w = vec![0.0; grid.masked_count()];
        for &(k, m) in weights {
            w[k] = m;
        }
        DiscreteMeasure::new(grid.masked_indices().map(|k| grid.point(k)).collect(), w).unwrap()
    }

    #[test]
    fn equal_measures_need_no_flow() {
        let g = build_grid(5, 4, Rect::UNIT, |_| true).unwrap();
        let m = point_masses(&g, &[(3, 0.5), (7, 0.5)]);
        let flow = beckmann_flow(&m, &m, &g).unwrap();
        assert_eq!(flow.graph_cost(), 0.0);
        assert!(density_from_flow(&flow).values.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn path_flow_runs_along_the_path() {
        let g = build_grid(6, 2, Rect::new(0.0, 5.0, 0.0, 1.0), |p| p.y == 0.0).unwrap();
        let fm = point_masses(&g, &[(0, 1.0)]);
        let gm = point_masses(&g, &[(5, 1.0)]);
        let flow = beckmann_flow(&fm, &gm, &g).unwrap();
        assert_abs_diff_eq!(flow.graph_cost(), 5.0, epsilon = 1e-12);
        assert!(flow.flow_x[..5].iter().all(|&f| (f - 1.0).abs() < 1e-12));
        let sigma = density_from_flow(&flow);
        for k in 0..6 {
            assert!(sigma.values[k] > 0.0);
        }
        assert!(sigma.values[6..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn flow_meets_the_divergence_constraint() {
        let g = build_grid(7, 7, Rect::UNIT, |p| p.x + p.y <= 1.5).unwrap();
        let n = g.masked_count();
        let fm = DiscreteMeasure::from_weights(
            g.masked_indices().map(|k| g.point(k)).collect(),
            (0..n).map(|i| 1.0 + (i % 3) as f64).collect(),
        )
        .unwrap();
        let gm = DiscreteMeasure::from_weights(
            g.masked_indices().map(|k| g.point(k)).collect(),
            (0..n).map(|i| 1.0 + (i % 5) as f64).collect(),
        )
        .unwrap();
        let flow = beckmann_flow(&fm, &gm, &g).unwrap();
        let div = flow.divergence();
        for (k, (f, m)) in g.masked_indices().zip(fm.masses().iter().zip(gm.masses())) {
            assert_abs_diff_eq!(div[k], f - m, epsilon = 1e-12);
        }
        let (iso, _) = beckmann_flow_isotropic(&fm, &gm, &g, IsotropicParams::default()).unwrap();
        let div = iso.divergence();
        for (k, (f, m)) in g.masked_indices().zip(fm.masses().iter().zip(gm.masses())) {
            assert_abs_diff_eq!(div[k], f - m, epsilon = 1e-12);
        }
    }

    #[test]
    fn disconnected_mask_is_a_topology_error() {
        let g = build_grid(5, 1 + 1, Rect::new(0.0, 4.0, 0.0, 1.0), |p| p.y == 0.0 && p.x != 2.0).unwrap();
        let pts: Vec<Vec2> = g.masked_indices().map(|k| g.point(k)).collect();
        let fm = DiscreteMeasure::new(pts.clone(), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let gm = DiscreteMeasure::new(pts, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(beckmann_flow(&fm, &gm, &g), Err(LabError::Topology(_))));
        assert!(matches!(
            beckmann_flow_isotropic(&fm, &gm, &g, IsotropicParams::default()),
            Err(LabError::Topology(_))
        ));
    }

    #[test]
    fn unbalanced_measures_are_rejected() {
        let g = build_grid(3, 3, Rect::UNIT, |_| true).unwrap();
        let pts: Vec<Vec2> = g.masked_indices().map(|k| g.point(k)).collect();
        let fm = DiscreteMeasure::uniform(pts.clone()).unwrap();
        let other = DiscreteMeasure::uniform(pts[..4].to_vec()).unwrap();
        assert!(beckmann_flow(&fm, &other, &g).is_err());
    }

    #[test]
    fn isotropic_flow_on_a_diagonal_transfer() {
        // mass moving diagonally costs its Euclidean length, not the
        // Manhattan one
        let n = 41;
        let g = build_grid(n, n, Rect::UNIT, |_| true).unwrap();
        let pts: Vec<Vec2> = g.masked_indices().map(|k| g.point(k)).collect();
        let bump = |c: Vec2| move |p: Vec2| (-(p - c).norm_sq() / 0.005).exp();
        let fw: Vec<f64> = pts.iter().map(|&p| bump(Vec2::new(0.3, 0.3))(p)).collect();
        let gw: Vec<f64> = pts.iter().map(|&p| bump(Vec2::new(0.7, 0.7))(p)).collect();
        let fm = DiscreteMeasure::from_weights(pts.clone(), fw).unwrap();
        let gm = DiscreteMeasure::from_weights(pts, gw).unwrap();
        let (iso, stats) = beckmann_flow_isotropic(&fm, &gm, &g, IsotropicParams::default()).unwrap();
        let euclid = 0.4 * 2f64.sqrt();
        assert!((stats.objective - euclid).abs() / euclid < 0.05, "objective {}", stats.objective);
        let graph = beckmann_flow(&fm, &gm, &g).unwrap().graph_cost();
        assert_abs_diff_eq!(graph, 0.8, epsilon = 1e-3);
        assert!(iso.graph_cost() >= graph - 1e-9);
    }

    #[test]
    fn ray_density_vanishes_at_ray_ends() {
        for k in 1..=20 {
            let a = k as f64 / 20.0;
            assert!(ray_density(a, 0.0).unwrap() <= 1e-8);
            assert!(ray_density(a, 3.0 + a).unwrap() <= 1e-8);
            assert!(ray_density(a, 1.0).unwrap() > 0.0);
        }
        assert!(ray_density(0.5, 4.0).is_err());
        assert!(ray_density(1.5, 1.0).is_err());
    }

    #[test]
    fn axis_ray_density_has_closed_form() {
        // a = 0: F_f - F_g = t^2/4 - t^3/12, width t
        for &t in &[0.5, 1.0, 2.0, 2.9] {
            assert_abs_diff_eq!(ray_density(0.0, t).unwrap(), t / 4.0 - t * t / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn trivial_mk_residuals() {
        let g = build_grid(5, 5, Rect::UNIT, |_| true).unwrap();
        let m = DiscreteMeasure::uniform(g.masked_indices().map(|k| g.point(k)).collect()).unwrap();
        let zero = ScalarField::sample(&g, |_| 0.0);
        let r = mk_residual(&zero, &zero, &m, &m, 1.0).unwrap();
        assert_eq!((r.div_res, r.grad_res, r.slack_res), (0.0, 0.0, 0.0));
    }
}
