//! Transportation network simplex on the dense bipartite graph.
//!
//! Sources and targets hang off an artificial root through big-M arcs; the
//! spanning tree is kept strongly feasible (Cunningham's leaving-arc rule),
//! which rules out cycling on degenerate pivots. Entering arcs come from a
//! cyclic block search over the implicit `m x n` arc set.

use crate::error::{LabError, Result};
use crate::geometry::DiscreteMeasure;
use crate::ot::{CostMatrix, DualPotentials, TransportPlan};

/// Largest support size accepted on either side.
pub const EXACT_CAPACITY: usize = 2500;

const BALANCE_TOL: f64 = 1e-9;

struct Simplex<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    art_cost: f64,
    parent: Vec<usize>,
    pred_arc: Vec<usize>,
    // true when the tree arc to the parent is oriented node -> parent
    up: Vec<bool>,
    flow: Vec<f64>,
    pi: Vec<f64>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    tol: f64,
    next_arc: usize,
    block: usize,
}

impl<'a> Simplex<'a> {
    fn new(cost: &'a [f64], supply: &[f64], demand: &[f64], max_cost: f64) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let nodes = m + n + 1;
        let root = m + n;
        let art_cost = (max_cost + 1.0) * (m + n) as f64;
        let mut s = Self {
            m,
            n,
            cost,
            art_cost,
            parent: vec![root; nodes],
            pred_arc: vec![usize::MAX; nodes],
            up: vec![false; nodes],
            flow: vec![0.0; nodes],
            pi: vec![0.0; nodes],
            depth: vec![1; nodes],
            children: vec![Vec::new(); nodes],
            tol: 1e-11 * (1.0 + max_cost),
            next_arc: 0,
            block: ((m * n) as f64).sqrt().ceil().max(16.0) as usize,
        };
        s.depth[root] = 0;
        s.children[root] = (0..m + n).collect();
        for (i, &a) in supply.iter().enumerate() {
            s.pred_arc[i] = m * n + i;
            s.up[i] = true;
            s.flow[i] = a;
            s.pi[i] = -art_cost;
        }
        for (j, &b) in demand.iter().enumerate() {
            let v = m + j;
            s.pred_arc[v] = m * n + v;
            s.up[v] = false;
            s.flow[v] = b;
            s.pi[v] = art_cost;
        }
        s
    }

    fn reduced_cost(&self, arc: usize) -> f64 {
        let (i, j) = (arc / self.n, arc % self.n);
        self.cost[arc] + self.pi[i] - self.pi[self.m + j]
    }

    /// Most negative reduced cost in the next block that has one.
    fn find_entering(&mut self) -> Option<(usize, f64)> {
        let total = self.m * self.n;
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        let mut arc = self.next_arc;
        while scanned < total {
            let end = scanned + self.block.min(total - scanned);
            while scanned < end {
                let rc = self.reduced_cost(arc);
                if rc < -self.tol && best.is_none_or(|(_, b)| rc < b) {
                    best = Some((arc, rc));
                }
                arc += 1;
                if arc == total {
                    arc = 0;
                }
                scanned += 1;
            }
            if best.is_some() {
                self.next_arc = arc;
                return best;
            }
        }
        None
    }

    fn join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        u
    }

    fn pivot(&mut self, arc: usize, rc: f64) -> Result<()> {
        let first = arc / self.n;
        let second = self.m + arc % self.n;
        let join = self.join(first, second);

        // leaving arc: last blocking arc along the cycle oriented from join
        let mut delta = f64::INFINITY;
        let mut out: Option<(usize, bool)> = None;
        let mut w = first;
        while w != join {
            if self.up[w] && self.flow[w] < delta {
                delta = self.flow[w];
                out = Some((w, true));
            }
            w = self.parent[w];
        }
        let mut w = second;
        while w != join {
            if !self.up[w] && self.flow[w] <= delta {
                delta = self.flow[w];
                out = Some((w, false));
            }
            w = self.parent[w];
        }
        let (u_out, first_side) =
            out.ok_or_else(|| LabError::Internal("unbounded transportation cycle".into()))?;

        let mut w = first;
        while w != join {
            if self.up[w] {
                self.flow[w] -= delta;
            } else {
                self.flow[w] += delta;
            }
            w = self.parent[w];
        }
        let mut w = second;
        while w != join {
            if self.up[w] {
                self.flow[w] += delta;
            } else {
                self.flow[w] -= delta;
            }
            w = self.parent[w];
        }

        // re-hang the detached subtree below the entering arc
        let (new_root, attach) = if first_side { (first, second) } else { (second, first) };
        let mut path = vec![new_root];
        while *path.last().unwrap() != u_out {
            let p = self.parent[*path.last().unwrap()];
            path.push(p);
        }
        let saved: Vec<(usize, bool, f64)> =
            path.iter().map(|&w| (self.pred_arc[w], self.up[w], self.flow[w])).collect();
        let old_parent = self.parent[u_out];
        remove_child(&mut self.children[old_parent], u_out);
        for k in 0..path.len() - 1 {
            let (child, upper) = (path[k], path[k + 1]);
            remove_child(&mut self.children[upper], child);
            self.children[child].push(upper);
            self.parent[upper] = child;
            let (pa, pu, pf) = saved[k];
            self.pred_arc[upper] = pa;
            self.up[upper] = !pu;
            self.flow[upper] = pf;
        }
        self.parent[new_root] = attach;
        self.pred_arc[new_root] = arc;
        self.up[new_root] = new_root == first;
        self.flow[new_root] = delta;
        self.children[attach].push(new_root);

        let shift = if new_root == first { -rc } else { rc };
        let mut stack = vec![new_root];
        while let Some(w) = stack.pop() {
            self.pi[w] += shift;
            self.depth[w] = self.depth[self.parent[w]] + 1;
            stack.extend_from_slice(&self.children[w]);
        }
        Ok(())
    }

    fn run(&mut self) -> Result<usize> {
        let limit = 50 * (self.m + self.n) * (self.m + self.n) + 1000;
        let mut pivots = 0;
        while let Some((arc, rc)) = self.find_entering() {
            self.pivot(arc, rc)?;
            pivots += 1;
            if pivots > limit {
                return Err(LabError::Internal(format!("network simplex exceeded {limit} pivots")));
            }
        }
        Ok(pivots)
    }
}

fn remove_child(children: &mut Vec<usize>, node: usize) {
    if let Some(pos) = children.iter().position(|&c| c == node) {
        children.swap_remove(pos);
    }
}

/// Globally optimal plan and duals for the cost `sqrt(eps^2 + |x - y|^2)`.
pub fn solve_exact(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    eps: f64,
) -> Result<(TransportPlan, DualPotentials)> {
    let cost = CostMatrix::build(src, tgt, eps);
    solve_exact_with_cost(src, tgt, &cost)
}

/// [`solve_exact`] with a prebuilt cost matrix.
pub fn solve_exact_with_cost(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Result<(TransportPlan, DualPotentials)> {
    let size = src.len().max(tgt.len());
    if size > EXACT_CAPACITY {
        return Err(LabError::Capacity { got: size, limit: EXACT_CAPACITY });
    }
    if !(cost.eps() >= 0.0) {
        return Err(LabError::Input(format!("eps = {} must be nonnegative", cost.eps())));
    }
    let imbalance = src.masses().iter().sum::<f64>() - tgt.masses().iter().sum::<f64>();
    if imbalance.abs() > BALANCE_TOL {
        return Err(LabError::Input(format!("mass imbalance {imbalance:e}")));
    }

    // zero-mass points never carry flow; they get duals by c-transform below
    let rows: Vec<usize> = (0..src.len()).filter(|&i| src.masses()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..tgt.len()).filter(|&j| tgt.masses()[j] > 0.0).collect();
    let (m, n) = (rows.len(), cols.len());
    let mut reduced = Vec::with_capacity(m * n);
    for &i in &rows {
        reduced.extend(cols.iter().map(|&j| cost.get(i, j)));
    }
    let supply: Vec<f64> = rows.iter().map(|&i| src.masses()[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| tgt.masses()[j]).collect();
    let max_cost = reduced.iter().copied().fold(0.0, f64::max);

    let mut simplex = Simplex::new(&reduced, &supply, &demand, max_cost);
    let pivots = simplex.run()?;
    log::debug!("network simplex: {m}x{n}, {pivots} pivots, big-M {}", simplex.art_cost);

    let cols_total = tgt.len();
    let mut coupling = vec![0.0; src.len() * cols_total];
    for v in 0..m + n {
        let arc = simplex.pred_arc[v];
        if arc < m * n && simplex.flow[v] > 0.0 {
            let (i, j) = (rows[arc / n], cols[arc % n]);
            coupling[i * cols_total + j] = simplex.flow[v];
        }
    }

    let mut phi = vec![f64::NAN; src.len()];
    let mut psi = vec![f64::NAN; tgt.len()];
    for (k, &i) in rows.iter().enumerate() {
        phi[i] = -simplex.pi[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        psi[j] = simplex.pi[m + k];
    }
    for (j, value) in psi.iter_mut().enumerate() {
        if value.is_nan() {
            *value = rows.iter().map(|&i| cost.get(i, j) - phi[i]).fold(f64::INFINITY, f64::min);
        }
    }
    for (i, value) in phi.iter_mut().enumerate() {
        if value.is_nan() {
            *value = (0..tgt.len()).map(|j| cost.get(i, j) - psi[j]).fold(f64::INFINITY, f64::min);
        }
    }
    let duals = DualPotentials { phi, psi }.anchored();

    let objective = coupling.iter().zip(cost.entries()).map(|(p, c)| p * c).sum();
    let plan = TransportPlan { coupling, source: src.clone(), target: tgt.clone(), objective };
    Ok((plan, duals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cost_eps, Vec2};
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_pair() {
        let x = DiscreteMeasure::uniform(vec![Vec2::new(0.5, -1.0)]).unwrap();
        let y = DiscreteMeasure::uniform(vec![Vec2::new(2.0, 1.0)]).unwrap();
        let (plan, duals) = solve_exact(&x, &y, 0.3).unwrap();
        assert_eq!(plan.coupling, vec![1.0]);
        assert_abs_diff_eq!(plan.objective, cost_eps(x.points()[0], y.points()[0], 0.3), epsilon = 1e-15);
        assert_eq!(duals.phi[0], 0.0);
    }

    #[test]
    fn identical_supports_stay_put() {
        let pts = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)];
        let m = DiscreteMeasure::uniform(pts).unwrap();
        for &eps in &[0.0, 0.25, 1.0] {
            let (plan, _) = solve_exact(&m, &m, eps).unwrap();
            assert_abs_diff_eq!(plan.get(0, 0), 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(plan.get(1, 1), 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(plan.objective, eps, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_mass_points_get_feasible_duals() {
        let src = DiscreteMeasure::new(vec![Vec2::ZERO, Vec2::new(1.0, 0.0)], vec![1.0, 0.0]).unwrap();
        let tgt = DiscreteMeasure::new(vec![Vec2::new(0.0, 1.0), Vec2::new(2.0, 2.0)], vec![0.0, 1.0]).unwrap();
        let (plan, duals) = solve_exact(&src, &tgt, 0.1).unwrap();
        assert_abs_diff_eq!(plan.get(0, 1), 1.0, epsilon = 1e-15);
        let cost = CostMatrix::build(&src, &tgt, 0.1);
        assert!(duals.max_violation(&cost) <= 1e-12);
    }

    #[test]
    fn capacity_is_enforced() {
        let pts: Vec<Vec2> = (0..EXACT_CAPACITY + 1).map(|k| Vec2::new(k as f64, 0.0)).collect();
        let big = DiscreteMeasure::uniform(pts).unwrap();
        let small = DiscreteMeasure::uniform(vec![Vec2::ZERO]).unwrap();
        assert!(matches!(solve_exact(&big, &small, 0.0), Err(LabError::Capacity { .. })));
    }
}
