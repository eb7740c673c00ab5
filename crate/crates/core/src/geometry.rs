//! Planar geometry, sampled fields and discrete measures.
//!
//! Grids are node-centered: node `(i, j)` sits at
//! `(xmin + i*hx, ymin + j*hy)` and is stored at index `j*nx + i`.
//! Every node carries an explicit mask flag; fields carry their own
//! validity flags on top of the mask.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Subcell samples per axis used when clipping boundary cells.
pub const SUBCELL_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle `[xmin, xmax] x [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub const fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Self { xmin, xmax, ymin, ymax }
    }

    pub const UNIT: Rect = Rect::new(0.0, 1.0, 0.0, 1.0);

    pub fn is_nondegenerate(&self) -> bool {
        self.xmin.is_finite()
            && self.xmax.is_finite()
            && self.ymin.is_finite()
            && self.ymax.is_finite()
            && self.xmax > self.xmin
            && self.ymax > self.ymin
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    /// Rectangle shrunk by `dx`, `dy` on each side.
    pub fn shrink(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(self.xmin + dx, self.xmax - dx, self.ymin + dy, self.ymax - dy)
    }
}

/// Symmetric regularized Monge cost `sqrt(eps^2 + |x - y|^2)`.
pub fn cost_eps(x: Vec2, y: Vec2, eps: f64) -> f64 {
    let d = x - y;
    (eps * eps + d.norm_sq()).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    nx: usize,
    ny: usize,
    bounds: Rect,
    mask: Vec<bool>,
    cell_area: Vec<f64>,
}

/// Builds a node-centered grid and evaluates `mask_predicate` at every node.
///
/// The clipped cell area of each masked node is estimated with a
/// `SUBCELL_SAMPLES x SUBCELL_SAMPLES` midpoint sampling of its cell, so
/// cells cut by the domain boundary carry only their inside fraction.
pub fn build_grid<F>(nx: usize, ny: usize, bounds: Rect, mask_predicate: F) -> Result<Grid2>
where
    F: Fn(Vec2) -> bool,
{
    if nx < 2 || ny < 2 {
        return Err(LabError::Config(format!("grid needs at least 2x2 nodes, got {nx}x{ny}")));
    }
    if !bounds.is_nondegenerate() {
        return Err(LabError::Config(format!("degenerate bounds {bounds:?}")));
    }
    let hx = (bounds.xmax - bounds.xmin) / (nx - 1) as f64;
    let hy = (bounds.ymax - bounds.ymin) / (ny - 1) as f64;
    let mut mask = Vec::with_capacity(nx * ny);
    let mut cell_area = Vec::with_capacity(nx * ny);
    let k = SUBCELL_SAMPLES;
    for j in 0..ny {
        for i in 0..nx {
            let p = Vec2::new(bounds.xmin + i as f64 * hx, bounds.ymin + j as f64 * hy);
            let inside = mask_predicate(p);
            mask.push(inside);
            if !inside {
                cell_area.push(0.0);
                continue;
            }
            // cell clipped to the bounding rectangle
            let x0 = (p.x - 0.5 * hx).max(bounds.xmin);
            let x1 = (p.x + 0.5 * hx).min(bounds.xmax);
            let y0 = (p.y - 0.5 * hy).max(bounds.ymin);
            let y1 = (p.y + 0.5 * hy).min(bounds.ymax);
            let (sx, sy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);
            let mut hits = 0usize;
            for b in 0..k {
                for a in 0..k {
                    let q = Vec2::new(x0 + (a as f64 + 0.5) * sx, y0 + (b as f64 + 0.5) * sy);
                    if mask_predicate(q) {
                        hits += 1;
                    }
                }
            }
            cell_area.push((x1 - x0) * (y1 - y0) * hits as f64 / (k * k) as f64);
        }
    }
    Ok(Grid2 { nx, ny, bounds, mask, cell_area })
}

impl Grid2 {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn bounds(&self) -> Rect {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hx(&self) -> f64 {
        (self.bounds.xmax - self.bounds.xmin) / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        (self.bounds.ymax - self.bounds.ymin) / (self.ny - 1) as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn point(&self, k: usize) -> Vec2 {
        let (i, j) = self.coords(k);
        Vec2::new(
            self.bounds.xmin + i as f64 * self.hx(),
            self.bounds.ymin + j as f64 * self.hy(),
        )
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.mask[k]
    }

    /// Clipped cell area of node `k` (zero outside the mask).
    pub fn cell_area(&self, k: usize) -> f64 {
        self.cell_area[k]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k)
    }

    /// Masked neighbor at offset `(di, dj)`, if it exists.
    pub fn neighbor(&self, k: usize, di: isize, dj: isize) -> Option<usize> {
        let (i, j) = self.coords(k);
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= self.nx as isize || nj >= self.ny as isize {
            return None;
        }
        let n = self.index(ni as usize, nj as usize);
        self.mask[n].then_some(n)
    }

    /// True when the node and its four axis neighbors are all masked.
    pub fn has_full_stencil(&self, k: usize) -> bool {
        self.mask[k]
            && self.neighbor(k, 1, 0).is_some()
            && self.neighbor(k, -1, 0).is_some()
            && self.neighbor(k, 0, 1).is_some()
            && self.neighbor(k, 0, -1).is_some()
    }

    /// Same nodes, bounds and mask.
    pub fn same_layout(&self, other: &Grid2) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.bounds == other.bounds && self.mask == other.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScalarField {
    /// Samples `f` at every masked node; other nodes hold 0 and are invalid.
    pub fn sample<F: Fn(Vec2) -> f64>(grid: &Grid2, f: F) -> Self {
        let values = (0..grid.len())
            .map(|k| if grid.is_masked(k) { f(grid.point(k)) } else { 0.0 })
            .collect();
        Self { grid: grid.clone(), values, valid: grid.mask().to_vec() }
    }

    pub fn from_values(grid: &Grid2, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::Input(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid: grid.clone(), values, valid: grid.mask().to_vec() })
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.valid[k].then(|| self.values[k])
    }

    /// Central differences where both axis neighbors are valid, one-sided
    /// differences at the mask boundary.
    pub fn gradient(&self) -> VectorField {
        let g = &self.grid;
        let (hx, hy) = (g.hx(), g.hy());
        let mut values = vec![Vec2::ZERO; g.len()];
        let mut valid = vec![false; g.len()];
        for k in 0..g.len() {
            if !self.valid[k] {
                continue;
            }
            let dx = self.axis_derivative(k, 1, 0, hx);
            let dy = self.axis_derivative(k, 0, 1, hy);
            if let (Some(dx), Some(dy)) = (dx, dy) {
                values[k] = Vec2::new(dx, dy);
                valid[k] = true;
            }
        }
        VectorField { grid: g.clone(), values, valid }
    }

    fn axis_derivative(&self, k: usize, di: isize, dj: isize, h: f64) -> Option<f64> {
        let valid_neighbor = |si: isize| {
            self.grid
                .neighbor(k, si * di, si * dj)
                .filter(|&n| self.valid[n])
        };
        match (valid_neighbor(1), valid_neighbor(-1)) {
            (Some(p), Some(m)) => Some((self.values[p] - self.values[m]) / (2.0 * h)),
            (Some(p), None) => Some((self.values[p] - self.values[k]) / h),
            (None, Some(m)) => Some((self.values[k] - self.values[m]) / h),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid2,
    pub values: Vec<Vec2>,
    pub valid: Vec<bool>,
}

impl VectorField {
    pub fn sample<F: Fn(Vec2) -> Vec2>(grid: &Grid2, f: F) -> Self {
        let values = (0..grid.len())
            .map(|k| if grid.is_masked(k) { f(grid.point(k)) } else { Vec2::ZERO })
            .collect();
        Self { grid: grid.clone(), values, valid: grid.mask().to_vec() }
    }

    pub fn get(&self, k: usize) -> Option<Vec2> {
        self.valid[k].then(|| self.values[k])
    }
}

/// Weighted point cloud with masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<Vec2>,
    masses: Vec<f64>,
}

/// Tolerance on the total mass of a [`DiscreteMeasure`].
pub const MASS_TOL: f64 = 1e-12;

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec2>, masses: Vec<f64>) -> Result<Self> {
        if points.len() != masses.len() {
            return Err(LabError::Input(format!(
                "{} points but {} masses",
                points.len(),
                masses.len()
            )));
        }
        if points.is_empty() {
            return Err(LabError::Input("empty measure".into()));
        }
        if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(LabError::Input(format!("invalid mass {m}")));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(LabError::Input(format!("masses sum to {total}, expected 1")));
        }
        Ok(Self { points, masses })
    }

    /// Normalizes nonnegative weights to unit total.
    pub fn from_weights(points: Vec<Vec2>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(LabError::Input(format!("total weight {total} is not positive")));
        }
        let masses = weights.iter().map(|w| w / total).collect();
        Self::new(points, masses)
    }

    /// Equal masses on the given points.
    pub fn uniform(points: Vec<Vec2>) -> Result<Self> {
        let n = points.len();
        Self::from_weights(points, vec![1.0; n])
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> Vec2 {
        self.points
            .iter()
            .zip(&self.masses)
            .fold(Vec2::ZERO, |acc, (&p, &m)| acc + p * m)
    }
}

/// Discretizes a density on the masked nodes of `grid`.
///
/// Node masses are `density(node) * clipped cell area`, renormalized to one.
/// The returned measure is indexed by masked node in grid order.
pub fn discretize<F: Fn(Vec2) -> f64>(density: F, grid: &Grid2) -> Result<DiscreteMeasure> {
    let mut points = Vec::with_capacity(grid.masked_count());
    let mut weights = Vec::with_capacity(points.capacity());
    for k in grid.masked_indices() {
        let p = grid.point(k);
        let rho = density(p);
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(LabError::Input(format!("density {rho} at ({}, {})", p.x, p.y)));
        }
        points.push(p);
        weights.push(rho * grid.cell_area(k));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(LabError::Input("density vanishes on every masked node".into()));
    }
    DiscreteMeasure::from_weights(points, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smallest_grid_is_fully_masked() {
        let g = build_grid(2, 2, Rect::UNIT, |_| true).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.masked_count(), 4);
    }

    #[test]
    fn triangle_mask_counts_nodes_below_diagonal() {
        let g = build_grid(3, 3, Rect::UNIT, |p| p.x + p.y <= 1.0 + 1e-12).unwrap();
        assert_eq!(g.masked_count(), 6);
    }

    #[test]
    fn degenerate_bounds_are_rejected() {
        let err = build_grid(4, 4, Rect::new(0.0, 0.0, 0.0, 1.0), |_| true).unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        assert!(build_grid(1, 4, Rect::UNIT, |_| true).is_err());
    }

    #[test]
    fn constant_density_on_rectangle_is_uniform_in_the_interior() {
        let g = build_grid(5, 5, Rect::UNIT, |_| true).unwrap();
        let m = discretize(|_| 2.0, &g).unwrap();
        // interior cells have full area, edge cells half, corners a quarter
        let interior = m.masses()[g.index(2, 2)];
        assert_abs_diff_eq!(interior, 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.masses()[g.index(0, 2)], interior / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.masses()[g.index(0, 0)], interior / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_density_first_moment() {
        let g = build_grid(33, 33, Rect::UNIT, |_| true).unwrap();
        let m = discretize(|p| p.x, &g).unwrap();
        // int x * x / int x over the unit square = (1/3) / (1/2)
        assert_abs_diff_eq!(m.mean().x, 2.0 / 3.0, epsilon = 1e-3);
        assert_abs_diff_eq!(m.mean().y, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_density_is_an_error() {
        let g = build_grid(3, 3, Rect::UNIT, |_| true).unwrap();
        assert!(discretize(|_| 0.0, &g).is_err());
    }

    #[test]
    fn cost_examples() {
        let o = Vec2::ZERO;
        assert_eq!(cost_eps(Vec2::new(0.3, -1.2), Vec2::new(0.3, -1.2), 0.0), 0.0);
        assert_eq!(cost_eps(o, Vec2::new(3.0, 4.0), 0.0), 5.0);
        assert_abs_diff_eq!(cost_eps(o, Vec2::new(1.0, 0.0), 1.0), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn gradient_is_exact_on_affine_fields() {
        let g = build_grid(6, 5, Rect::new(-1.0, 2.0, 0.0, 1.0), |p| p.x + p.y < 2.2).unwrap();
        let f = ScalarField::sample(&g, |p| 3.0 * p.x - 2.0 * p.y + 1.0);
        let grad = f.gradient();
        // (2, 0) has no masked y-neighbor and stays invalid
        assert_eq!(grad.valid.iter().filter(|&&v| v).count(), g.masked_count() - 1);
        for d in g.masked_indices().filter_map(|k| grad.get(k)) {
            assert_abs_diff_eq!(d.x, 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(d.y, -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn measure_rejects_bad_masses() {
        let p = vec![Vec2::ZERO, Vec2::new(1.0, 0.0)];
        assert!(DiscreteMeasure::new(p.clone(), vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(p.clone(), vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::new(p, vec![1.0]).is_err());
    }
}
