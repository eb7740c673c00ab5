use crate::error::{LabError, Result};
use crate::geometry::{Grid2, ScalarField, Vec2, VectorField};
use crate::ot::TransportPlan;

/// Gradient magnitude that potentials are clipped to.
pub const GRADIENT_CLIP: f64 = 1.0 - 1e-10;

/// Fraction of clipped nodes above which a potential is rejected.
pub const DEGENERACY_FRACTION: f64 = 0.01;

/// A transport map sampled on a grid.
#[derive(Debug, Clone)]
pub struct MapField {
    pub grid: Grid2,
    pub image: Vec<Vec2>,
    pub displacement: Vec<f64>,
    pub valid: Vec<bool>,
    /// Potential gradient the map was built from, when there is one.
    pub gradient: Option<VectorField>,
    /// Nodes whose gradient had to be clipped below unit length.
    pub clipped: usize,
}

impl MapField {
    /// Samples an explicit map on the masked nodes of `grid`.
    pub fn from_fn<F: Fn(Vec2) -> Option<Vec2>>(grid: &Grid2, map: F) -> Self {
        let mut image = vec![Vec2::ZERO; grid.len()];
        let mut displacement = vec![0.0; grid.len()];
        let mut valid = vec![false; grid.len()];
        for k in grid.masked_indices() {
            let p = grid.point(k);
            if let Some(q) = map(p) {
                image[k] = q;
                displacement[k] = (q - p).norm();
                valid[k] = true;
            }
        }
        Self { grid: grid.clone(), image, displacement, valid, gradient: None, clipped: 0 }
    }

    pub fn get(&self, k: usize) -> Option<Vec2> {
        self.valid[k].then(|| self.image[k])
    }
}

/// `T(x_i) = sum_j pi_ij y_j / sum_j pi_ij` for every source point; `None`
/// for rows without mass.
pub fn barycentric_images(plan: &TransportPlan) -> Vec<Option<Vec2>> {
    let targets = plan.target.points();
    (0..plan.rows())
        .map(|i| {
            let row = plan.row(i);
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return None;
            }
            let moment = row.iter().zip(targets).fold(Vec2::ZERO, |acc, (&p, &y)| acc + y * p);
            Some(moment * (1.0 / mass))
        })
        .collect()
}

/// Barycentric projection of `plan` laid out on `grid`, whose masked nodes
/// (in grid order) are the plan's source points.
pub fn barycentric_map(plan: &TransportPlan, grid: &Grid2) -> Result<MapField> {
    if plan.rows() != grid.masked_count() {
        return Err(LabError::Input(format!(
            "plan has {} sources but grid has {} masked nodes",
            plan.rows(),
            grid.masked_count()
        )));
    }
    let images = barycentric_images(plan);
    let mut field = MapField::from_fn(grid, |_| None);
    for (k, img) in grid.masked_indices().zip(images) {
        if let Some(q) = img {
            field.image[k] = q;
            field.displacement[k] = (q - grid.point(k)).norm();
            field.valid[k] = true;
        }
    }
    Ok(field)
}

/// `T(x) = x - eps Du / sqrt(1 - |Du|^2)` with `Du` from finite differences
/// of the sampled potential.
///
/// Gradients of length `>= 1` are clipped to [`GRADIENT_CLIP`]; if more
/// than [`DEGENERACY_FRACTION`] of the nodes needed clipping the potential
/// is rejected as degenerate for this `eps` and grid.
pub fn map_from_potential(phi_grid: &ScalarField, eps: f64) -> Result<MapField> {
    if !(eps >= 0.0) {
        return Err(LabError::Input(format!("eps = {eps} must be nonnegative")));
    }
    let grid = &phi_grid.grid;
    let mut gradient = phi_grid.gradient();
    let mut field = MapField::from_fn(grid, |_| None);
    let total = gradient.valid.iter().filter(|&&v| v).count();
    let mut clipped = 0;
    for k in 0..grid.len() {
        if !gradient.valid[k] {
            continue;
        }
        let mut p = gradient.values[k];
        let len = p.norm();
        if len >= 1.0 {
            p = p * (GRADIENT_CLIP / len);
            gradient.values[k] = p;
            clipped += 1;
        }
        let scale = eps / (1.0 - p.norm_sq()).sqrt();
        let x = grid.point(k);
        field.image[k] = x - p * scale;
        field.displacement[k] = scale * p.norm();
        field.valid[k] = true;
    }
    if clipped as f64 > DEGENERACY_FRACTION * total as f64 {
        return Err(LabError::Degenerate { bad: clipped, total });
    }
    if clipped > 0 {
        log::warn!("map_from_potential: clipped |Du| at {clipped} of {total} nodes");
    }
    field.clipped = clipped;
    field.gradient = Some(gradient);
    Ok(field)
}
