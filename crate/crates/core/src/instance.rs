//! Serializable description of a transport instance: grid, mask, the two
//! densities and the solver to use.

use serde::{Deserialize, Serialize};

use crate::counterexample::{densities, in_domain};
use crate::error::{LabError, Result};
use crate::geometry::{build_grid, discretize, DiscreteMeasure, Grid2, Rect, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    #[serde(rename = "rect")]
    Rect,
    #[serde(rename = "triangle_ABB'")]
    TriangleAbb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub bounds: Rect,
    pub mask: MaskKind,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid2> {
        match self.mask {
            MaskKind::Rect => build_grid(self.nx, self.ny, self.bounds, |_| true),
            MaskKind::TriangleAbb => build_grid(self.nx, self.ny, self.bounds, in_domain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub center: [f64; 2],
    pub width: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    CounterexampleF,
    CounterexampleG,
    /// `background + sum weight * exp(-|x - center|^2 / (2 width^2))`.
    GaussianMixture {
        components: Vec<Gaussian>,
        #[serde(default)]
        background: f64,
    },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<()> {
        if let DensitySpec::GaussianMixture { components, background } = self {
            if !(background.is_finite() && *background >= 0.0) {
                return Err(LabError::Config(format!("background {background} must be nonnegative")));
            }
            for c in components {
                if !(c.width > 0.0 && c.weight >= 0.0 && c.center.iter().all(|v| v.is_finite())) {
                    return Err(LabError::Config(format!("bad gaussian component {c:?}")));
                }
            }
            if components.is_empty() && *background == 0.0 {
                return Err(LabError::Config("gaussian mixture is identically zero".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, p: Vec2) -> Result<f64> {
        match self {
            DensitySpec::Uniform => Ok(1.0),
            DensitySpec::CounterexampleF => densities(p.x, p.y).map(|(f, _)| f),
            DensitySpec::CounterexampleG => densities(p.x, p.y).map(|(_, g)| g),
            DensitySpec::GaussianMixture { components, background } => Ok(components
                .iter()
                .map(|c| {
                    let d = p - Vec2::new(c.center[0], c.center[1]);
                    c.weight * (-d.norm_sq() / (2.0 * c.width * c.width)).exp()
                })
                .sum::<f64>()
                + background),
        }
    }

    /// Normalized measure on the masked nodes of `grid`.
    pub fn discretize(&self, grid: &Grid2) -> Result<DiscreteMeasure> {
        self.validate()?;
        for k in grid.masked_indices() {
            self.eval(grid.point(k))?;
        }
        discretize(|p| self.eval(p).unwrap_or(f64::NAN), grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Exact,
    Entropic,
}

/// How the transport map is read off a solved instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapExtraction {
    /// `T = x - eps Du / sqrt(1 - |Du|^2)` from the source potential.
    #[default]
    Potential,
    /// Conditional mean of the plan.
    Barycentric,
}

fn default_lambda() -> f64 {
    0.01
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub mode: SolverMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub map: MapExtraction,
}

impl SolverSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mode == SolverMode::Entropic {
            if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                return Err(LabError::Config(format!("lambda = {} must be positive", self.lambda)));
            }
            if !(self.tol > 0.0) || self.max_iter == 0 {
                return Err(LabError::Config("tol and max_iter must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Source and target densities on a common grid, plus the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub grid: GridSpec,
    pub source: DensitySpec,
    pub target: DensitySpec,
    pub solver: SolverSpec,
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.nx < 2 || self.grid.ny < 2 {
            return Err(LabError::Config("grid needs at least 2 nodes per axis".into()));
        }
        if !self.grid.bounds.is_nondegenerate() {
            return Err(LabError::Config(format!("degenerate bounds {:?}", self.grid.bounds)));
        }
        self.source.validate()?;
        self.target.validate()?;
        self.solver.validate()
    }

    /// Grid and the two discretized measures (masked nodes in grid order).
    pub fn build(&self) -> Result<(Grid2, DiscreteMeasure, DiscreteMeasure)> {
        self.validate()?;
        let grid = self.grid.build()?;
        let src = self.source.discretize(&grid)?;
        let tgt = self.target.discretize(&grid)?;
        Ok((grid, src, tgt))
    }

    /// The smooth test instance: a two-bump mixture on the unit square sent
    /// to the uniform density.
    pub fn smooth_mixture(n: usize, solver: SolverSpec) -> Self {
        Self {
            grid: GridSpec { nx: n, ny: n, bounds: Rect::UNIT, mask: MaskKind::Rect },
            source: DensitySpec::GaussianMixture {
                components: vec![
                    Gaussian { center: [0.3, 0.35], width: 0.15, weight: 1.0 },
                    Gaussian { center: [0.7, 0.6], width: 0.2, weight: 0.7 },
                ],
                background: 0.5,
            },
            target: DensitySpec::Uniform,
            solver,
        }
    }

    /// The triangle counterexample on `ABB'`.
    pub fn counterexample(nx: usize, ny: usize, solver: SolverSpec) -> Self {
        Self {
            grid: GridSpec { nx, ny, bounds: Rect::new(-3.0, 1.0, -4.0, 4.0), mask: MaskKind::TriangleAbb },
            source: DensitySpec::CounterexampleF,
            target: DensitySpec::CounterexampleG,
            solver,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropic() -> SolverSpec {
        SolverSpec { mode: SolverMode::Entropic, lambda: 0.01, tol: 1e-6, max_iter: 100, map: MapExtraction::Potential }
    }

    #[test]
    fn mixture_evaluates() {
        let d = DensitySpec::GaussianMixture {
            components: vec![Gaussian { center: [0.0, 0.0], width: 1.0, weight: 2.0 }],
            background: 0.5,
        };
        assert_eq!(d.eval(Vec2::ZERO).unwrap(), 2.5);
        assert!((d.eval(Vec2::new(1.0, 0.0)).unwrap() - (2.0 * (-0.5f64).exp() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn counterexample_measures_have_equal_node_sets() {
        let inst = InstanceSpec::counterexample(17, 33, entropic());
        let (grid, f, g) = inst.build().unwrap();
        assert_eq!(f.len(), grid.masked_count());
        assert_eq!(f.points(), g.points());
    }

    #[test]
    fn zero_mixture_is_rejected() {
        let d = DensitySpec::GaussianMixture { components: vec![], background: 0.0 };
        assert!(d.validate().is_err());
    }

    #[test]
    fn bad_solver_is_rejected() {
        let mut s = entropic();
        s.lambda = -1.0;
        let inst = InstanceSpec::smooth_mixture(5, s);
        assert!(matches!(inst.build(), Err(LabError::Config(_))));
    }
}
