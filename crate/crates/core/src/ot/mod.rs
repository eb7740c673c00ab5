//! Discrete optimal transport for the regularized Monge cost.
//!
//! Two solvers share one output shape ([`TransportPlan`] plus
//! [`DualPotentials`]): an exact network simplex used as an oracle, and a
//! log-domain entropic solver for grid-sized instances. Maps are extracted
//! either from the plan ([`barycentric_map`]) or from the source potential
//! ([`map_from_potential`]).

mod entropic;
mod exact;
mod extract;

use rayon::prelude::*;

use crate::geometry::{cost_eps, DiscreteMeasure};

pub use entropic::{solve_entropic, EntropicParams, EntropicStats};
pub use exact::{solve_exact, EXACT_CAPACITY};
pub use extract::{barycentric_images, barycentric_map, map_from_potential, MapField, DEGENERACY_FRACTION, GRADIENT_CLIP};

/// Dense row-major matrix of `cost_eps(x_i, y_j, eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    eps: f64,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn build(src: &DiscreteMeasure, tgt: &DiscreteMeasure, eps: f64) -> Self {
        let (rows, cols) = (src.len(), tgt.len());
        let targets = tgt.points();
        let mut entries = vec![0.0; rows * cols];
        entries
            .par_chunks_mut(cols)
            .zip(src.points().par_iter())
            .for_each(|(row, &x)| {
                for (c, &y) in row.iter_mut().zip(targets) {
                    *c = cost_eps(x, y, eps);
                }
            });
        Self { rows, cols, eps, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.entries.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[j * self.rows + i] = self.entries[i * self.cols + j];
            }
        }
        t
    }
}

/// Coupling between two discrete measures.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Vec<f64>,
    pub source: DiscreteMeasure,
    pub target: DiscreteMeasure,
    pub objective: f64,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn cols(&self) -> usize {
        self.target.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.coupling[i * n..(i + 1) * n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols()];
        for i in 0..self.rows() {
            for (s, &p) in sums.iter_mut().zip(self.row(i)) {
                *s += p;
            }
        }
        sums
    }

    /// Largest absolute deviation of the two marginals.
    pub fn marginal_error(&self) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(self.source.masses())
            .map(|(s, m)| (s - m).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(self.target.masses())
            .map(|(s, m)| (s - m).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `sum coupling * cost`.
    pub fn cost_against(&self, cost: &CostMatrix) -> f64 {
        self.coupling.iter().zip(cost.entries()).map(|(p, c)| p * c).sum()
    }

    /// Index pairs carrying more than `threshold` mass.
    pub fn support(&self, threshold: f64) -> Vec<(usize, usize)> {
        let n = self.cols();
        self.coupling
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > threshold)
            .map(|(k, _)| (k / n, k % n))
            .collect()
    }
}

/// Kantorovich potentials `phi_i + psi_j <= c_ij`, anchored at `phi[0] = 0`.
///
/// `phi` is the c-concave potential `u` at the source points, in the
/// convention where the map solves `D_x c(x, T(x)) = Du(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl DualPotentials {
    /// Shifts `phi` by a constant (and `psi` by its negative) so `phi[0] = 0`.
    pub fn anchored(mut self) -> Self {
        if let Some(&p0) = self.phi.first() {
            self.phi.iter_mut().for_each(|p| *p -= p0);
            self.psi.iter_mut().for_each(|q| *q += p0);
        }
        self
    }

    pub fn objective(&self, src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> f64 {
        let a: f64 = self.phi.iter().zip(src.masses()).map(|(p, m)| p * m).sum();
        let b: f64 = self.psi.iter().zip(tgt.masses()).map(|(p, m)| p * m).sum();
        a + b
    }

    /// `max_ij (phi_i + psi_j - c_ij)`; nonpositive for feasible duals.
    pub fn max_violation(&self, cost: &CostMatrix) -> f64 {
        (0..cost.rows())
            .into_par_iter()
            .map(|i| {
                cost.row(i)
                    .iter()
                    .zip(&self.psi)
                    .map(|(c, q)| self.phi[i] + q - c)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }
}
