use std::path::{Path, PathBuf};

use monge_lab::instance::{DensitySpec, GridSpec, InstanceSpec, SolverSpec};
use monge_lab::{LabError, Rect};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// One experiment: an instance, the eps values to run and where to write.
///
/// ```json
/// {
///   "grid": {"nx": 33, "ny": 33, "bounds": {"xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1}, "mask": "rect"},
///   "source": {"kind": "gaussian_mixture", "components": [{"center": [0.3, 0.35], "width": 0.15, "weight": 1}], "background": 0.5},
///   "target": {"kind": "uniform"},
///   "eps_list": [0.4, 0.2, 0.1, 0.05],
///   "solver": {"mode": "entropic", "lambda": 0.01, "tol": 1e-6, "max_iter": 20000},
///   "probe": {"xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1},
///   "output_dir": "out",
///   "seed": 7
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub source: DensitySpec,
    pub target: DensitySpec,
    pub eps_list: Vec<f64>,
    pub solver: SolverSpec,
    pub probe: Rect,
    pub output_dir: PathBuf,
    /// Seeds every random choice; the solvers themselves are deterministic.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.eps_list.is_empty() {
            return Err(LabError::Config("eps_list is empty".into()));
        }
        if let Some(e) = self.eps_list.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
            return Err(LabError::Config(format!("eps = {e} outside (0, 1]")));
        }
        if !self.probe.is_nondegenerate() {
            return Err(LabError::Config(format!("degenerate probe {:?}", self.probe)));
        }
        self.instance().validate()
    }

    pub fn instance(&self) -> InstanceSpec {
        InstanceSpec {
            grid: self.grid.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            solver: self.solver.clone(),
        }
    }

    /// `output_dir`, unless overridden.
    pub fn output(&self, over: Option<&Path>) -> PathBuf {
        over.map_or_else(|| self.output_dir.clone(), Path::to_owned)
    }
}
