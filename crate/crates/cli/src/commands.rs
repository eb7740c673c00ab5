//! The subcommands. Each writes its files into one directory and prints a
//! one-line summary per stage.

use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use monge_lab::counterexample::{potential_u, ray_of_point, t0_map, TriangleSpec};
use monge_lab::diagnostics::{eps_sweep, holder_fit, jacobian_field, node_diagnostics, probe_nodes, report, solve_map};
use monge_lab::instance::{DensitySpec, InstanceSpec, MaskKind};
use monge_lab::ot::MapField;
use monge_lab::transport_density::{
    beckmann_flow, beckmann_flow_isotropic, density_from_flow, flux_density, mk_residual, ray_density_at, IsotropicParams,
    MkResidual,
};
use monge_lab::{LabError, ScalarField, Vec2};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult, Metric};

/// `start:end:logN`: `N` points from `start` to `end`, equally spaced in
/// log scale, both ends included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRange {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl FromStr for LogRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected start:end:logN, got {s:?}");
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, count] = parts[..] else {
            return Err(bad());
        };
        let start: f64 = start.trim().parse().map_err(|_| bad())?;
        let end: f64 = end.trim().parse().map_err(|_| bad())?;
        let count: usize = count.trim().strip_prefix("log").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        if !(start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()) || count < 2 {
            return Err(format!("{s:?}: ends must be positive and N at least 2"));
        }
        Ok(Self { start, end, count })
    }
}

impl LogRange {
    pub fn values(&self) -> Vec<f64> {
        let (l0, l1) = (self.start.ln(), self.end.ln());
        (0..self.count)
            .map(|i| {
                if i == 0 {
                    self.start
                } else if i + 1 == self.count {
                    self.end
                } else {
                    (l0 + (l1 - l0) * i as f64 / (self.count - 1) as f64).exp()
                }
            })
            .collect()
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_owned(), source })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| CliError::Io { path: path.to_owned(), source })?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Debug, Serialize)]
struct MapSample {
    sigma: f64,
    a: f64,
    x_image: f64,
    y_image: f64,
    displacement: f64,
}

#[derive(Debug, Serialize)]
pub struct BlowupFit {
    pub exponent: f64,
    pub constant: f64,
    pub r2: f64,
    pub low_confidence: bool,
    pub samples: usize,
    /// `(x(sigma) + 2) / sigma^(2/3)` at the smallest offset.
    pub rate_ratio: f64,
}

/// Images of `(-2, sigma)` under the monotone map and a power-law fit of
/// `|T(-2, sigma) - T(-2, 0)|` against `sigma`.
pub fn counterexample(range: &LogRange, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let base = t0_map(TriangleSpec::BLOWUP.x, TriangleSpec::BLOWUP.y)?;
    let mut wtr = csv_writer(&out.join("map_samples.csv"))?;
    let mut pairs = Vec::new();
    let mut smallest = (f64::INFINITY, 0.0);
    for sigma in range.values() {
        let p = Vec2::new(TriangleSpec::BLOWUP.x, sigma);
        let ray = ray_of_point(p.x, p.y)?;
        let img = t0_map(p.x, p.y)?;
        wtr.serialize(MapSample { sigma, a: ray.a, x_image: img.x, y_image: img.y, displacement: (img - p).norm() })?;
        pairs.push((sigma, (img - base).norm()));
        if sigma < smallest.0 {
            smallest = (sigma, (img.x + 2.0) / sigma.powf(2.0 / 3.0));
        }
    }
    wtr.flush().map_err(|source| CliError::Io { path: out.join("map_samples.csv"), source })?;
    let fit = holder_fit(&pairs)?;
    let summary = BlowupFit {
        exponent: fit.exponent,
        constant: fit.constant,
        r2: fit.r2,
        low_confidence: fit.low_confidence,
        samples: pairs.len(),
        rate_ratio: smallest.1,
    };
    write_json(&out.join("holder_fit.json"), &summary)?;
    println!(
        "counterexample: {} samples, exponent {:.4} (r2 {:.5}), rate ratio {:.5}",
        pairs.len(),
        fit.exponent,
        fit.r2,
        smallest.1
    );
    Ok(())
}

fn pick_eps(cfg: &ExperimentConfig, eps: Option<f64>) -> CliResult<f64> {
    let eps = eps.unwrap_or(cfg.eps_list[0]);
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LabError::Config(format!("eps = {eps} outside (0, 1]")).into());
    }
    Ok(eps)
}

#[derive(Debug, Serialize)]
struct MapRow {
    x: f64,
    y: f64,
    x_image: f64,
    y_image: f64,
    displacement: f64,
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    eps: f64,
    iterations: Option<usize>,
    nodes: usize,
    clipped: usize,
    max_displacement: f64,
}

fn write_map(map: &MapField, path: &Path) -> CliResult<()> {
    let mut wtr = csv_writer(path)?;
    for k in map.grid.masked_indices().filter(|&k| map.valid[k]) {
        let p = map.grid.point(k);
        let q = map.image[k];
        wtr.serialize(MapRow { x: p.x, y: p.y, x_image: q.x, y_image: q.y, displacement: map.displacement[k] })?;
    }
    wtr.flush().map_err(|source| CliError::Io { path: path.to_owned(), source })
}

pub fn solve(cfg: &ExperimentConfig, eps: Option<f64>, out: &Path) -> CliResult<()> {
    let eps = pick_eps(cfg, eps)?;
    ensure_dir(out)?;
    let (map, iterations) = solve_map(&cfg.instance(), eps)?;
    write_map(&map, &out.join("map.csv"))?;
    let nodes = map.valid.iter().filter(|&&v| v).count();
    let max_displacement = (0..map.grid.len()).filter(|&k| map.valid[k]).map(|k| map.displacement[k]).fold(0.0, f64::max);
    write_json(
        &out.join("solve.json"),
        &SolveSummary { eps, iterations, nodes, clipped: map.clipped, max_displacement },
    )?;
    println!("solve: eps {eps}, {nodes} nodes, iterations {iterations:?}, max displacement {max_displacement:.6}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct FieldRow {
    x: f64,
    y: f64,
    #[serde(rename = "W")]
    w: f64,
    eig1: f64,
    eig2: f64,
    #[serde(rename = "Tnn")]
    t_nn: Option<f64>,
    #[serde(rename = "Txx")]
    t_xx: Option<f64>,
}

/// `fields.csv` holds the real parts of the eigenvalues; complex pairs are
/// counted in `report.json`.
pub fn diagnose(cfg: &ExperimentConfig, eps: Option<f64>, out: &Path) -> CliResult<()> {
    let eps = pick_eps(cfg, eps)?;
    ensure_dir(out)?;
    let (map, iterations) = solve_map(&cfg.instance(), eps)?;
    let jac = jacobian_field(&map, map.grid.hx())?;
    let nodes = probe_nodes(&map.grid, &cfg.probe);
    let mut wtr = csv_writer(&out.join("fields.csv"))?;
    for (_, d) in node_diagnostics(&map, &jac, &nodes) {
        wtr.serialize(FieldRow {
            x: d.point.x,
            y: d.point.y,
            w: d.w,
            eig1: d.eig1.re,
            eig2: d.eig2.re,
            t_nn: d.t_nu_nu,
            t_xx: d.t_xi_xi,
        })?;
    }
    wtr.flush().map_err(|source| CliError::Io { path: out.join("fields.csv"), source })?;
    let mut r = report(&map, eps, &cfg.probe)?;
    r.solver_iterations = iterations;
    write_json(&out.join("report.json"), &r)?;
    println!(
        "diagnose: eps {eps}, {} probe nodes, W in [{:.4}, {:.4}], {} real positive, Lipschitz {:.4}",
        r.node_count, r.min_w, r.max_w, r.real_positive_count, r.lipschitz_modulus
    );
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let reports = eps_sweep(&cfg.instance(), &cfg.eps_list, &cfg.probe)?;
    write_json(&out.join("reports.json"), &reports)?;
    for r in &reports {
        match &r.error {
            None => println!(
                "sweep: eps {}: max W {:.4}, Lipschitz {:.4}, {}/{} real positive",
                r.eps, r.max_w, r.lipschitz_modulus, r.real_positive_count, r.node_count
            ),
            Some(e) => println!("sweep: eps {}: failed: {e}", r.eps),
        }
    }
    let failed = reports.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        return Err(CliError::Solver(format!("{failed} of {} eps values failed", reports.len())));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DensityRow {
    x: f64,
    y: f64,
    sigma: f64,
}

#[derive(Debug, Serialize)]
pub struct DensitySummary {
    pub metric: String,
    pub nodes: usize,
    /// Total source mass the normalized measures stand for.
    pub mass: f64,
    /// Flow cost in the same units.
    pub cost: f64,
    pub iterations: Option<usize>,
    pub defect: Option<f64>,
    /// Relative L1 distance to the exact ray density (triangle instance only).
    pub ray_l1_relative: Option<f64>,
    pub mk_residual: Option<MkResidual>,
}

fn is_triangle_instance(inst: &InstanceSpec) -> bool {
    inst.grid.mask == MaskKind::TriangleAbb
        && inst.source == DensitySpec::CounterexampleF
        && inst.target == DensitySpec::CounterexampleG
}

pub fn density(cfg: &ExperimentConfig, metric: Metric, tol: f64, max_iter: usize, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let inst = cfg.instance();
    let (grid, fm, gm) = inst.build()?;
    let mut mass = 0.0;
    for k in grid.masked_indices() {
        mass += inst.source.eval(grid.point(k))? * grid.cell_area(k);
    }
    let (flow, iterations, defect) = match metric {
        Metric::Graph => (beckmann_flow(&fm, &gm, &grid)?, None, None),
        Metric::Isotropic => {
            let (flow, stats) = beckmann_flow_isotropic(&fm, &gm, &grid, IsotropicParams { max_iter, tol })?;
            (flow, Some(stats.iterations), Some(stats.defect))
        }
    };
    let (mut sigma, cost) = match metric {
        Metric::Graph => (density_from_flow(&flow), flow.graph_cost()),
        Metric::Isotropic => (flux_density(&flow), flow.isotropic_cost()),
    };
    sigma.values.iter_mut().for_each(|v| *v *= mass);
    let mut wtr = csv_writer(&out.join("density.csv"))?;
    for k in grid.masked_indices() {
        let p = grid.point(k);
        wtr.serialize(DensityRow { x: p.x, y: p.y, sigma: sigma.values[k] })?;
    }
    wtr.flush().map_err(|source| CliError::Io { path: out.join("density.csv"), source })?;
    let (ray_l1_relative, mk) = if is_triangle_instance(&inst) {
        let (mut num, mut den) = (0.0, 0.0);
        for k in grid.masked_indices() {
            let r = ray_density_at(grid.point(k))?;
            num += (sigma.values[k] - r).abs() * grid.cell_area(k);
            den += r * grid.cell_area(k);
        }
        let u = ScalarField::sample(&grid, |p| -potential_u(p.x, p.y).unwrap_or(f64::NAN));
        (Some(num / den), Some(mk_residual(&sigma, &u, &fm, &gm, mass)?))
    } else {
        (None, None)
    };
    let summary = DensitySummary {
        metric: format!("{metric:?}").to_lowercase(),
        nodes: grid.masked_count(),
        mass,
        cost: cost * mass,
        iterations,
        defect,
        ray_l1_relative,
        mk_residual: mk,
    };
    write_json(&out.join("density.json"), &summary)?;
    println!(
        "density: {} flow, cost {:.6}, iterations {:?}, ray L1 {:?}",
        summary.metric, summary.cost, iterations, ray_l1_relative
    );
    Ok(())
}
