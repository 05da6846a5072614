//! Experiment configuration: one JSON file fully describes a run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sphereflow_core::diagnostics::MonotonicityForm;
use sphereflow_core::field::{InitialData, SphereField};
use sphereflow_core::flow::{FlowMode, PenaltyIntegration, PenaltySchedule, SolverConfig, AUTO_CFL};
use sphereflow_core::geometry::{Domain, Grid};
use sphereflow_core::singular::{EnergyMode, SingularConfig};
use sphereflow_core::Error as CoreError;

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: Domain,
    pub h: f64,
    #[serde(rename = "D", alias = "target_dim")]
    pub target_dim: usize,
    pub initial: InitialData,
    pub solver: SolverSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the seed of `random-unit` initial data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Write every n-th stored snapshot (the final one is always written).
    #[serde(default = "one")]
    pub snapshot_stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    GlhfSimplified,
    GlhfOriginal,
    Projected,
    /// No evolution: the initial field held fixed at every output time.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Keyword(String),
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Keyword("auto".into())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(rename = "T", alias = "t_final")]
    pub t_final: f64,
    #[serde(default)]
    pub dt: StepSize,
    #[serde(default = "one")]
    pub output_stride: usize,
    #[serde(default = "exact_logistic")]
    pub penalty_integration: PenaltyIntegration,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Rows of `cylinders.csv`.
    pub cylinders: Vec<CylinderEntry>,
    pub monotonicity: Option<MonotonicitySpec>,
    pub main2: Option<Main2Spec>,
    pub reverse_poincare: Vec<CylinderEntry>,
    pub hybrid: Option<HybridSpec>,
    pub singular: Option<SingularSpec>,
    pub one_sided: bool,
    pub certificate: Option<CertificateSpec>,
    /// Also run the projected flow and report distances to it.
    pub compare_projected: bool,
    /// Cylinder whose Dirichlet-mode scaled energy is reported by `sweep`.
    pub probe: Option<CylinderEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderEntry {
    pub t0: f64,
    pub x0: Vec<f64>,
    #[serde(rename = "R")]
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicitySpec {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub pairs: Vec<[f64; 2]>,
    /// Empty means both forms.
    #[serde(default)]
    pub forms: Vec<MonotonicityForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_samples: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Main2Spec {
    pub t0: f64,
    pub x0: Vec<f64>,
    #[serde(rename = "R0")]
    pub r0: f64,
    pub mu0: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(default)]
    pub time_weighted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridSpec {
    pub cylinders: Vec<CylinderEntry>,
    pub eps0: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularSpec {
    pub eps0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_deltas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<EnergyMode>,
}

impl SingularSpec {
    pub fn resolve(&self, grid: &Grid) -> SingularConfig {
        let mut cfg = SingularConfig::for_grid(grid, self.eps0);
        if let Some(r) = &self.radii {
            cfg.radii = r.clone();
        }
        if let Some(s) = self.space_stride {
            cfg.space_stride = s;
        }
        if let Some(s) = self.time_stride {
            cfg.time_stride = s;
        }
        if let Some(b) = &self.box_deltas {
            cfg.box_deltas = b.clone();
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub eps0: f64,
    /// Defaults to dyadic radii `diam/2, diam/4, ...` down to `2h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

fn exact_logistic() -> PenaltyIntegration {
    PenaltyIntegration::ExactLogistic
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// How the trajectory is produced.
#[derive(Clone, Debug)]
pub enum Plan {
    Flow(FlowMode),
    Frozen,
}

/// A config that passed every check that can be made without computing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub grid: Arc<Grid>,
    pub u0: SphereField,
    pub solver: SolverConfig,
    pub plan: Plan,
}

impl Prepared {
    /// Output times: every `output_stride` steps plus the final time.
    pub fn output_times(&self) -> Vec<f64> {
        let (steps, dt) = self.solver.step_plan();
        let stride = self.solver.output_stride;
        let mut times: Vec<f64> = (0..steps).step_by(stride).map(|k| k as f64 * dt).collect();
        times.push(self.solver.t_final);
        times
    }

    pub fn schedule(&self) -> Option<&PenaltySchedule> {
        match &self.plan {
            Plan::Flow(mode) => mode.schedule(),
            Plan::Frozen => None,
        }
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn invalid(e: CoreError) -> CliError {
    CliError::Invalid(e)
}

fn precondition(msg: String) -> CliError {
    CliError::Invalid(CoreError::Precondition(msg))
}

fn check_point(what: &str, t0: f64, x0: &[f64], d: usize, t_final: f64) -> Result<(), CliError> {
    if x0.len() != d {
        return Err(precondition(format!("{what}: x0 has {} coordinates, domain has {d}", x0.len())));
    }
    if !(t0 > 0.0 && t0 <= t_final + 1e-12) {
        return Err(precondition(format!("{what}: t0 = {t0} must lie in (0, T = {t_final}]")));
    }
    Ok(())
}

fn check_cylinder(what: &str, c: &CylinderEntry, grid: &Grid, t_final: f64) -> Result<(), CliError> {
    check_point(what, c.t0, &c.x0, grid.dim(), t_final)?;
    let h = grid.spacing();
    if c.radius < 2.0 * h * (1.0 - 1e-12) {
        return Err(precondition(format!("{what}: R = {} is below 2h = {}", c.radius, 2.0 * h)));
    }
    Ok(())
}

/// Validates `cfg` against every module precondition before any compute.
pub fn prepare(mut cfg: ExperimentConfig) -> Result<Prepared, CliError> {
    if let (Some(seed), InitialData::RandomUnit { seed: s }) = (cfg.seed, &mut cfg.initial) {
        *s = seed;
    }
    if cfg.snapshot_stride == 0 {
        return Err(precondition("snapshot_stride must be >= 1".into()));
    }
    let grid = Arc::new(Grid::build(cfg.domain.clone(), cfg.h).map_err(invalid)?);
    let u0 = cfg.initial.generate(&grid, cfg.target_dim).map_err(invalid)?;
    let s = &cfg.solver;
    let solver = match &s.dt {
        StepSize::Fixed(dt) => SolverConfig {
            dt: *dt,
            t_final: s.t_final,
            cfl_safety: 1.0,
            penalty_integration: s.penalty_integration,
            output_stride: s.output_stride,
        },
        StepSize::Keyword(k) if k == "auto" => SolverConfig {
            cfl_safety: AUTO_CFL,
            penalty_integration: s.penalty_integration,
            output_stride: s.output_stride,
            ..SolverConfig::auto(&grid, s.t_final)
        },
        StepSize::Keyword(k) => return Err(CliError::Config(format!("dt must be a number or \"auto\", got {k:?}"))),
    };
    let plan = match s.mode {
        RunMode::GlhfSimplified | RunMode::GlhfOriginal => {
            let lambda = s
                .lambda
                .ok_or_else(|| CliError::Config("GLHF modes need solver.lambda".into()))?;
            let mut sched = PenaltySchedule::new(lambda).map_err(invalid)?;
            sched.original_form = s.mode == RunMode::GlhfOriginal;
            Plan::Flow(FlowMode::Glhf(sched))
        }
        RunMode::Projected => Plan::Flow(FlowMode::Projected),
        RunMode::Frozen => Plan::Frozen,
    };
    match plan {
        Plan::Flow(_) => solver.validate(&grid).map_err(invalid)?,
        // nothing is stepped, so the stability bound does not apply
        Plan::Frozen => {
            if !(solver.dt > 0.0 && solver.dt.is_finite() && solver.t_final > 0.0 && solver.t_final.is_finite()) {
                return Err(precondition(format!("need dt > 0 and T > 0; got dt = {}, T = {}", solver.dt, solver.t_final)));
            }
            if solver.output_stride == 0 {
                return Err(precondition("output stride must be >= 1".into()));
            }
        }
    }
    if let Plan::Flow(_) = plan {
        let (n0, node) = u0.max_norm();
        if n0 > 1.0 + 1e-12 {
            return Err(precondition(format!("initial data has |u| = {n0} > 1 at node {node}")));
        }
    }
    validate_diagnostics(&cfg, &grid, solver.t_final)?;
    Ok(Prepared {
        config: cfg,
        grid,
        u0,
        solver,
        plan,
    })
}

fn validate_diagnostics(cfg: &ExperimentConfig, grid: &Grid, t_final: f64) -> Result<(), CliError> {
    let diag = &cfg.diagnostics;
    let d = grid.dim();
    for c in &diag.cylinders {
        check_cylinder("cylinders", c, grid, t_final)?;
    }
    if let Some(p) = &diag.probe {
        check_cylinder("probe", p, grid, t_final)?;
    }
    if let Some(m) = &diag.monotonicity {
        check_point("monotonicity", m.t0, &m.x0, d, t_final)?;
        if m.pairs.is_empty() {
            return Err(precondition("monotonicity: no (R1, R2) pairs".into()));
        }
        for &[r1, r2] in &m.pairs {
            if !(r1 > 0.0 && r1 <= r2 && r2 < (m.t0 / 4.0).sqrt()) {
                return Err(precondition(format!(
                    "monotonicity: need 0 < R1 <= R2 < sqrt(t0/4) = {}; got ({r1}, {r2})",
                    (m.t0 / 4.0).sqrt()
                )));
            }
        }
        if m.r_samples.is_some_and(|n| n < 2) {
            return Err(precondition("monotonicity: r_samples must be >= 2".into()));
        }
    }
    if let Some(m) = &diag.main2 {
        if m.x0.len() != d {
            return Err(precondition(format!("main2: x0 has {} coordinates, domain has {d}", m.x0.len())));
        }
        if !(m.r0 > 0.0 && m.r0 < 0.5 * m.t0.sqrt()) {
            return Err(precondition(format!("main2: need 0 < R0 < sqrt(t0)/2; got R0 = {}, t0 = {}", m.r0, m.t0)));
        }
    }
    for c in &diag.reverse_poincare {
        check_cylinder("reverse_poincare", c, grid, t_final)?;
        check_lower_window("reverse_poincare", c)?;
    }
    if let Some(hy) = &diag.hybrid {
        if !(hy.eps0 > 0.0) {
            return Err(precondition("hybrid: eps0 must be positive".into()));
        }
        for c in &hy.cylinders {
            check_cylinder("hybrid", c, grid, t_final)?;
            check_lower_window("hybrid", c)?;
        }
    }
    if let Some(s) = &diag.singular {
        s.resolve(grid).validate(grid).map_err(invalid)?;
    }
    if let Some(c) = &diag.certificate {
        check_point("certificate", c.t0, &c.x0, d, t_final)?;
        if !(c.eps0 > 0.0) {
            return Err(precondition("certificate: eps0 must be positive".into()));
        }
        if let Some(r) = &c.radii {
            if r.is_empty() || r.iter().any(|&r| r < 2.0 * grid.spacing() * (1.0 - 1e-12)) {
                return Err(precondition("certificate: radii must be nonempty and >= 2h".into()));
            }
        }
    }
    Ok(())
}

fn check_lower_window(what: &str, c: &CylinderEntry) -> Result<(), CliError> {
    let lo = c.t0 - 4.0 * c.radius * c.radius;
    if lo < -1e-12 {
        return Err(precondition(format!("{what}: P_2R reaches t = {lo} < 0")));
    }
    Ok(())
}
