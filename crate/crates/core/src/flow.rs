//! Time stepping of the Ginzburg-Landau heat flow
//! `u_t - Lap u + lambda^(1 - kappa(t)) (|u|^2 - 1) u = 0`
//! and of the projected (constrained) heat flow used as its lambda -> infinity oracle.
//!
//! Both schemes split each step into an explicit diffusion substep, which is
//! a convex combination of neighbor values under the stability bound, and a
//! pointwise substep: the penalty ODE (integrated exactly along rays) or a
//! normalization onto the sphere.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{l2_distance_sq, SphereField};
use crate::geometry::Grid;

/// Norm excess that signals a broken scheme rather than a tunable.
pub const NORM_BLOWUP: f64 = 1e-7;

/// Default stability safety factor for `dt = "auto"`.
pub const AUTO_CFL: f64 = 0.9;

/// `kappa(t) = arctan(t) / pi`.
pub fn kappa(t: f64) -> f64 {
    t.atan() / PI
}

pub fn kappa_dot(t: f64) -> f64 {
    1.0 / (PI * (1.0 + t * t))
}

/// Cut-off `chi`: identity below 2, constant 3 from 4 on, and the monotone
/// cubic Hermite interpolant of `(2, 2; slope 1) -> (4, 3; slope 0)` between.
pub fn chi(s: f64) -> f64 {
    if s < 2.0 {
        s
    } else if s >= 4.0 {
        3.0
    } else {
        let r = 0.5 * (s - 2.0);
        let (r2, r3) = (r * r, r * r * r);
        let h00 = 2.0 * r3 - 3.0 * r2 + 1.0;
        let h10 = r3 - 2.0 * r2 + r;
        let h01 = -2.0 * r3 + 3.0 * r2;
        // values 2 -> 3, slopes 1 -> 0, interval length 2
        2.0 * h00 + 2.0 * h10 + 3.0 * h01
    }
}

pub fn chi_dot(s: f64) -> f64 {
    if s < 2.0 {
        1.0
    } else if s >= 4.0 {
        0.0
    } else {
        1.0 - 0.5 * (s - 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub lambda: f64,
    /// Keep the `chi'((|u|^2 - 1)^2)` factor of the original scheme.
    #[serde(default)]
    pub original_form: bool,
}

impl PenaltySchedule {
    pub fn new(lambda: f64) -> Result<Self> {
        let s = PenaltySchedule {
            lambda,
            original_form: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 1.0) || !self.lambda.is_finite() {
            return Err(Error::Precondition(format!("lambda must be > 1, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `1 - kappa(t)`, in (1/2, 1] for t >= 0.
    pub fn exponent(&self, t: f64) -> f64 {
        1.0 - kappa(t)
    }

    /// `Lambda(t) = lambda^(1 - kappa(t))`.
    pub fn strength(&self, t: f64) -> f64 {
        self.lambda.powf(self.exponent(t))
    }

    /// `d Lambda / dt = -kappa'(t) ln(lambda) Lambda(t)`.
    pub fn strength_rate(&self, t: f64) -> f64 {
        -kappa_dot(t) * self.lambda.ln() * self.strength(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyIntegration {
    ExactLogistic,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    pub cfl_safety: f64,
    pub penalty_integration: PenaltyIntegration,
    pub output_stride: usize,
}

impl SolverConfig {
    /// `dt = 0.9 h^2 / (2d)`.
    pub fn auto(grid: &Grid, t_final: f64) -> Self {
        SolverConfig {
            dt: AUTO_CFL * stability_limit(grid),
            t_final,
            cfl_safety: AUTO_CFL,
            penalty_integration: PenaltyIntegration::ExactLogistic,
            output_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.output_stride = stride;
        self
    }

    /// `safety * h^2 / (2d)`.
    pub fn stability_bound(&self, grid: &Grid) -> f64 {
        self.cfl_safety * stability_limit(grid)
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Precondition(format!(
                "CFL safety factor must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Precondition(format!("dt must be positive, got {}", self.dt)));
        }
        let bound = self.stability_bound(grid);
        if self.dt > bound * (1.0 + 1e-12) {
            return Err(Error::CflViolated { dt: self.dt, bound });
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Precondition(format!("T must be positive, got {}", self.t_final)));
        }
        if self.output_stride == 0 {
            return Err(Error::Precondition("output stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of steps and the effective (never larger) step that lands on `T`.
    pub fn step_plan(&self) -> (usize, f64) {
        let steps = ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize;
        (steps, self.t_final / steps as f64)
    }
}

/// `h^2 / (2d)`: the largest step keeping explicit diffusion a convex combination.
pub fn stability_limit(grid: &Grid) -> f64 {
    grid.spacing() * grid.spacing() / (2.0 * grid.dim() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FlowMode {
    Glhf(PenaltySchedule),
    Projected,
}

impl FlowMode {
    pub fn schedule(&self) -> Option<&PenaltySchedule> {
        match self {
            FlowMode::Glhf(s) => Some(s),
            FlowMode::Projected => None,
        }
    }
}

/// Per-step scalars, evaluated on the state at the start of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub gl_energy: f64,
    pub dirichlet_energy: f64,
    /// `dt * integral Lambda(t) (|u|^2 - 1)^2`.
    pub penalty_increment: f64,
    pub max_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub field: Arc<SphereField>,
}

/// Time-ordered snapshots of a run plus the per-step records.
///
/// Snapshot `k` represents the interval `[t_k, t_{k+1})` in all time
/// quadratures (left-endpoint rectangle rule).
#[derive(Clone, Debug)]
pub struct Trajectory {
    snapshots: Vec<Snapshot>,
    records: Vec<StepRecord>,
    schedule: Option<PenaltySchedule>,
    dt: f64,
}

impl Trajectory {
    pub fn new(snapshots: Vec<Snapshot>, records: Vec<StepRecord>, schedule: Option<PenaltySchedule>, dt: f64) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Precondition("trajectory needs at least one snapshot".into()));
        }
        for w in snapshots.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Precondition("snapshot times must increase strictly".into()));
            }
            w[0].field.check_layout(&w[1].field)?;
        }
        Ok(Trajectory {
            snapshots,
            records,
            schedule,
            dt,
        })
    }

    /// A time-independent trajectory holding `field` at every time in `times`.
    pub fn frozen(field: SphereField, times: &[f64]) -> Result<Self> {
        let shared = Arc::new(field);
        let snapshots = times
            .iter()
            .enumerate()
            .map(|(step, &t)| Snapshot {
                step,
                t,
                field: shared.clone(),
            })
            .collect();
        let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
        Trajectory::new(snapshots, Vec::new(), None, dt)
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn schedule(&self) -> Option<&PenaltySchedule> {
        self.schedule.as_ref()
    }

    /// Solver step (0 for synthetic trajectories with a single time).
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.snapshots[0].field.grid()
    }

    pub fn t_start(&self) -> f64 {
        self.snapshots[0].t
    }

    pub fn t_final(&self) -> f64 {
        self.snapshots[self.snapshots.len() - 1].t
    }

    pub fn last(&self) -> &SphereField {
        &self.snapshots[self.snapshots.len() - 1].field
    }

    /// `Lambda(t)` of the run, zero for constrained trajectories.
    pub fn penalty_strength(&self, t: f64) -> f64 {
        self.schedule.map_or(0.0, |s| s.strength(t))
    }

    /// Interval `[t_k, t_{k+1})` represented by snapshot `k` (empty for the last).
    pub fn interval(&self, k: usize) -> (f64, f64) {
        let t0 = self.snapshots[k].t;
        let t1 = self.snapshots.get(k + 1).map_or(t0, |s| s.t);
        (t0, t1)
    }
}

/// `u + dt Lap_h u` at interior nodes; boundary nodes are copied.
pub fn diffusion_substep(field: &SphereField, dt: f64) -> SphereField {
    let grid = field.grid().clone();
    let nc = field.ncomp();
    let r = dt / (grid.spacing() * grid.spacing());
    let strides = grid.strides().to_vec();
    let src = field.values();
    let mut out = field.clone();
    let dst = out.values_mut();
    let center_weight = 1.0 - 2.0 * strides.len() as f64 * r;
    for &i in grid.interior_nodes() {
        for c in 0..nc {
            let mut nb = 0.0;
            for &s in &strides {
                nb += src[(i + s) * nc + c] + src[(i - s) * nc + c];
            }
            dst[i * nc + c] = center_weight * src[i * nc + c] + r * nb;
        }
    }
    out
}

/// Exact solution of `w' = 2 Lambda w (1 - w)` after time `dt`.
pub fn logistic(w0: f64, rate: f64, dt: f64) -> f64 {
    if w0 <= 0.0 {
        return 0.0;
    }
    w0 / (w0 + (1.0 - w0) * (-2.0 * rate * dt).exp())
}

/// RK4 for `w' = 2 Lambda chi'((w - 1)^2) w (1 - w)` with substeps fine
/// enough that `2 Lambda dt_sub <= 0.2`.
pub fn chi_weighted_logistic_rk4(w0: f64, rate: f64, dt: f64) -> f64 {
    let f = |w: f64| 2.0 * rate * chi_dot((w - 1.0) * (w - 1.0)) * w * (1.0 - w);
    let n = ((2.0 * rate * dt / 0.2).ceil() as usize).max(1);
    let hs = dt / n as f64;
    let mut w = w0;
    for _ in 0..n {
        let k1 = f(w);
        let k2 = f(w + 0.5 * hs * k1);
        let k3 = f(w + 0.5 * hs * k2);
        let k4 = f(w + hs * k3);
        w += hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    w
}

/// Penalty substep at interior nodes with strength `rate` held over `dt`.
pub fn penalty_substep(field: &mut SphereField, rate: f64, dt: f64, integration: PenaltyIntegration, original_form: bool) {
    let grid = field.grid().clone();
    for &i in grid.interior_nodes() {
        let w = field.norm_sq_at(i);
        if w <= 0.0 {
            continue;
        }
        let scale = match integration {
            PenaltyIntegration::ExactLogistic => {
                let w1 = if original_form {
                    chi_weighted_logistic_rk4(w, rate, dt)
                } else {
                    logistic(w, rate, dt)
                };
                (w1 / w).sqrt()
            }
            PenaltyIntegration::Explicit => {
                let weight = if original_form {
                    chi_dot((w - 1.0) * (w - 1.0))
                } else {
                    1.0
                };
                1.0 + dt * rate * weight * (1.0 - w)
            }
        };
        field.value_mut(i).iter_mut().for_each(|v| *v *= scale);
    }
}

fn check_norms(field: &SphereField, t: f64) -> Result<()> {
    let (n, node) = field.max_norm();
    if n > 1.0 + NORM_BLOWUP {
        return Err(Error::NormBlowup { node, norm: n, t });
    }
    Ok(())
}

/// One splitting step of the Ginzburg-Landau flow from time `t`.
pub fn glhf_step(field: &SphereField, t: f64, cfg: &SolverConfig, sched: &PenaltySchedule) -> Result<SphereField> {
    cfg.validate(field.grid())?;
    glhf_step_unchecked(field, t, cfg.dt, cfg, sched)
}

fn glhf_step_unchecked(field: &SphereField, t: f64, dt: f64, cfg: &SolverConfig, sched: &PenaltySchedule) -> Result<SphereField> {
    let mut next = diffusion_substep(field, dt);
    penalty_substep(&mut next, sched.strength(t), dt, cfg.penalty_integration, sched.original_form);
    check_norms(&next, t + dt)?;
    Ok(next)
}

/// Diffusion substep followed by pointwise normalization.
pub fn projected_flow_step(field: &SphereField, t: f64, cfg: &SolverConfig) -> Result<SphereField> {
    cfg.validate(field.grid())?;
    projected_step_unchecked(field, t, cfg.dt)
}

fn projected_step_unchecked(field: &SphereField, _t: f64, dt: f64) -> Result<SphereField> {
    let mut next = diffusion_substep(field, dt);
    let grid = next.grid().clone();
    for &i in grid.interior_nodes() {
        let n = next.norm_sq_at(i).sqrt();
        if n < 1e-14 {
            return Err(Error::NearZeroVector { node: i, norm: n });
        }
        next.value_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(next)
}

fn record(field: &SphereField, step: usize, t: f64, dt: f64, strength: f64) -> StepRecord {
    let grid = field.grid();
    let vol = grid.cell_volume();
    let dirichlet = field.dirichlet_energy();
    let mut defect = 0.0;
    for &i in grid.interior_nodes() {
        let w = field.norm_sq_at(i);
        defect += (w - 1.0) * (w - 1.0);
    }
    defect *= vol;
    StepRecord {
        step,
        t,
        gl_energy: 0.5 * dirichlet + 0.25 * strength * defect,
        dirichlet_energy: dirichlet,
        penalty_increment: dt * strength * defect,
        max_norm: field.max_norm().0,
    }
}

/// Runs the flow from `u0` to `cfg.t_final`.
///
/// Snapshots are kept every `output_stride` steps and at the final time; a
/// record is kept for every step plus the final state.
pub fn run_flow(u0: &SphereField, cfg: &SolverConfig, mode: FlowMode) -> Result<Trajectory> {
    let grid = u0.grid().clone();
    cfg.validate(&grid)?;
    if let Some(s) = mode.schedule() {
        s.validate()?;
    }
    let (n0, node) = u0.max_norm();
    if n0 > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!("initial data has |u| = {n0} > 1 at node {node}")));
    }
    let (steps, dt) = cfg.step_plan();
    let mut snapshots = Vec::with_capacity(steps / cfg.output_stride + 2);
    let mut records = Vec::with_capacity(steps + 1);
    let mut u = u0.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        let strength = mode.schedule().map_or(0.0, |s| s.strength(t));
        records.push(record(&u, k, t, dt, strength));
        let next = match &mode {
            FlowMode::Glhf(s) => glhf_step_unchecked(&u, t, dt, cfg, s)?,
            FlowMode::Projected => projected_step_unchecked(&u, t, dt)?,
        };
        if k % cfg.output_stride == 0 {
            snapshots.push(Snapshot {
                step: k,
                t,
                field: Arc::new(u),
            });
        }
        u = next;
    }
    let t_end = cfg.t_final;
    let strength = mode.schedule().map_or(0.0, |s| s.strength(t_end));
    records.push(record(&u, steps, t_end, 0.0, strength));
    snapshots.push(Snapshot {
        step: steps,
        t: t_end,
        field: Arc::new(u),
    });
    Trajectory::new(snapshots, records, mode.schedule().copied(), dt)
}

pub fn run_glhf(u0: &SphereField, cfg: &SolverConfig, sched: &PenaltySchedule) -> Result<Trajectory> {
    run_flow(u0, cfg, FlowMode::Glhf(*sched))
}

pub fn run_projected(u0: &SphereField, cfg: &SolverConfig) -> Result<Trajectory> {
    run_flow(u0, cfg, FlowMode::Projected)
}

/// `integral over Q(T) of Lambda (|u|^2 - 1)^2`, left-endpoint rule over every step.
pub fn penalty_integral(traj: &Trajectory) -> f64 {
    traj.records().iter().fold(0.0, |acc, r| acc + r.penalty_increment)
}

/// `L^2(Q)` distance between two trajectories sampled at the same times.
pub fn spacetime_l2_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.snapshots().len() != b.snapshots().len() {
        return Err(Error::Precondition("trajectories have different snapshot counts".into()));
    }
    let mut acc = 0.0;
    for (k, (sa, sb)) in a.snapshots().iter().zip(b.snapshots()).enumerate() {
        if (sa.t - sb.t).abs() > 1e-12 {
            return Err(Error::Precondition(format!("snapshot {k} times differ: {} vs {}", sa.t, sb.t)));
        }
        sa.field.check_layout(&sb.field)?;
        let (t0, t1) = a.interval(k);
        acc += (t1 - t0) * l2_distance_sq(&sa.field, &sb.field);
    }
    Ok(acc.sqrt())
}
