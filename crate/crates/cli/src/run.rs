//! `sphereflow run`: one trajectory plus the diagnostic batch its config requests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use sphereflow_core::diagnostics::{
    energy_report, fit_hybrid, hybrid_report, main2_lhs, monotonicity_report, reverse_poincare_ratio, CylinderSpec,
    Density, MonotonicityForm, MonotonicityOptions, SpacetimePoint, TrajectoryCache,
};
use sphereflow_core::elliptic::{solve_harmonic_extension, BoundaryData, BoundaryStencil, EllipticOptions};
use sphereflow_core::field::{l2_distance, SphereField};
use sphereflow_core::flow::{penalty_integral, run_flow, run_projected, spacetime_l2_distance, FlowMode, Trajectory};
use sphereflow_core::io::write_snapshot;
use sphereflow_core::singular::{
    detect_singular_set, dyadic_radii, local_scaled_energy, small_energy_certificate, EnergyMode,
};
use sphereflow_core::stereo::one_sided_monitor;

use crate::artifacts::{header, numbered, Artifacts, Manifest};
use crate::config::{CylinderEntry, Plan, Prepared, RunMode};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergySummary {
    pub t: f64,
    pub gl_energy: f64,
    pub dirichlet_energy: f64,
    pub max_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectedComparison {
    pub final_distance: f64,
    pub spacetime_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub lambda: Option<f64>,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub snapshots: usize,
    pub t_final: f64,
    pub penalty_integral: f64,
    /// Largest `|u|` over every recorded state.
    pub max_norm: f64,
    pub initial: EnergySummary,
    #[serde(rename = "final")]
    pub final_state: EnergySummary,
    pub projected: Option<ProjectedComparison>,
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
    pub manifest: Manifest,
}

/// Integrates the configured flow, or freezes `u0` in frozen mode.
pub fn simulate(prep: &Prepared) -> Result<Trajectory, CliError> {
    Ok(match &prep.plan {
        Plan::Flow(mode) => run_flow(&prep.u0, &prep.solver, *mode)?,
        Plan::Frozen => Trajectory::frozen(prep.u0.clone(), &prep.output_times())?,
    })
}

/// Runs `f` on a dedicated pool when a thread count is given.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot build a pool of {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn state_summary(field: &SphereField, t: f64, strength: f64) -> EnergySummary {
    let e = energy_report(field, strength);
    EnergySummary {
        t,
        gl_energy: e.gl_energy,
        dirichlet_energy: e.dirichlet_energy,
        max_norm: field.max_norm().0,
    }
}

pub fn summarize(prep: &Prepared, traj: &Trajectory, projected: Option<ProjectedComparison>) -> RunSummary {
    let snaps = traj.snapshots();
    let first = &snaps[0];
    let last = &snaps[snaps.len() - 1];
    let max_norm = traj
        .records()
        .iter()
        .map(|r| r.max_norm)
        .chain(snaps.iter().map(|s| s.field.max_norm().0))
        .fold(0.0, f64::max);
    RunSummary {
        mode: prep.config.solver.mode,
        lambda: prep.schedule().map(|s| s.lambda),
        h: prep.grid.spacing(),
        dt: prep.solver.step_plan().1,
        steps: prep.solver.step_plan().0,
        snapshots: snaps.len(),
        t_final: traj.t_final(),
        penalty_integral: penalty_integral(traj),
        max_norm,
        initial: state_summary(&first.field, first.t, traj.penalty_strength(first.t)),
        final_state: state_summary(&last.field, last.t, traj.penalty_strength(last.t)),
        projected,
    }
}

/// Distances between a GLHF trajectory and the projected flow from the same data.
pub fn compare_with_projected(prep: &Prepared, traj: &Trajectory) -> Result<Option<ProjectedComparison>, CliError> {
    if !matches!(prep.plan, Plan::Flow(FlowMode::Glhf(_))) {
        return Ok(None);
    }
    let proj = run_projected(&prep.u0, &prep.solver)?;
    Ok(Some(ProjectedComparison {
        final_distance: l2_distance(traj.last(), proj.last())?,
        spacetime_distance: spacetime_l2_distance(traj, &proj)?,
    }))
}

pub fn run_experiment(prep: &Prepared, out_dir: &Path, threads: Option<usize>) -> Result<RunOutcome, CliError> {
    let mut art = Artifacts::create(out_dir)?;
    art.write_json("config.json", &prep.config)?;
    let traj = simulate(prep)?;
    write_trajectory_csv(&mut art, &traj)?;
    write_energy_csv(&mut art, &traj)?;
    write_snapshots(&mut art, prep, &traj)?;
    let projected = if prep.config.diagnostics.compare_projected {
        let p = compare_with_projected(prep, &traj)?;
        if p.is_none() {
            log::warn!("compare_projected ignored: the run is not a GLHF run");
        }
        p
    } else {
        None
    };
    with_threads(threads, || run_diagnostics(prep, &traj, &mut art))??;
    let summary = summarize(prep, &traj, projected);
    art.write_json("summary.json", &summary)?;
    let manifest = art.finish("run")?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary,
        manifest,
    })
}

fn write_trajectory_csv(art: &mut Artifacts, traj: &Trajectory) -> Result<(), CliError> {
    let cols = header(&["step", "t", "gl_energy", "dirichlet_energy", "penalty_increment", "max_norm"]);
    let rows: Vec<(usize, f64, f64, f64, f64, f64)> = if traj.records().is_empty() {
        traj.snapshots()
            .iter()
            .map(|s| {
                let e = energy_report(&s.field, traj.penalty_strength(s.t));
                (s.step, s.t, e.gl_energy, e.dirichlet_energy, 0.0, s.field.max_norm().0)
            })
            .collect()
    } else {
        traj.records()
            .iter()
            .map(|r| (r.step, r.t, r.gl_energy, r.dirichlet_energy, r.penalty_increment, r.max_norm))
            .collect()
    };
    art.write_csv("trajectory.csv", &cols, &rows)
}

fn write_energy_csv(art: &mut Artifacts, traj: &Trajectory) -> Result<(), CliError> {
    let cols = header(&[
        "snapshot",
        "step",
        "t",
        "gl_energy",
        "dirichlet_energy",
        "penalty_part",
        "penalty_strength",
        "max_norm",
    ]);
    let rows: Vec<_> = traj
        .snapshots()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let strength = traj.penalty_strength(s.t);
            let e = energy_report(&s.field, strength);
            (k, s.step, s.t, e.gl_energy, e.dirichlet_energy, e.penalty_part, strength, s.field.max_norm().0)
        })
        .collect();
    art.write_csv("energy.csv", &cols, &rows)
}

fn write_snapshots(art: &mut Artifacts, prep: &Prepared, traj: &Trajectory) -> Result<(), CliError> {
    let snaps = traj.snapshots();
    let stride = prep.config.snapshot_stride;
    let tag = match prep.config.solver.mode {
        RunMode::Frozen => "frozen",
        _ => "u",
    };
    let mut previous: Option<&Arc<SphereField>> = None;
    for (k, s) in snaps.iter().enumerate() {
        let is_last = k + 1 == snaps.len();
        if k % stride != 0 && !is_last {
            continue;
        }
        // a frozen trajectory shares one field; store it once
        if previous.is_some_and(|p| Arc::ptr_eq(p, &s.field)) {
            continue;
        }
        previous = Some(&s.field);
        let stem = art.path(&format!("snapshots/snap_{k:05}"))?;
        let (bin, json) = write_snapshot(&stem, &s.field, s.t, s.step, traj.schedule(), tag)?;
        art.track(bin);
        art.track(json);
    }
    Ok(())
}

fn point(t0: f64, x0: &[f64]) -> SpacetimePoint {
    SpacetimePoint::new(t0, x0.to_vec())
}

fn cylinder(c: &CylinderEntry) -> CylinderSpec {
    CylinderSpec::new(point(c.t0, &c.x0), c.radius)
}

/// Boundary-data harmonic extension used by the reverse Poincare and hybrid reports.
fn harmonic_reference(u0: &SphereField) -> Result<SphereField, CliError> {
    let opts = EllipticOptions {
        stencil: BoundaryStencil::Staircase,
        ..EllipticOptions::default()
    };
    Ok(solve_harmonic_extension(u0.grid(), BoundaryData::Nodes(u0), &opts)?.field)
}

pub fn run_diagnostics(prep: &Prepared, traj: &Trajectory, art: &mut Artifacts) -> Result<(), CliError> {
    let diag = &prep.config.diagnostics;
    let cache = TrajectoryCache::new(traj);
    let d = prep.grid.dim();

    if !diag.cylinders.is_empty() {
        let mut cols = header(&["t0"]);
        cols.extend(numbered("x0_", d));
        cols.extend(header(&["R", "measure", "energy_grad_sq", "energy_gl", "mbar_gl", "mbar_dirichlet"]));
        let mut rows = Vec::with_capacity(diag.cylinders.len());
        for c in &diag.cylinders {
            let z0 = point(c.t0, &c.x0);
            let (grad, measure) = cache.cylinder_energy(&z0, c.radius, Density::GradientSquared)?;
            let (gl, _) = cache.cylinder_energy(&z0, c.radius, Density::GinzburgLandau)?;
            let mut row = vec![c.t0];
            row.extend(&c.x0);
            row.extend([
                c.radius,
                measure,
                grad,
                gl,
                local_scaled_energy(&cache, &z0, c.radius, EnergyMode::Gl)?,
                local_scaled_energy(&cache, &z0, c.radius, EnergyMode::Dirichlet)?,
            ]);
            rows.push(row);
        }
        art.write_csv("cylinders.csv", &cols, &rows)?;
    }

    if let Some(m) = &diag.monotonicity {
        let forms = if m.forms.is_empty() {
            vec![MonotonicityForm::Linear, MonotonicityForm::Exponential]
        } else {
            m.forms.clone()
        };
        let z0 = point(m.t0, &m.x0);
        let mut reports = Vec::new();
        for form in forms {
            let mut opts = MonotonicityOptions {
                form,
                ..MonotonicityOptions::default()
            };
            if let Some(n) = m.r_samples {
                opts.r_samples = n;
            }
            for &[r1, r2] in &m.pairs {
                reports.push(monotonicity_report(&cache, &z0, r1, r2, &opts)?);
            }
        }
        let cols = header(&[
            "form",
            "R1",
            "R2",
            "inner_energy",
            "speed_term",
            "lhs",
            "outer_energy",
            "mu0",
            "C",
            "rhs",
            "remainder",
            "defect",
        ]);
        let rows: Vec<_> = reports
            .iter()
            .map(|r| {
                let form = match r.form {
                    MonotonicityForm::Linear => "linear",
                    MonotonicityForm::Exponential => "exponential",
                };
                (form, r.r1, r.r2, r.inner_energy, r.speed_term, r.lhs(), r.outer_energy, r.mu0, r.c, r.rhs, r.remainder, r.defect)
            })
            .collect();
        art.write_csv("monotonicity.csv", &cols, &rows)?;
        art.write_json("monotonicity.json", &json!({ "t0": m.t0, "x0": m.x0, "reports": reports }))?;
    }

    if let Some(m) = &diag.main2 {
        let terms = main2_lhs(&prep.u0, &point(m.t0, &m.x0), m.r0, m.mu0, m.c, m.time_weighted)?;
        art.write_json(
            "main2.json",
            &json!({ "input": m, "terms": terms, "bracket": terms.bracket() }),
        )?;
    }

    let hybrid_cyls = diag.hybrid.as_ref().map_or(&[][..], |h| &h.cylinders[..]);
    if !diag.reverse_poincare.is_empty() || !hybrid_cyls.is_empty() {
        let h0 = harmonic_reference(&prep.u0)?;
        let stem = art.path("snapshots/h0")?;
        let (bin, json_path) = write_snapshot(&stem, &h0, 0.0, 0, None, "h0")?;
        art.track(bin);
        art.track(json_path);
        if !diag.reverse_poincare.is_empty() {
            let mut out = Vec::new();
            for c in &diag.reverse_poincare {
                let rp = reverse_poincare_ratio(&cache, &h0, &cylinder(c))?;
                let rhs = rp.rhs_without_constant();
                out.push(json!({
                    "cylinder": c,
                    "report": rp,
                    "rhs_without_constant": rhs,
                    "ratio": if rhs > 0.0 { Some(rp.lhs / rhs) } else { None },
                }));
            }
            art.write_json("reverse_poincare.json", &out)?;
        }
        if let Some(hy) = &diag.hybrid {
            let c_grid = MonotonicityOptions::default().c_grid;
            let mut out = Vec::new();
            for c in &hy.cylinders {
                let terms = hybrid_report(&cache, &h0, &cylinder(c))?;
                let fitted = fit_hybrid(&terms, hy.eps0, &c_grid);
                out.push(json!({ "cylinder": c, "terms": terms, "eps0": hy.eps0, "fitted_c": fitted }));
            }
            art.write_json("hybrid.json", &out)?;
        }
    }

    if let Some(s) = &diag.singular {
        let cfg = s.resolve(&prep.grid);
        let report = detect_singular_set(&cache, &cfg)?;
        if let Some(bc) = &report.box_count {
            let rows: Vec<_> = bc.deltas.iter().zip(&bc.counts).map(|(&d, &n)| (d, n)).collect();
            art.write_csv("boxcount.csv", &header(&["delta", "count"]), &rows)?;
        }
        art.write_json("singular.json", &report)?;
    }

    if diag.one_sided {
        let report = one_sided_monitor(traj)?;
        let rows: Vec<_> = report.w_track.iter().map(|r| (r.step, r.t, r.max_w, r.min_last)).collect();
        art.write_csv("w_track.csv", &header(&["step", "t", "maxW", "min_last_component"]), &rows)?;
        art.write_json("one_sided.json", &report)?;
    }

    if let Some(c) = &diag.certificate {
        let radii = c
            .radii
            .clone()
            .unwrap_or_else(|| dyadic_radii(prep.grid.domain().diameter(), 2.0 * prep.grid.spacing()));
        let cert = small_energy_certificate(&cache, &point(c.t0, &c.x0), &radii, c.eps0)?;
        art.write_json("certificate.json", &json!({ "input": c, "certificate": cert }))?;
    }
    Ok(())
}

/// Dirichlet-mode scaled energy of the configured probe cylinder.
pub fn probe_energy(traj: &Trajectory, probe: &CylinderEntry) -> Result<f64, CliError> {
    let cache = TrajectoryCache::new(traj);
    Ok(local_scaled_energy(&cache, &point(probe.t0, &probe.x0), probe.radius, EnergyMode::Dirichlet)?)
}
