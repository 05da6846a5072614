//! `sphereflow sweep`: reruns one config over a list of parameter values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sphereflow_core::flow::{penalty_integral, Trajectory};

use crate::artifacts::{header, Artifacts, Manifest};
use crate::config::{prepare, ExperimentConfig, Prepared, RunMode, StepSize};
use crate::error::CliError;
use crate::run::{compare_with_projected, probe_energy, simulate, with_threads};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    H,
    Dt,
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "h" => Ok(SweepParam::H),
            "dt" => Ok(SweepParam::Dt),
            other => Err(CliError::Config(format!("unknown sweep parameter {other:?}; use lambda, h or dt"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Lambda => "lambda",
            SweepParam::H => "h",
            SweepParam::Dt => "dt",
        })
    }
}

/// Parses `a,b,c`; each entry may be a decimal or a fraction `p/q`.
pub fn parse_values(s: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let value = match item.split_once('/') {
            Some((p, q)) => parse_f64(p)? / parse_f64(q)?,
            None => parse_f64(item)?,
        };
        if !value.is_finite() {
            return Err(CliError::Config(format!("sweep value {item:?} is not finite")));
        }
        out.push(value);
    }
    if out.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse sweep value {s:?}")))
}

/// One row of `sweep.csv`; `None` is written as an empty cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub penalty_integral: f64,
    pub final_gl_energy: f64,
    pub final_dirichlet_energy: f64,
    pub max_norm: f64,
    pub final_distance_projected: Option<f64>,
    pub spacetime_distance_projected: Option<f64>,
    pub mbar_probe: Option<f64>,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub manifest: Manifest,
}

fn with_value(base: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    match param {
        SweepParam::Lambda => {
            if !matches!(cfg.solver.mode, RunMode::GlhfSimplified | RunMode::GlhfOriginal) {
                return Err(CliError::Config("a lambda sweep needs a GLHF mode".into()));
            }
            cfg.solver.lambda = Some(value);
        }
        SweepParam::H => cfg.h = value,
        SweepParam::Dt => cfg.solver.dt = StepSize::Fixed(value),
    }
    Ok(cfg)
}

fn row(prep: &Prepared, param: SweepParam, value: f64, traj: &Trajectory, threads: Option<usize>) -> Result<SweepRow, CliError> {
    let projected = compare_with_projected(prep, traj)?;
    let mbar = match &prep.config.diagnostics.probe {
        Some(p) => Some(with_threads(threads, || probe_energy(traj, p))??),
        None => None,
    };
    let summary = crate::run::summarize(prep, traj, projected.clone());
    Ok(SweepRow {
        param: param.to_string(),
        value,
        h: summary.h,
        dt: summary.dt,
        steps: summary.steps,
        penalty_integral: penalty_integral(traj),
        final_gl_energy: summary.final_state.gl_energy,
        final_dirichlet_energy: summary.final_state.dirichlet_energy,
        max_norm: summary.max_norm,
        final_distance_projected: projected.as_ref().map(|p| p.final_distance),
        spacetime_distance_projected: projected.as_ref().map(|p| p.spacetime_distance),
        mbar_probe: mbar,
    })
}

/// Validates every variant first, then runs them in order.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<SweepOutcome, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let prepared = values
        .iter()
        .map(|&v| with_value(base, param, v).and_then(prepare))
        .collect::<Result<Vec<_>, _>>()?;
    let mut art = Artifacts::create(out_dir)?;
    art.write_json("config.json", base)?;
    let mut rows = Vec::with_capacity(values.len());
    for (prep, &value) in prepared.iter().zip(values) {
        log::info!("sweep {param} = {value}");
        let traj = simulate(prep)?;
        rows.push(row(prep, param, value, &traj, threads)?);
    }
    let cols = header(&[
        "param",
        "value",
        "h",
        "dt",
        "steps",
        "penalty_integral",
        "final_gl_energy",
        "final_dirichlet_energy",
        "max_norm",
        "final_distance_projected",
        "spacetime_distance_projected",
        "mbar_probe",
    ]);
    art.write_csv("sweep.csv", &cols, &rows)?;
    let manifest = art.finish(&format!("sweep {param}"))?;
    Ok(SweepOutcome { rows, manifest })
}
