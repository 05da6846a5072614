use serde_json::{json, Value};
use sphereflow_core::Error as CoreError;
use thiserror::Error;

/// Exit status for configs that fail validation.
pub const EXIT_INVALID: i32 = 2;
/// Exit status for failures after computation started.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid config: {0}")]
    Invalid(CoreError),
    #[error("run failed: {0}")]
    Runtime(#[from] CoreError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> Value {
        let stage = if self.exit_code() == EXIT_INVALID { "validation" } else { "runtime" };
        let mut out = json!({
            "stage": stage,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        let core = match self {
            CliError::Invalid(e) | CliError::Runtime(e) => Some(e),
            _ => None,
        };
        if let Some(e) = core {
            out["kind"] = json!(core_kind(e));
            match e {
                CoreError::CflViolated { dt, bound } => out["detail"] = json!({ "dt": dt, "bound": bound }),
                CoreError::SpacingTooCoarse { h, diameter, cells, min_cells } => {
                    out["detail"] = json!({ "h": h, "diameter": diameter, "cells": cells, "min_cells": min_cells })
                }
                CoreError::NormBlowup { node, norm, t } => out["detail"] = json!({ "node": node, "norm": norm, "t": t }),
                _ => {}
            }
        } else {
            out["kind"] = json!(match self {
                CliError::Config(_) => "config",
                CliError::Io(_) => "io",
                CliError::Csv(_) => "csv",
                _ => "json",
            });
        }
        out
    }
}

fn core_kind(e: &CoreError) -> &'static str {
    match e {
        CoreError::SpacingTooCoarse { .. } => "spacing-too-coarse",
        CoreError::InvalidDomain(_) => "invalid-domain",
        CoreError::NoGraphAvailable(_) => "no-graph-available",
        CoreError::DimensionMismatch(_) => "dimension-mismatch",
        CoreError::NearZeroVector { .. } => "near-zero-vector",
        CoreError::GridMismatch => "grid-mismatch",
        CoreError::NoConvergence { .. } => "no-convergence",
        CoreError::OrderTooHighForGrid { .. } => "order-too-high-for-grid",
        CoreError::CflViolated { .. } => "cfl-violated",
        CoreError::NormBlowup { .. } => "norm-blowup",
        CoreError::TimeNotBeforeCenter { .. } => "time-not-before-center",
        CoreError::WindowOutsideTrajectory { .. } => "window-outside-trajectory",
        CoreError::EmptyIntersection { .. } => "empty-intersection",
        CoreError::TooFewScales(_) => "too-few-scales",
        CoreError::PoleProximity { .. } => "pole-proximity",
        CoreError::Precondition(_) => "precondition",
        CoreError::Io(_) => "io",
        CoreError::Json(_) => "json",
    }
}
