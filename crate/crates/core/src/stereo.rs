//! Stereographic coordinates from the south pole, the function
//! `W(x) = x / (1 + x^2)` and the hemisphere (one-sided) monitor.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SphereField;
use crate::flow::Trajectory;
use crate::geometry::{Grid, NodeClass};

/// Last components at or below `-1 + POLE_GUARD` are rejected.
pub const POLE_GUARD: f64 = 1e-6;

/// Multiplier of `dt` in the maximum-principle band `1e-6 + 10 dt`.
pub const BAND_DT_FACTOR: f64 = 10.0;

const RESIDUAL_SAMPLES: usize = 100;
const RESIDUAL_SEED: u64 = 0x5eed;

/// Per-node `v in R^D`; inactive nodes hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoField {
    grid: Arc<Grid>,
    dim: usize,
    values: Vec<f64>,
}

impl StereoField {
    pub fn from_fn<F: FnMut(usize, &[f64]) -> Vec<f64>>(grid: Arc<Grid>, dim: usize, mut f: F) -> Self {
        let mut values = vec![0.0; grid.len() * dim];
        for node in grid.active_nodes() {
            let v = f(node, &grid.point(node));
            values[node * dim..(node + 1) * dim].copy_from_slice(&v);
        }
        StereoField { grid, dim, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn norm_sq_at(&self, node: usize) -> f64 {
        self.value(node).iter().map(|x| x * x).sum()
    }
}

fn stereo_point(u: &[f64], out: &mut [f64]) -> bool {
    let last = u[u.len() - 1];
    if last <= -1.0 + POLE_GUARD {
        return false;
    }
    for (o, x) in out.iter_mut().zip(u) {
        *o = x / (1.0 + last);
    }
    true
}

/// `v^i = u^i / (1 + u^(D+1))`.
pub fn to_stereo(u: &SphereField) -> Result<StereoField> {
    let grid = u.grid().clone();
    let dim = u.target_dim();
    let mut values = vec![0.0; grid.len() * dim];
    for node in grid.active_nodes() {
        if !stereo_point(u.value(node), &mut values[node * dim..(node + 1) * dim]) {
            return Err(Error::PoleProximity { node });
        }
    }
    Ok(StereoField { grid, dim, values })
}

/// `u^i = 2 v^i / (1 + |v|^2)`, `u^(D+1) = (1 - |v|^2) / (1 + |v|^2)`.
pub fn from_stereo(v: &StereoField) -> SphereField {
    let dim = v.dim;
    SphereField::from_fn(v.grid.clone(), dim, |node, _| {
        let vv = v.value(node);
        let s: f64 = vv.iter().map(|x| x * x).sum();
        let mut u: Vec<f64> = vv.iter().map(|x| 2.0 * x / (1.0 + s)).collect();
        u.push((1.0 - s) / (1.0 + s));
        u
    })
}

/// `W(x) = int_0^x (1 - t^2) / (1 + t^2)^2 dt = x / (1 + x^2)`.
pub fn w(x: f64) -> f64 {
    x / (1.0 + x * x)
}

pub fn w_integrand(t: f64) -> f64 {
    (1.0 - t * t) / ((1.0 + t * t) * (1.0 + t * t))
}

/// Orthogonal map of `R^(D+1)` (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub n: usize,
    pub matrix: Vec<f64>,
}

impl Rotation {
    pub fn identity(n: usize) -> Self {
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            matrix[i * n + i] = 1.0;
        }
        Rotation { n, matrix }
    }

    /// Householder reflection taking the unit vector `from` to the north pole.
    pub fn to_north_pole(from: &[f64]) -> Self {
        let n = from.len();
        let mut w: Vec<f64> = from.to_vec();
        w[n - 1] -= 1.0;
        let len = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len < 1e-14 {
            return Rotation::identity(n);
        }
        w.iter_mut().for_each(|x| *x /= len);
        let mut r = Rotation::identity(n);
        for i in 0..n {
            for j in 0..n {
                r.matrix[i * n + j] -= 2.0 * w[i] * w[j];
            }
        }
        r
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..self.n).map(|j| self.matrix[i * self.n + j] * x[j]).sum();
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Rotation::identity(self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneSidedCheck {
    pub rotation: Rotation,
    /// Smallest last component after rotation.
    pub min_last: f64,
    pub passed: bool,
    /// `(1 - max |v0|) / 2` after rotation, zero when the check fails.
    pub theta0: f64,
}

/// Aligns the mean of the `u0` values with the north pole and tests whether
/// the rotated range lies in the open upper hemisphere.
pub fn one_sided_check(u0: &SphereField) -> OneSidedCheck {
    let grid = u0.grid();
    let n = u0.ncomp();
    let nodes = grid.active_nodes();
    let mut mean = vec![0.0; n];
    for &i in &nodes {
        for (m, x) in mean.iter_mut().zip(u0.value(i)) {
            *m += x;
        }
    }
    let len = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rotation = if len < 1e-12 {
        Rotation::identity(n)
    } else {
        mean.iter_mut().for_each(|x| *x /= len);
        Rotation::to_north_pole(&mean)
    };
    let mut ru = vec![0.0; n];
    let mut min_last = f64::INFINITY;
    let mut max_v: f64 = 0.0;
    for &i in &nodes {
        rotation.apply(u0.value(i), &mut ru);
        let last = ru[n - 1];
        min_last = min_last.min(last);
        if last > -1.0 + POLE_GUARD {
            let s: f64 = ru[..n - 1].iter().map(|x| x * x).sum::<f64>() / ((1.0 + last) * (1.0 + last));
            max_v = max_v.max(s.sqrt());
        }
    }
    let passed = min_last > 0.0;
    OneSidedCheck {
        rotation,
        min_last,
        passed,
        theta0: if passed { 0.5 * (1.0 - max_v) } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WTrackRow {
    pub step: usize,
    pub t: f64,
    pub max_w: f64,
    pub min_last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub samples: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneSidedReport {
    pub theta0: f64,
    pub rotation: Rotation,
    pub passed: bool,
    /// Snapshot step where the range first left the open hemisphere.
    pub fail_step: Option<usize>,
    pub band: f64,
    pub w_track: Vec<WTrackRow>,
    /// Residual of `W_t - Lap W + 4 |grad v|^2 / (1 + |v|^2)^2` at random samples.
    pub residual: Option<ResidualSummary>,
}

impl OneSidedReport {
    pub fn min_last(&self) -> f64 {
        self.w_track.iter().map(|r| r.min_last).fold(f64::INFINITY, f64::min)
    }
}

/// Rotated stereographic image of a snapshot, or the first node at the pole.
fn rotated_stereo(u: &SphereField, rot: &Rotation) -> std::result::Result<(StereoField, f64), usize> {
    let grid = u.grid().clone();
    let n = u.ncomp();
    let dim = n - 1;
    let mut values = vec![0.0; grid.len() * dim];
    let mut ru = vec![0.0; n];
    let mut min_last = f64::INFINITY;
    for node in grid.active_nodes() {
        rot.apply(u.value(node), &mut ru);
        min_last = min_last.min(ru[n - 1]);
        if !stereo_point(&ru, &mut values[node * dim..(node + 1) * dim]) {
            return Err(node);
        }
    }
    Ok((StereoField { grid, dim, values }, min_last))
}

/// Follows `max W(|v|^2)` along the trajectory in the rotated chart fixed at `t = 0`.
pub fn one_sided_monitor(traj: &Trajectory) -> Result<OneSidedReport> {
    let snaps = traj.snapshots();
    let check = one_sided_check(&snaps[0].field);
    let band = 1e-6 + BAND_DT_FACTOR * traj.dt();
    let mut report = OneSidedReport {
        theta0: check.theta0,
        rotation: check.rotation.clone(),
        passed: check.passed,
        fail_step: None,
        band,
        w_track: Vec::with_capacity(snaps.len()),
        residual: None,
    };
    if !check.passed {
        report.fail_step = Some(snaps[0].step);
        return Ok(report);
    }
    let mut stereo = Vec::with_capacity(snaps.len());
    for snap in snaps {
        let (v, min_last) = match rotated_stereo(&snap.field, &check.rotation) {
            Ok(x) => x,
            Err(node) => {
                log::warn!("pole proximity at node {node}, step {}", snap.step);
                report.passed = false;
                report.fail_step = Some(snap.step);
                return Ok(report);
            }
        };
        let grid = v.grid().clone();
        let max_w = grid
            .active_nodes()
            .into_iter()
            .map(|i| w(v.norm_sq_at(i)))
            .fold(f64::NEG_INFINITY, f64::max);
        report.w_track.push(WTrackRow {
            step: snap.step,
            t: snap.t,
            max_w,
            min_last,
        });
        if min_last <= 0.0 {
            report.passed = false;
            report.fail_step = Some(snap.step);
            return Ok(report);
        }
        stereo.push(v);
    }
    let w0 = report.w_track[0].max_w;
    report.passed = report.w_track.iter().all(|r| r.max_w <= w0 + band);
    report.residual = pde_residual(traj, &stereo);
    Ok(report)
}

/// Nodes whose axis neighbors are all interior, so the 5-point stencils see no boundary.
fn deep_interior(grid: &Grid) -> Vec<usize> {
    let d = grid.dim();
    grid.interior_nodes()
        .iter()
        .copied()
        .filter(|&i| {
            (0..d).all(|a| {
                [-1, 1].iter().all(|&s| {
                    grid.neighbor(i, a, s)
                        .is_some_and(|n| grid.class(n) == NodeClass::Interior)
                })
            })
        })
        .collect()
}

/// `W_t - Lap W(|v|^2) + 4 |grad v|^2 / (1 + |v|^2)^2` at node `i` of snapshot `k`.
pub fn residual_at(v: &StereoField, next: Option<(&StereoField, f64)>, i: usize) -> f64 {
    let grid = v.grid();
    let h = grid.spacing();
    let wv = |f: &StereoField, n: usize| w(f.norm_sq_at(n));
    let center = wv(v, i);
    let wt = next.map_or(0.0, |(n, dt)| (wv(n, i) - center) / dt);
    let mut lap = 0.0;
    let mut grad_sq = 0.0;
    for a in 0..grid.dim() {
        let f = grid.neighbor(i, a, 1).expect("interior neighbor");
        let b = grid.neighbor(i, a, -1).expect("interior neighbor");
        lap += wv(v, f) + wv(v, b) - 2.0 * center;
        for c in 0..v.dim() {
            let dv = (v.value(f)[c] - v.value(b)[c]) / (2.0 * h);
            grad_sq += dv * dv;
        }
    }
    lap /= h * h;
    let s = v.norm_sq_at(i);
    wt - lap + 4.0 * grad_sq / ((1.0 + s) * (1.0 + s))
}

fn pde_residual(traj: &Trajectory, stereo: &[StereoField]) -> Option<ResidualSummary> {
    let snaps = traj.snapshots();
    if snaps.len() < 2 {
        return None;
    }
    let nodes = deep_interior(traj.grid());
    if nodes.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(RESIDUAL_SEED);
    let mut max_abs: f64 = 0.0;
    let mut sum = 0.0;
    for _ in 0..RESIDUAL_SAMPLES {
        let k = rng.gen_range(0..snaps.len() - 1);
        let i = nodes[rng.gen_range(0..nodes.len())];
        let dt = snaps[k + 1].t - snaps[k].t;
        let r = residual_at(&stereo[k], Some((&stereo[k + 1], dt)), i).abs();
        max_abs = max_abs.max(r);
        sum += r;
    }
    Some(ResidualSummary {
        samples: RESIDUAL_SAMPLES,
        max_abs,
        mean_abs: sum / RESIDUAL_SAMPLES as f64,
    })
}
