//! Weighted energy functionals evaluated on stored trajectories: the
//! backward heat kernel, the boundary weight `d_x0`, annulus energies, the
//! two monotonicity forms, the boundary-decay criterion and the
//! reverse-Poincare / hybrid ratios.
//!
//! Time integrals use the snapshot intervals `[t_k, t_{k+1})` (left-endpoint
//! values); time-dependent weights are evaluated at the midpoint of each
//! overlap segment.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::elliptic::{derivative_density, hybrid_order};
use crate::error::{Error, Result};
use crate::field::SphereField;
use crate::flow::Trajectory;
use crate::geometry::{boundary_frame, dist2, Grid, NodeClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacetimePoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl SpacetimePoint {
    pub fn new(t: f64, x: Vec<f64>) -> Self {
        SpacetimePoint { t, x }
    }
}

/// `P_R(z0) = (t0 - R^2, t0 + R^2) x B_R(x0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub center: SpacetimePoint,
    pub radius: f64,
}

impl CylinderSpec {
    pub fn new(center: SpacetimePoint, radius: f64) -> Self {
        CylinderSpec { center, radius }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CylinderSpec {
            center: self.center.clone(),
            radius: self.radius * factor,
        }
    }
}

/// `G_z0(t, x) = (4 pi (t0 - t))^(-d/2) exp(-|x - x0|^2 / (4 (t0 - t)))`.
pub fn backward_heat_kernel(z0: &SpacetimePoint, t: f64, x: &[f64]) -> Result<f64> {
    if !(t < z0.t) {
        return Err(Error::TimeNotBeforeCenter { t, t0: z0.t });
    }
    if x.len() != z0.x.len() {
        return Err(Error::DimensionMismatch(format!(
            "point has dimension {}, center has {}",
            x.len(),
            z0.x.len()
        )));
    }
    Ok(kernel(z0.t - t, dist2(x, &z0.x), x.len()))
}

fn kernel(s: f64, r2: f64, d: usize) -> f64 {
    (4.0 * PI * s).powf(-0.5 * d as f64) * (-r2 / (4.0 * s)).exp()
}

/// `d_x0(x) = 1 + |x - x0|^2 / d0^2`.
pub fn weight_d(x0: &[f64], x: &[f64], d0: f64) -> f64 {
    1.0 + dist2(x0, x) / (d0 * d0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub gl_energy: f64,
    pub dirichlet_energy: f64,
    pub penalty_part: f64,
    /// `e = |grad u|^2 / 2 + Lambda (|u|^2 - 1)^2 / 4` per lattice node.
    pub density: Vec<f64>,
}

/// Ginzburg-Landau energy of a single field under penalty strength `strength`.
pub fn energy_report(field: &SphereField, strength: f64) -> EnergyReport {
    let grid = field.grid();
    let vol = grid.cell_volume();
    let grad = field.gradient_density();
    let mut density = vec![0.0; grid.len()];
    let mut penalty = 0.0;
    for &i in grid.interior_nodes() {
        let w = field.norm_sq_at(i);
        let p = 0.25 * strength * (w - 1.0) * (w - 1.0);
        penalty += p;
        density[i] = 0.5 * grad[i] + p;
    }
    EnergyReport {
        gl_energy: density.iter().sum::<f64>() * vol,
        dirichlet_energy: grad.iter().sum::<f64>() * vol,
        penalty_part: penalty * vol,
        density,
    }
}

/// Pointwise energy densities of one snapshot.
#[derive(Debug)]
pub(crate) struct NodeDensities {
    /// `|grad u|^2`
    pub grad_sq: Vec<f64>,
    /// `(|u|^2 - 1)^2`
    pub defect: Vec<f64>,
}

/// Which energy density an integral uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Density {
    /// `|grad u|^2`
    GradientSquared,
    /// `e_lambda`
    GinzburgLandau,
}

/// One overlap between an integration window and a snapshot interval.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment {
    pub snapshot: usize,
    /// First snapshot sharing this snapshot's field (frozen runs reuse one field).
    pub canonical: usize,
    pub len: f64,
    pub mid: f64,
}

/// Lazily computed per-snapshot quantities, shared across diagnostics of one
/// trajectory. Snapshots holding the same `Arc` are computed once.
pub struct TrajectoryCache<'a> {
    traj: &'a Trajectory,
    canonical: Vec<usize>,
    densities: Vec<OnceLock<Arc<NodeDensities>>>,
    gradients: Vec<OnceLock<Arc<Vec<f64>>>>,
}

impl<'a> TrajectoryCache<'a> {
    pub fn new(traj: &'a Trajectory) -> Self {
        let snaps = traj.snapshots();
        let mut canonical: Vec<usize> = Vec::with_capacity(snaps.len());
        for (k, s) in snaps.iter().enumerate() {
            let first = if k > 0 && Arc::ptr_eq(&s.field, &snaps[canonical[k - 1]].field) {
                canonical[k - 1]
            } else {
                k
            };
            canonical.push(first);
        }
        TrajectoryCache {
            traj,
            canonical,
            densities: (0..snaps.len()).map(|_| OnceLock::new()).collect(),
            gradients: (0..snaps.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn trajectory(&self) -> &'a Trajectory {
        self.traj
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.traj.grid()
    }

    pub(crate) fn densities(&self, k: usize) -> Arc<NodeDensities> {
        let c = self.canonical[k];
        self.densities[c]
            .get_or_init(|| {
                let field = &self.traj.snapshots()[c].field;
                let grid = field.grid();
                let mut defect = vec![0.0; grid.len()];
                for &i in grid.interior_nodes() {
                    let w = field.norm_sq_at(i);
                    defect[i] = (w - 1.0) * (w - 1.0);
                }
                Arc::new(NodeDensities {
                    grad_sq: field.gradient_density(),
                    defect,
                })
            })
            .clone()
    }

    /// Row-major `d x ncomp` gradients at interior nodes, packed per lattice node.
    pub(crate) fn gradients(&self, k: usize) -> Arc<Vec<f64>> {
        let c = self.canonical[k];
        self.gradients[c]
            .get_or_init(|| {
                let field = &self.traj.snapshots()[c].field;
                let grid = field.grid();
                let block = grid.dim() * field.ncomp();
                let mut out = vec![0.0; grid.len() * block];
                for &i in grid.interior_nodes() {
                    field.gradient_at(i, &mut out[i * block..(i + 1) * block]);
                }
                Arc::new(out)
            })
            .clone()
    }

    /// Density value at node `i` of snapshot `k` with time `t` for the penalty strength.
    pub(crate) fn density_value(&self, dens: &NodeDensities, kind: Density, i: usize, strength: f64) -> f64 {
        match kind {
            Density::GradientSquared => dens.grad_sq[i],
            Density::GinzburgLandau => 0.5 * dens.grad_sq[i] + 0.25 * strength * dens.defect[i],
        }
    }

    pub(crate) fn check_window(&self, lo: f64, hi: f64) -> Result<()> {
        let (a, b) = (self.traj.t_start(), self.traj.t_final());
        let eps = 1e-12 * b.abs().max(1.0);
        if lo < a - eps || hi > b + eps || lo > hi {
            return Err(Error::WindowOutsideTrajectory {
                lo,
                hi,
                t_final: b,
            });
        }
        Ok(())
    }

    /// Overlaps of `[lo, hi]` with the snapshot intervals, in time order.
    pub(crate) fn segments(&self, lo: f64, hi: f64) -> Vec<Segment> {
        let snaps = self.traj.snapshots();
        let mut out = Vec::new();
        // first snapshot whose interval may overlap
        let start = snaps.partition_point(|s| s.t <= lo).saturating_sub(1);
        for k in start..snaps.len().saturating_sub(1) {
            let (t0, t1) = self.traj.interval(k);
            if t0 >= hi {
                break;
            }
            let a = t0.max(lo);
            let b = t1.min(hi);
            if b > a {
                out.push(Segment {
                    snapshot: k,
                    canonical: self.canonical[k],
                    len: b - a,
                    mid: 0.5 * (a + b),
                });
            }
        }
        out
    }

    /// `int_lo^hi dt int_Omega density G_z0 dx`.
    pub fn kernel_weighted_energy(&self, z0: &SpacetimePoint, lo: f64, hi: f64, kind: Density) -> Result<f64> {
        self.check_window(lo, hi)?;
        if !(hi < z0.t) {
            return Err(Error::TimeNotBeforeCenter { t: hi, t0: z0.t });
        }
        let grid = self.grid();
        let d = grid.dim();
        let vol = grid.cell_volume();
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for seg in self.segments(lo, hi) {
            let dens = self.densities(seg.snapshot);
            let strength = self.traj.penalty_strength(seg.mid);
            let s = z0.t - seg.mid;
            let mut inner = 0.0;
            for &i in grid.interior_nodes() {
                let e = self.density_value(&dens, kind, i, strength);
                if e == 0.0 {
                    continue;
                }
                grid.fill_point(i, &mut x);
                inner += e * kernel(s, dist2(&x, &z0.x), d);
            }
            acc += seg.len * inner * vol;
        }
        Ok(acc)
    }

    /// `int_{t0 - 4R^2}^{t0 - R^2} dt int_Omega e G_z0 dx`.
    pub fn weighted_annulus_energy(&self, z0: &SpacetimePoint, r: f64, kind: Density) -> Result<f64> {
        warn_if_underresolved(self.grid(), r);
        self.kernel_weighted_energy(z0, z0.t - 4.0 * r * r, z0.t - r * r, kind)
    }

    /// `int_{t0 - 4R^2}^{t0 - R^2} dt int_Omega |u_t - (x - x0) . grad u / (2 sqrt(t0 - t))|^2 G_z0 dx`,
    /// with `u_t` the forward difference between consecutive snapshots.
    pub fn speed_term(&self, z0: &SpacetimePoint, r: f64) -> Result<f64> {
        let (lo, hi) = (z0.t - 4.0 * r * r, z0.t - r * r);
        self.check_window(lo, hi)?;
        let grid = self.grid();
        let d = grid.dim();
        let nc = self.traj.snapshots()[0].field.ncomp();
        let block = d * nc;
        let vol = grid.cell_volume();
        let snaps = self.traj.snapshots();
        let mut x = vec![0.0; d];
        let mut v = vec![0.0; nc];
        let mut acc = 0.0;
        for seg in self.segments(lo, hi) {
            let k = seg.snapshot;
            let grads = self.gradients(k);
            let (t0, t1) = self.traj.interval(k);
            let u0 = &snaps[k].field;
            let u1 = &snaps[k + 1].field;
            let frozen = Arc::ptr_eq(u0, u1);
            let s = z0.t - seg.mid;
            let c = 1.0 / (2.0 * s.sqrt());
            let mut inner = 0.0;
            for &i in grid.interior_nodes() {
                grid.fill_point(i, &mut x);
                let g = &grads[i * block..(i + 1) * block];
                for comp in 0..nc {
                    let ut = if frozen {
                        0.0
                    } else {
                        (u1.value(i)[comp] - u0.value(i)[comp]) / (t1 - t0)
                    };
                    let mut radial = 0.0;
                    for a in 0..d {
                        radial += (x[a] - z0.x[a]) * g[a * nc + comp];
                    }
                    v[comp] = ut - c * radial;
                }
                let q: f64 = v.iter().map(|y| y * y).sum();
                if q > 0.0 {
                    inner += q * kernel(s, dist2(&x, &z0.x), d);
                }
            }
            acc += seg.len * inner * vol;
        }
        Ok(acc)
    }

    /// Interior nodes inside the open ball `B_r(x0)`.
    pub(crate) fn interior_in_ball(&self, x0: &[f64], r: f64) -> Vec<usize> {
        let grid = self.grid();
        grid.nodes_in_ball(x0, r)
            .into_iter()
            .filter(|&i| grid.class(i) == NodeClass::Interior)
            .collect()
    }

    /// Time window of `P_R(z0)` clipped to the trajectory.
    pub(crate) fn clipped_window(&self, z0: &SpacetimePoint, r: f64) -> (f64, f64) {
        (
            (z0.t - r * r).max(self.traj.t_start()),
            (z0.t + r * r).min(self.traj.t_final()),
        )
    }

    /// `int_{P_R(z0) cap Q} density dz` and the measure of the clipped cylinder.
    pub fn cylinder_energy(&self, z0: &SpacetimePoint, r: f64, kind: Density) -> Result<(f64, f64)> {
        let (lo, hi) = self.clipped_window(z0, r);
        let nodes = self.interior_in_ball(&z0.x, r);
        let vol = self.grid().cell_volume();
        let segments = self.segments(lo, hi);
        if segments.is_empty() || nodes.is_empty() {
            return Err(Error::EmptyIntersection { t0: z0.t, radius: r });
        }
        // spatial sums depend only on the field, so frozen runs sum once
        let mut memo: Vec<Option<(f64, f64)>> = vec![None; self.traj.snapshots().len()];
        let mut acc = 0.0;
        let mut duration = 0.0;
        for seg in &segments {
            let (g, p) = *memo[seg.canonical].get_or_insert_with(|| {
                let dens = self.densities(seg.snapshot);
                nodes
                    .iter()
                    .fold((0.0, 0.0), |(g, p), &i| (g + dens.grad_sq[i], p + dens.defect[i]))
            });
            let value = match kind {
                Density::GradientSquared => g,
                Density::GinzburgLandau => 0.5 * g + 0.25 * self.traj.penalty_strength(seg.mid) * p,
            };
            acc += seg.len * value;
            duration += seg.len;
        }
        Ok((acc * vol, duration * nodes.len() as f64 * vol))
    }

    /// `int_{P_R(z0) cap Q} |u - h0|^2 dz` and the cylinder measure.
    pub fn cylinder_deviation(&self, h0: &SphereField, z0: &SpacetimePoint, r: f64) -> Result<(f64, f64)> {
        self.traj.snapshots()[0].field.check_layout(h0)?;
        let (lo, hi) = self.clipped_window(z0, r);
        let nodes = self.interior_in_ball(&z0.x, r);
        let vol = self.grid().cell_volume();
        let segments = self.segments(lo, hi);
        if segments.is_empty() || nodes.is_empty() {
            return Err(Error::EmptyIntersection { t0: z0.t, radius: r });
        }
        let snaps = self.traj.snapshots();
        let mut memo: Vec<Option<f64>> = vec![None; snaps.len()];
        let mut acc = 0.0;
        let mut duration = 0.0;
        for seg in &segments {
            let s = *memo[seg.canonical].get_or_insert_with(|| {
                let u = &snaps[seg.snapshot].field;
                nodes
                    .iter()
                    .map(|&i| u.value(i).iter().zip(h0.value(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .sum()
            });
            acc += seg.len * s;
            duration += seg.len;
        }
        Ok((acc * vol, duration * nodes.len() as f64 * vol))
    }
}

fn warn_if_underresolved(grid: &Grid, r: f64) {
    if 2.0 * r < 4.0 * grid.spacing() {
        log::warn!(
            "kernel underresolved: sqrt(4 R^2) = {} < 4h = {}",
            2.0 * r,
            4.0 * grid.spacing()
        );
    }
}

/// One-shot form of [`TrajectoryCache::weighted_annulus_energy`] with the GL density.
pub fn weighted_annulus_energy(traj: &Trajectory, z0: &SpacetimePoint, r: f64) -> Result<f64> {
    TrajectoryCache::new(traj).weighted_annulus_energy(z0, r, Density::GinzburgLandau)
}

/// Right-hand side shape of the monotonicity inequality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonotonicityForm {
    /// `C (R2^mu - R1^mu) E(R2) + C (R2 - R1)` with `|grad u|^2` density.
    Linear,
    /// `C exp(R2^mu - R1^mu) E(R2) + C (R2 - R1)` with `e_lambda` density.
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityOptions {
    pub form: MonotonicityForm,
    /// Trapezoid nodes for the `dR` integral of the speed term.
    pub r_samples: usize,
    pub mu_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
}

impl Default for MonotonicityOptions {
    fn default() -> Self {
        MonotonicityOptions {
            form: MonotonicityForm::Linear,
            r_samples: 9,
            mu_grid: (1..=10).map(|k| k as f64 / 10.0).collect(),
            c_grid: logspace(-3.0, 4.0, 71),
        }
    }
}

/// `n` points from `10^a` to `10^b`, log-uniform.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![10f64.powf(a)];
    }
    (0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub r1: f64,
    pub r2: f64,
    pub form: MonotonicityForm,
    /// Weighted energy over `(t0 - 4 R1^2, t0 - R1^2)`.
    pub inner_energy: f64,
    /// `2 int_R1^R2 dR` of the weighted speed term.
    pub speed_term: f64,
    /// Weighted energy over `(t0 - 4 R2^2, t0 - R2^2)`.
    pub outer_energy: f64,
    pub mu0: f64,
    pub c: f64,
    pub rhs: f64,
    /// `C (R2 - R1)` at the fitted constant.
    pub remainder: f64,
    pub defect: f64,
}

impl MonotonicityReport {
    pub fn lhs(&self) -> f64 {
        self.inner_energy + self.speed_term
    }
}

/// Monotonicity quantities for `(R1, R2)` at `z0` and the smallest grid
/// constant `C` (over all `mu0`) that closes the inequality.
pub fn monotonicity_report(
    cache: &TrajectoryCache,
    z0: &SpacetimePoint,
    r1: f64,
    r2: f64,
    opts: &MonotonicityOptions,
) -> Result<MonotonicityReport> {
    if !(r1 > 0.0 && r1 <= r2 && r2 < (z0.t / 4.0).sqrt()) {
        return Err(Error::Precondition(format!(
            "need 0 < R1 <= R2 < sqrt(t0/4); got R1 = {r1}, R2 = {r2}, t0 = {}",
            z0.t
        )));
    }
    if opts.mu_grid.is_empty() || opts.c_grid.is_empty() || opts.r_samples < 2 {
        return Err(Error::Precondition("empty fit grid or fewer than 2 R samples".into()));
    }
    let kind = match opts.form {
        MonotonicityForm::Linear => Density::GradientSquared,
        MonotonicityForm::Exponential => Density::GinzburgLandau,
    };
    warn_if_underresolved(cache.grid(), r1);
    let inner = cache.weighted_annulus_energy(z0, r1, kind)?;
    let outer = cache.weighted_annulus_energy(z0, r2, kind)?;
    let speed = if r2 > r1 {
        let n = opts.r_samples;
        let step = (r2 - r1) / (n - 1) as f64;
        let mut acc = 0.0;
        for j in 0..n {
            let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            acc += w * cache.speed_term(z0, r1 + j as f64 * step)?;
        }
        2.0 * acc * step
    } else {
        0.0
    };
    let lhs = inner + speed;
    let mut c_grid = opts.c_grid.clone();
    c_grid.sort_by(f64::total_cmp);
    let coefficient = |mu: f64| {
        let a = match opts.form {
            MonotonicityForm::Linear => r2.powf(mu) - r1.powf(mu),
            MonotonicityForm::Exponential => (r2.powf(mu) - r1.powf(mu)).exp(),
        };
        a * outer + (r2 - r1)
    };
    // smallest C closing the inequality, ties broken by the first mu
    let mut best: Option<(f64, f64)> = None;
    for &mu in &opts.mu_grid {
        let k = coefficient(mu);
        if let Some(&c) = c_grid.iter().find(|&&c| lhs <= c * k) {
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((mu, c));
            }
        }
    }
    let (mu0, c) = best.unwrap_or_else(|| {
        let c = *c_grid.last().unwrap();
        let mu = opts
            .mu_grid
            .iter()
            .copied()
            .max_by(|a, b| coefficient(*a).total_cmp(&coefficient(*b)))
            .unwrap();
        (mu, c)
    });
    let rhs = c * coefficient(mu0);
    Ok(MonotonicityReport {
        r1,
        r2,
        form: opts.form,
        inner_energy: inner,
        speed_term: speed,
        outer_energy: outer,
        mu0,
        c,
        rhs,
        remainder: c * (r2 - r1),
        defect: (lhs - rhs).max(0.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Main2Terms {
    /// `exp((4 R0)^mu0) / R0^2`
    pub prefactor: f64,
    /// `e^(-4(d-2)/d0^2) t0^(-(d-2)/2) int |grad u0|^2`
    pub interior_term: f64,
    /// `int_0^{t0 - R0^2} dt int_dOmega |grad_tau u0|^2 G (d_x0 + 4 (t0 - t)/d0^2)`
    pub boundary_term: f64,
    /// `C(mu0) R0`
    pub remainder: f64,
    pub value: f64,
}

impl Main2Terms {
    pub fn bracket(&self) -> f64 {
        self.interior_term + self.boundary_term
    }
}

/// Intervals of the composite Simpson rule for the boundary time integral.
const MAIN2_TIME_INTERVALS: usize = 512;

/// Left-hand side of the boundary energy-decay regularity criterion for `u0`.
///
/// `time_weighted` multiplies the boundary integrand by `e^(-4(d-2) t / d0^2)`,
/// the weight of the penalized-flow variant.
pub fn main2_lhs(
    u0: &SphereField,
    z0: &SpacetimePoint,
    r0: f64,
    mu0: f64,
    c_mu0: f64,
    time_weighted: bool,
) -> Result<Main2Terms> {
    let grid = u0.grid();
    if !(r0 > 0.0 && r0 < 0.5 * z0.t.sqrt()) {
        return Err(Error::Precondition(format!(
            "need 0 < R0 < sqrt(t0)/2; got R0 = {r0}, t0 = {}",
            z0.t
        )));
    }
    let d = grid.dim();
    let nc = u0.ncomp();
    let d0 = grid.domain().diameter();
    let dm2 = d as f64 - 2.0;
    let interior = (-4.0 * dm2 / (d0 * d0)).exp() / z0.t.powf(0.5 * dm2) * u0.dirichlet_energy();

    let frame = boundary_frame(grid);
    let mut g = vec![0.0; d * nc];
    let mut col = vec![0.0; d];
    let mut tangential = Vec::with_capacity(frame.nodes().len());
    for (k, &node) in frame.nodes().iter().enumerate() {
        u0.gradient_at(node, &mut g);
        let mut sq = 0.0;
        for c in 0..nc {
            for a in 0..d {
                col[a] = g[a * nc + c];
            }
            frame.project_tangential(k, &mut col);
            sq += col.iter().map(|v| v * v).sum::<f64>();
        }
        if sq > 0.0 {
            tangential.push((grid.point(node), sq));
        }
    }
    let surface = grid.spacing().powi(d as i32 - 1);
    let integrand = |t: f64| {
        let s = z0.t - t;
        let time_weight = if time_weighted {
            (-4.0 * dm2 * t / (d0 * d0)).exp()
        } else {
            1.0
        };
        let sum: f64 = tangential
            .iter()
            .map(|(x, sq)| {
                let r2 = dist2(x, &z0.x);
                sq * kernel(s, r2, d) * (1.0 + r2 / (d0 * d0) + 4.0 * s / (d0 * d0))
            })
            .sum();
        time_weight * sum * surface
    };
    let boundary = if tangential.is_empty() {
        0.0
    } else {
        simpson(integrand, 0.0, z0.t - r0 * r0, MAIN2_TIME_INTERVALS)
    };
    let prefactor = (4.0 * r0).powf(mu0).exp() / (r0 * r0);
    let remainder = c_mu0 * r0;
    Ok(Main2Terms {
        prefactor,
        interior_term: interior,
        boundary_term: boundary,
        remainder,
        value: prefactor * (interior + boundary) + remainder,
    })
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Terms of the reverse Poincare inequality on `P_R` / `P_2R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversePoincare {
    /// `(1 / R^d) int_{P_R cap Q} |grad u|^2 / 2`
    pub lhs: f64,
    /// Mean of `|u - h0|^2` over `P_2R cap Q`.
    pub deviation: f64,
    /// Mean of `|grad^k h0|^2 + |grad h0|^2` over `P_2R cap Q`, `k = [(d+1)/2] + 1`.
    pub data: f64,
}

impl ReversePoincare {
    pub fn rhs_without_constant(&self) -> f64 {
        self.deviation + self.data
    }
}

fn check_lower_window(cache: &TrajectoryCache, cyl: &CylinderSpec, scale: f64) -> Result<()> {
    let lo = cyl.center.t - (scale * cyl.radius).powi(2);
    if lo < cache.trajectory().t_start() - 1e-12 {
        return Err(Error::WindowOutsideTrajectory {
            lo,
            hi: cyl.center.t,
            t_final: cache.trajectory().t_final(),
        });
    }
    Ok(())
}

/// `int_{B_r(x0)} (|grad^k h0|^2 + |grad h0|^2) dx` over admissible nodes.
fn h0_data_integral(cache: &TrajectoryCache, h0: &SphereField, x0: &[f64], r: f64) -> Result<f64> {
    let grid = h0.grid();
    let hi = derivative_density(h0, hybrid_order(grid.dim()))?;
    let first = derivative_density(h0, 1)?;
    let acc: f64 = cache
        .interior_in_ball(x0, r)
        .into_iter()
        .map(|i| hi[i].unwrap_or(0.0) + first[i].unwrap_or(0.0))
        .sum();
    Ok(acc * grid.cell_volume())
}

pub fn reverse_poincare_ratio(cache: &TrajectoryCache, h0: &SphereField, cyl: &CylinderSpec) -> Result<ReversePoincare> {
    check_lower_window(cache, cyl, 2.0)?;
    let r = cyl.radius;
    let d = cache.grid().dim();
    let (e, _) = cache.cylinder_energy(&cyl.center, r, Density::GradientSquared)?;
    let outer = cyl.scaled(2.0);
    let (dev, measure) = cache.cylinder_deviation(h0, &outer.center, outer.radius)?;
    let (lo, hi) = cache.clipped_window(&outer.center, outer.radius);
    let data = h0_data_integral(cache, h0, &outer.center.x, outer.radius)? * (hi - lo);
    Ok(ReversePoincare {
        lhs: 0.5 * e / r.powi(d as i32),
        deviation: dev / measure,
        data: data / measure,
    })
}

/// Terms of the hybrid inequality
/// `int_{P_R} e <= eps0 int_{P_2R} e + C (R^-2 int_{P_2R} |u - h0|^2 + int_{P_2R} h0-terms)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridTerms {
    pub inner_energy: f64,
    pub outer_energy: f64,
    /// `R^-2 int_{P_2R cap Q} |u - h0|^2`
    pub deviation: f64,
    /// `int_{P_2R cap Q} (|grad^k h0|^2 + |grad h0|^2)`
    pub data: f64,
}

pub fn hybrid_report(cache: &TrajectoryCache, h0: &SphereField, cyl: &CylinderSpec) -> Result<HybridTerms> {
    check_lower_window(cache, cyl, 2.0)?;
    let r = cyl.radius;
    let (inner, _) = cache.cylinder_energy(&cyl.center, r, Density::GinzburgLandau)?;
    let outer_cyl = cyl.scaled(2.0);
    let (outer, _) = cache.cylinder_energy(&outer_cyl.center, outer_cyl.radius, Density::GinzburgLandau)?;
    let (dev, _) = cache.cylinder_deviation(h0, &outer_cyl.center, outer_cyl.radius)?;
    let (lo, hi) = cache.clipped_window(&outer_cyl.center, outer_cyl.radius);
    let data = h0_data_integral(cache, h0, &outer_cyl.center.x, outer_cyl.radius)? * (hi - lo);
    Ok(HybridTerms {
        inner_energy: inner,
        outer_energy: outer,
        deviation: dev / (r * r),
        data,
    })
}

/// Smallest `C` on the grid closing the hybrid inequality at `eps0`.
pub fn fit_hybrid(terms: &HybridTerms, eps0: f64, c_grid: &[f64]) -> Option<f64> {
    let mut grid = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.into_iter()
        .find(|&c| terms.inner_energy <= eps0 * terms.outer_energy + c * (terms.deviation + terms.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::{solve_harmonic_extension, BoundaryData, EllipticOptions};
    use crate::field::InitialData;
    use crate::flow::{run_glhf, PenaltySchedule, SolverConfig};
    use crate::geometry::Domain;

    fn disc(h: f64) -> Arc<Grid> {
        Arc::new(Grid::build(Domain::unit_ball(2), h).unwrap())
    }

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..=n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn kernel_spot_values() {
        let z0 = SpacetimePoint::new(1.0, vec![0.0, 0.0]);
        let g = backward_heat_kernel(&z0, 1.0 - 1.0 / (4.0 * PI), &[0.0, 0.0]).unwrap();
        assert!((g - 1.0).abs() < 1e-14);
        assert!(matches!(
            backward_heat_kernel(&z0, 1.0, &[0.0, 0.0]),
            Err(Error::TimeNotBeforeCenter { .. })
        ));
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let v = backward_heat_kernel(&z0, 0.5, &[0.5 * k as f64, 0.0]).unwrap();
            assert!(v < prev || v == 0.0);
            prev = v;
        }
        assert!(prev < 1e-30);
    }

    /// Lattice quadrature of G over a box of half-width 8 sqrt(t0 - t).
    fn kernel_mass(d: usize, s: f64, h: f64) -> f64 {
        let half = 8.0 * s.sqrt();
        let n = (half / h).ceil() as i64;
        let z0 = SpacetimePoint::new(s, vec![0.0; d]);
        let mut acc = 0.0;
        let mut idx = vec![-n; d];
        let mut x = vec![0.0; d];
        loop {
            for a in 0..d {
                x[a] = idx[a] as f64 * h;
            }
            acc += backward_heat_kernel(&z0, 0.0, &x).unwrap();
            let mut a = 0;
            loop {
                if a == d {
                    return acc * h.powi(d as i32);
                }
                if idx[a] < n {
                    idx[a] += 1;
                    break;
                }
                idx[a] = -n;
                a += 1;
            }
        }
    }

    #[test]
    fn kernel_integrates_to_one_when_resolved() {
        for d in [2, 3] {
            let h = 1.0 / 32.0;
            // sqrt(4 s) = 4h
            let s = 4.0 * h * h;
            let m = kernel_mass(d, s, h);
            assert!((m - 1.0).abs() < 1e-6, "d={d}: {m}");
        }
    }

    #[test]
    fn weight_spot_values() {
        let x0 = [0.0, 0.0];
        assert_eq!(weight_d(&x0, &x0, 2.0), 1.0);
        assert_eq!(weight_d(&x0, &[2.0, 0.0], 2.0), 2.0);
        assert_eq!(weight_d(&x0, &[0.0, 1.0], 2.0), 1.25);
    }

    #[test]
    fn energy_report_is_consistent() {
        let g = disc(1.0 / 16.0);
        let mut u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        for &i in g.interior_nodes() {
            u.value_mut(i).iter_mut().for_each(|v| *v *= 0.9);
        }
        let rep = energy_report(&u, 37.0);
        let sum: f64 = rep.density.iter().sum::<f64>() * g.cell_volume();
        assert!((sum - rep.gl_energy).abs() <= 1e-12 * rep.gl_energy);
        assert!((0.5 * rep.dirichlet_energy + rep.penalty_part - rep.gl_energy).abs() <= 1e-12 * rep.gl_energy);
        assert!(rep.penalty_part > 0.0);
    }

    fn frozen_hedgehog(h: f64) -> Trajectory {
        let g = Arc::new(Grid::build(Domain::unit_ball(3), h).unwrap());
        let u = InitialData::EquatorHedgehog.generate(&g, 2).unwrap();
        Trajectory::frozen(u, &times(256, 1.0 / 512.0)).unwrap()
    }

    #[test]
    fn constant_trajectory_has_zero_weighted_energy() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Constant { value: None }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(u, &times(64, 1.0 / 64.0)).unwrap();
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.9, vec![0.0, 0.0]);
        assert_eq!(cache.weighted_annulus_energy(&z0, 0.2, Density::GinzburgLandau).unwrap(), 0.0);
        let rep = monotonicity_report(&cache, &z0, 0.2, 0.4, &MonotonicityOptions::default()).unwrap();
        assert_eq!(rep.inner_energy, 0.0);
        assert_eq!(rep.outer_energy, 0.0);
        assert_eq!(rep.speed_term, 0.0);
        assert_eq!(rep.defect, 0.0);
    }

    #[test]
    fn hedgehog_annulus_energy_is_scale_invariant() {
        let traj = frozen_hedgehog(1.0 / 32.0);
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.3, vec![0.0; 3]);
        let a = cache.weighted_annulus_energy(&z0, 0.125, Density::GinzburgLandau).unwrap();
        let b = cache.weighted_annulus_energy(&z0, 0.25, Density::GinzburgLandau).unwrap();
        let spread = (a - b).abs() / a.max(b);
        assert!(spread <= 0.2, "{a} vs {b}");
        // whole-space value ln(4)/2
        assert!((a - 0.5 * 4f64.ln()).abs() < 0.15 * a, "{a}");
    }

    #[test]
    fn annulus_energy_is_linear_in_the_density() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        // doubling the Dirichlet density: scale values by sqrt 2 and compare |grad u|^2 integrals
        let v = SphereField::from_fn(g.clone(), 2, |i, _| u.value(i).iter().map(|a| a * 2f64.sqrt()).collect());
        let ta = Trajectory::frozen(u, &times(32, 1.0 / 32.0)).unwrap();
        let tb = Trajectory::frozen(v, &times(32, 1.0 / 32.0)).unwrap();
        let z0 = SpacetimePoint::new(0.9, vec![0.1, 0.0]);
        let a = TrajectoryCache::new(&ta).weighted_annulus_energy(&z0, 0.2, Density::GradientSquared).unwrap();
        let b = TrajectoryCache::new(&tb).weighted_annulus_energy(&z0, 0.2, Density::GradientSquared).unwrap();
        assert!((b - 2.0 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn window_outside_trajectory_is_rejected() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(u, &times(8, 0.0625)).unwrap();
        let z0 = SpacetimePoint::new(0.1, vec![0.0, 0.0]);
        assert!(matches!(
            weighted_annulus_energy(&traj, &z0, 0.2),
            Err(Error::WindowOutsideTrajectory { .. })
        ));
    }

    #[test]
    fn frozen_speed_term_is_the_radial_part() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(u.clone(), &times(64, 1.0 / 64.0)).unwrap();
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.9, vec![0.0, 0.0]);
        let r = 0.2;
        let s = cache.speed_term(&z0, r).unwrap();
        // oracle: direct sum of |(x - x0) . grad u|^2 / (4 (t0 - t)) G
        let mut oracle = 0.0;
        let mut grad = vec![0.0; 6];
        for seg in cache.segments(z0.t - 4.0 * r * r, z0.t - r * r) {
            let st = z0.t - seg.mid;
            for &i in g.interior_nodes() {
                let x = g.point(i);
                u.gradient_at(i, &mut grad);
                let mut q = 0.0;
                for c in 0..3 {
                    let rad = x[0] * grad[c] + x[1] * grad[3 + c];
                    q += rad * rad / (4.0 * st);
                }
                oracle += seg.len * q * backward_heat_kernel(&z0, seg.mid, &x).unwrap() * g.cell_volume();
            }
        }
        assert!(s > 0.0);
        assert!((s - oracle).abs() <= 1e-12 * oracle);
    }

    fn cap_run(h: f64, t_final: f64) -> Trajectory {
        let g = disc(h);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let cfg = SolverConfig::auto(&g, t_final).with_stride(4);
        run_glhf(&u, &cfg, &PenaltySchedule::new(100.0).unwrap()).unwrap()
    }

    #[test]
    fn cap_run_admits_a_zero_defect_fit() {
        let traj = cap_run(1.0 / 16.0, 0.5);
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.45, vec![0.1, 0.0]);
        for form in [MonotonicityForm::Linear, MonotonicityForm::Exponential] {
            let opts = MonotonicityOptions {
                form,
                ..Default::default()
            };
            let rep = monotonicity_report(&cache, &z0, 0.15, 0.3, &opts).unwrap();
            assert!(rep.inner_energy > 0.0 && rep.speed_term > 0.0 && rep.outer_energy > 0.0);
            assert_eq!(rep.defect, 0.0, "{rep:?}");
        }
    }

    #[test]
    fn monotonicity_rejects_large_outer_radius() {
        let traj = cap_run(1.0 / 16.0, 0.5);
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.36, vec![0.0, 0.0]);
        assert!(monotonicity_report(&cache, &z0, 0.1, 0.3, &MonotonicityOptions::default()).is_err());
    }

    #[test]
    fn main2_constant_data_leaves_only_the_remainder() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Constant { value: None }.generate(&g, 2).unwrap();
        let z0 = SpacetimePoint::new(1.0, vec![0.0, 0.0]);
        let m = main2_lhs(&u, &z0, 0.1, 0.5, 1.0, false).unwrap();
        assert_eq!(m.bracket(), 0.0);
        assert!((m.value - 0.1).abs() < 1e-15);
    }

    #[test]
    fn main2_scales_quadratically_with_gradients() {
        let g = disc(1.0 / 16.0);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let s = 3.0;
        let v = SphereField::from_fn(g.clone(), 2, |i, _| u.value(i).iter().map(|a| s * a).collect());
        let z0 = SpacetimePoint::new(1.0, vec![0.2, 0.1]);
        let a = main2_lhs(&u, &z0, 0.1, 0.5, 1.0, false).unwrap();
        let b = main2_lhs(&v, &z0, 0.1, 0.5, 1.0, false).unwrap();
        assert!(a.boundary_term > 0.0);
        assert!((b.bracket() - s * s * a.bracket()).abs() <= 1e-10 * b.bracket());
    }

    #[test]
    fn main2_decreases_with_gradient_magnitude() {
        let g = disc(1.0 / 32.0);
        let z0 = SpacetimePoint::new(1.0, vec![0.0, 0.0]);
        let steep = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        // halving the polar angle halves every gradient to leading order
        let mild = InitialData::Cap { latitude: 0.5 }.generate(&g, 2).unwrap();
        let a = main2_lhs(&steep, &z0, 0.1, 0.5, 1.0, false).unwrap();
        let b = main2_lhs(&mild, &z0, 0.1, 0.5, 1.0, false).unwrap();
        assert!(a.value.is_finite() && a.value > 0.0);
        assert!(b.value < a.value);
        let w = main2_lhs(&steep, &z0, 0.1, 0.5, 1.0, true).unwrap();
        // d = 2 makes the time weight trivial
        assert!((w.boundary_term - a.boundary_term).abs() <= 1e-12 * a.boundary_term);
    }

    fn first_harmonic_h0(g: &Arc<Grid>) -> SphereField {
        let eval = |x: &[f64]| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            vec![x[0] / r, x[1] / r, 0.0]
        };
        solve_harmonic_extension(
            g,
            BoundaryData::Function {
                target_dim: 2,
                eval: &eval,
            },
            &EllipticOptions::default(),
        )
        .unwrap()
        .field
    }

    #[test]
    fn reverse_poincare_on_static_extension() {
        let g = disc(1.0 / 16.0);
        let h0 = first_harmonic_h0(&g);
        let traj = Trajectory::frozen(h0.clone(), &times(32, 1.0 / 32.0)).unwrap();
        let cache = TrajectoryCache::new(&traj);
        let cyl = CylinderSpec::new(SpacetimePoint::new(0.5, vec![0.0, 0.0]), 0.2);
        let rp = reverse_poincare_ratio(&cache, &h0, &cyl).unwrap();
        assert!(rp.lhs > 0.0);
        assert!(rp.deviation.abs() < 1e-30);
        assert!(rp.data > 0.0);
        assert!((rp.lhs / rp.rhs_without_constant()).is_finite());
    }

    #[test]
    fn reverse_poincare_deviation_is_quadratic() {
        let g = disc(1.0 / 16.0);
        let h0 = first_harmonic_h0(&g);
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let u2 = SphereField::from_fn(g.clone(), 2, |i, _| {
            u.value(i).iter().zip(h0.value(i)).map(|(a, b)| b + 2.0 * (a - b)).collect()
        });
        let cyl = CylinderSpec::new(SpacetimePoint::new(0.5, vec![0.0, 0.0]), 0.2);
        let t1 = Trajectory::frozen(u, &times(32, 1.0 / 32.0)).unwrap();
        let t2 = Trajectory::frozen(u2, &times(32, 1.0 / 32.0)).unwrap();
        let a = reverse_poincare_ratio(&TrajectoryCache::new(&t1), &h0, &cyl).unwrap();
        let b = reverse_poincare_ratio(&TrajectoryCache::new(&t2), &h0, &cyl).unwrap();
        assert!((b.deviation - 4.0 * a.deviation).abs() <= 1e-12 * b.deviation);
    }

    #[test]
    fn hybrid_terms_on_constant_and_cap_runs() {
        let g = disc(1.0 / 16.0);
        let c = InitialData::Constant { value: None }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(c.clone(), &times(32, 1.0 / 32.0)).unwrap();
        let cyl = CylinderSpec::new(SpacetimePoint::new(0.5, vec![0.0, 0.0]), 0.2);
        let t = hybrid_report(&TrajectoryCache::new(&traj), &c, &cyl).unwrap();
        assert_eq!((t.inner_energy, t.outer_energy, t.deviation + t.data), (0.0, 0.0, 0.0));

        let traj = cap_run(1.0 / 16.0, 0.5);
        let h0 = solve_harmonic_extension(
            traj.grid(),
            BoundaryData::Nodes(&traj.snapshots()[0].field),
            &EllipticOptions::default(),
        )
        .unwrap()
        .field;
        let cache = TrajectoryCache::new(&traj);
        let t = hybrid_report(&cache, &h0, &cyl).unwrap();
        assert!(t.inner_energy <= t.outer_energy + 1e-12);
        assert!(fit_hybrid(&t, 0.5, &logspace(-3.0, 4.0, 71)).is_some());
    }
}
