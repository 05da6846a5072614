//! Local scaled parabolic energy, singular-point detection by thresholding it
//! over a finite radius scan, and parabolic box-counting of the flagged set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{Density, SpacetimePoint, TrajectoryCache};
use crate::error::{Error, Result};
use crate::geometry::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyMode {
    /// `(1 / R^d) int e_lambda`
    Gl,
    /// `(1 / (2 R^d)) int |grad u|^2`
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularConfig {
    pub eps0: f64,
    /// Decreasing radii; a point is flagged when every radius reaches `eps0`.
    pub radii: Vec<f64>,
    /// Spatial scan on lattice nodes whose coordinates are multiples of this.
    pub space_stride: usize,
    /// Scan every `time_stride`-th snapshot.
    pub time_stride: usize,
    /// Box sizes for the dimension estimate.
    pub box_deltas: Vec<f64>,
    pub mode: EnergyMode,
}

impl SingularConfig {
    /// Radii `{16h, 8h, 4h}`, spatial stride 16, boxes `{8h, 4h, 2h}`.
    pub fn for_grid(grid: &Grid, eps0: f64) -> Self {
        let h = grid.spacing();
        SingularConfig {
            eps0,
            radii: vec![16.0 * h, 8.0 * h, 4.0 * h],
            space_stride: 16,
            time_stride: 1,
            box_deltas: vec![8.0 * h, 4.0 * h, 2.0 * h],
            mode: EnergyMode::Dirichlet,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let h = grid.spacing();
        if !(self.eps0 > 0.0) {
            return Err(Error::Precondition(format!("eps0 must be positive, got {}", self.eps0)));
        }
        if self.radii.is_empty() {
            return Err(Error::Precondition("empty radius scan".into()));
        }
        if self.radii.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Precondition("radius scan must decrease strictly".into()));
        }
        if self.radii.iter().chain(&self.box_deltas).any(|&r| r < 2.0 * h * (1.0 - 1e-12)) {
            return Err(Error::Precondition(format!("radii and box sizes must be >= 2h = {}", 2.0 * h)));
        }
        if self.space_stride == 0 || self.time_stride == 0 {
            return Err(Error::Precondition("scan strides must be >= 1".into()));
        }
        Ok(())
    }
}

/// `M(P_R(z0) cap Q)` in the requested mode.
pub fn local_scaled_energy(cache: &TrajectoryCache, z0: &SpacetimePoint, r: f64, mode: EnergyMode) -> Result<f64> {
    let h = cache.grid().spacing();
    if r < 2.0 * h * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!("radius {r} below 2h = {}", 2.0 * h)));
    }
    let scale = r.powi(cache.grid().dim() as i32);
    Ok(match mode {
        EnergyMode::Gl => cache.cylinder_energy(z0, r, Density::GinzburgLandau)?.0 / scale,
        EnergyMode::Dirichlet => cache.cylinder_energy(z0, r, Density::GradientSquared)?.0 / (2.0 * scale),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub snapshot: usize,
    pub node: usize,
    pub t: f64,
    pub x: Vec<f64>,
    /// Scaled energy per scan radius.
    pub values: Vec<f64>,
    /// Largest energy density over the smallest cylinder.
    pub sup_density: f64,
    /// `sup_density * R_min^2`, bounded by a constant at regular points.
    pub sup_scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCount {
    pub deltas: Vec<f64>,
    pub counts: Vec<usize>,
    /// Least-squares slope of `log N` against `log(1/delta)`.
    pub dimension: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularReport {
    pub eps0: f64,
    pub radii: Vec<f64>,
    pub scanned: usize,
    pub flagged: Vec<FlaggedPoint>,
    /// Present when at least one point is flagged.
    pub box_count: Option<BoxCount>,
}

impl SingularReport {
    pub fn flagged_points(&self) -> Vec<SpacetimePoint> {
        self.flagged.iter().map(|f| SpacetimePoint::new(f.t, f.x.clone())).collect()
    }
}

/// Spatial scan nodes: interior nodes on the coarse lattice of the stride.
fn scan_nodes(grid: &Grid, stride: usize) -> Vec<usize> {
    let s = stride as i64;
    grid.interior_nodes()
        .iter()
        .copied()
        .filter(|&i| grid.lattice_coords(i).iter().all(|c| c.rem_euclid(s) == 0))
        .collect()
}

fn sup_density(cache: &TrajectoryCache, z0: &SpacetimePoint, r: f64, mode: EnergyMode) -> f64 {
    let traj = cache.trajectory();
    let (lo, hi) = cache.clipped_window(z0, r);
    let nodes = cache.interior_in_ball(&z0.x, r);
    let mut sup: f64 = 0.0;
    for seg in cache.segments(lo, hi) {
        let dens = cache.densities(seg.snapshot);
        let strength = traj.penalty_strength(seg.mid);
        for &i in &nodes {
            let e = match mode {
                EnergyMode::Gl => cache.density_value(&dens, Density::GinzburgLandau, i, strength),
                EnergyMode::Dirichlet => 0.5 * dens.grad_sq[i],
            };
            sup = sup.max(e);
        }
    }
    sup
}

/// Flags scan points whose scaled energy reaches `eps0` at every scan radius.
/// The first and last snapshot times are not scanned.
pub fn detect_singular_set(cache: &TrajectoryCache, cfg: &SingularConfig) -> Result<SingularReport> {
    let grid = cache.grid().clone();
    cfg.validate(&grid)?;
    let snaps = cache.trajectory().snapshots();
    let nodes = scan_nodes(&grid, cfg.space_stride);
    let times: Vec<usize> = (1..snaps.len().saturating_sub(1)).step_by(cfg.time_stride).collect();
    let points: Vec<(usize, usize)> = times
        .iter()
        .flat_map(|&k| nodes.iter().map(move |&i| (k, i)))
        .collect();
    let results: Vec<Result<Option<FlaggedPoint>>> = points
        .par_iter()
        .map(|&(k, i)| {
            let z0 = SpacetimePoint::new(snaps[k].t, grid.point(i));
            let mut values = Vec::with_capacity(cfg.radii.len());
            for &r in &cfg.radii {
                let m = local_scaled_energy(cache, &z0, r, cfg.mode)?;
                if m < cfg.eps0 {
                    return Ok(None);
                }
                values.push(m);
            }
            let r_min = *cfg.radii.last().unwrap();
            let sup = sup_density(cache, &z0, r_min, cfg.mode);
            Ok(Some(FlaggedPoint {
                snapshot: k,
                node: i,
                t: z0.t,
                x: z0.x,
                values,
                sup_density: sup,
                sup_scaled: sup * r_min * r_min,
            }))
        })
        .collect();
    let mut flagged = Vec::new();
    for r in results {
        if let Some(f) = r? {
            flagged.push(f);
        }
    }
    let box_count = if flagged.is_empty() || cfg.box_deltas.len() < 3 {
        None
    } else {
        let pts: Vec<SpacetimePoint> = flagged.iter().map(|f| SpacetimePoint::new(f.t, f.x.clone())).collect();
        Some(parabolic_box_count(&pts, &cfg.box_deltas)?)
    };
    Ok(SingularReport {
        eps0: cfg.eps0,
        radii: cfg.radii.clone(),
        scanned: points.len(),
        flagged,
        box_count,
    })
}

/// Greedy cover by parabolic boxes `[t, t + delta^2) x (cube of side delta)`
/// anchored at the earliest uncovered point, for each `delta`.
pub fn parabolic_box_count(points: &[SpacetimePoint], deltas: &[f64]) -> Result<BoxCount> {
    if deltas.len() < 3 {
        return Err(Error::TooFewScales(deltas.len()));
    }
    if points.is_empty() {
        return Err(Error::Precondition("no points to cover".into()));
    }
    let mut deltas = deltas.to_vec();
    deltas.sort_by(|a, b| b.total_cmp(a));
    deltas.dedup();
    if deltas.len() < 3 {
        return Err(Error::TooFewScales(deltas.len()));
    }
    let mut order: Vec<&SpacetimePoint> = points.iter().collect();
    order.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| {
        a.x.iter()
            .zip(&b.x)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }));
    let mut counts = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let span = delta * delta;
        let half = 0.5 * delta;
        let mut covered = vec![false; order.len()];
        let mut n = 0;
        for a in 0..order.len() {
            if covered[a] {
                continue;
            }
            n += 1;
            let anchor = order[a];
            for b in a..order.len() {
                let p = order[b];
                if p.t >= anchor.t + span {
                    break;
                }
                if !covered[b] && p.x.iter().zip(&anchor.x).all(|(u, v)| (u - v).abs() <= half) {
                    covered[b] = true;
                }
            }
        }
        counts.push(n);
    }
    // greedy covers are upper bounds; a finer cover never needs fewer boxes
    for j in 1..counts.len() {
        counts[j] = counts[j].max(counts[j - 1]);
    }
    let xs: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    Ok(BoxCount {
        deltas,
        counts,
        dimension: slope(&xs, &ys),
    })
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub radius: f64,
    /// `int_{P_r cap Q} |grad u|^2`
    pub energy: f64,
    /// `eps0^2 r^d / 2`
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallEnergyCertificate {
    pub rows: Vec<CertificateRow>,
    /// Largest radius at and below which every row passes.
    pub r_star: Option<f64>,
}

impl SmallEnergyCertificate {
    pub fn passed_everywhere(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// `d0 / 2^k` for `k >= 1` down to `min_radius`.
pub fn dyadic_radii(d0: f64, min_radius: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = 0.5 * d0;
    while r >= min_radius * (1.0 - 1e-12) {
        out.push(r);
        r *= 0.5;
    }
    out
}

/// Checks `int_{P_r(z0) cap Q} |grad u|^2 < eps0^2 r^d / 2` at each radius.
pub fn small_energy_certificate(
    cache: &TrajectoryCache,
    z0: &SpacetimePoint,
    radii: &[f64],
    eps0: f64,
) -> Result<SmallEnergyCertificate> {
    let d = cache.grid().dim() as i32;
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let (energy, _) = cache.cylinder_energy(z0, r, Density::GradientSquared)?;
        let threshold = 0.5 * eps0 * eps0 * r.powi(d);
        rows.push(CertificateRow {
            radius: r,
            energy,
            threshold,
            passed: energy < threshold,
        });
    }
    let mut sorted: Vec<&CertificateRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.radius.total_cmp(&b.radius));
    let mut r_star = None;
    for row in sorted {
        if !row.passed {
            break;
        }
        r_star = Some(row.radius);
    }
    Ok(SmallEnergyCertificate { rows, r_star })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::field::InitialData;
    use crate::flow::{run_glhf, PenaltySchedule, SolverConfig, Trajectory};
    use crate::geometry::Domain;

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..=n).map(|k| k as f64 * dt).collect()
    }

    fn frozen_hedgehog(h: f64, n: usize, dt: f64) -> Trajectory {
        let g = Arc::new(Grid::build(Domain::unit_ball(3), h).unwrap());
        let u = InitialData::EquatorHedgehog.generate(&g, 2).unwrap();
        Trajectory::frozen(u, &times(n, dt)).unwrap()
    }

    fn cap_run() -> Trajectory {
        let g = Arc::new(Grid::build(Domain::unit_ball(2), 1.0 / 16.0).unwrap());
        let u = InitialData::Cap { latitude: 1.0 }.generate(&g, 2).unwrap();
        let cfg = SolverConfig::auto(&g, 0.5).with_stride(8);
        run_glhf(&u, &cfg, &PenaltySchedule::new(100.0).unwrap()).unwrap()
    }

    #[test]
    fn constant_trajectory_has_zero_scaled_energy() {
        let g = Arc::new(Grid::build(Domain::unit_ball(2), 1.0 / 16.0).unwrap());
        let u = InitialData::Constant { value: None }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(u, &times(16, 1.0 / 16.0)).unwrap();
        let cache = TrajectoryCache::new(&traj);
        for mode in [EnergyMode::Gl, EnergyMode::Dirichlet] {
            let z0 = SpacetimePoint::new(0.5, vec![0.1, 0.2]);
            assert_eq!(local_scaled_energy(&cache, &z0, 0.25, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn hedgehog_scaled_energy_near_eight_pi() {
        let traj = frozen_hedgehog(1.0 / 32.0, 64, 1.0 / 64.0);
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.5, vec![0.0; 3]);
        let target = 8.0 * std::f64::consts::PI;
        for r in [0.125, 0.25] {
            let m = local_scaled_energy(&cache, &z0, r, EnergyMode::Dirichlet).unwrap();
            assert!((m - target).abs() < 0.15 * target, "R={r}: {m}");
        }
    }

    #[test]
    fn smaller_cylinders_carry_less_scaled_energy_on_smooth_runs() {
        let traj = cap_run();
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.25, vec![0.2, -0.1]);
        let mut r = 0.5;
        while r >= 0.25 {
            let big = local_scaled_energy(&cache, &z0, r, EnergyMode::Gl).unwrap();
            let small = local_scaled_energy(&cache, &z0, 0.5 * r, EnergyMode::Gl).unwrap();
            assert!(small <= 1.05 * big, "R={r}: {small} > {big}");
            let dir = local_scaled_energy(&cache, &z0, r, EnergyMode::Dirichlet).unwrap();
            assert!(big >= dir);
            r *= 0.5;
        }
    }

    #[test]
    fn empty_intersection_is_reported() {
        let traj = cap_run();
        let cache = TrajectoryCache::new(&traj);
        let z0 = SpacetimePoint::new(0.25, vec![3.0, 0.0]);
        assert!(matches!(
            local_scaled_energy(&cache, &z0, 0.25, EnergyMode::Gl),
            Err(Error::EmptyIntersection { .. })
        ));
    }

    #[test]
    fn cap_run_has_no_singular_points() {
        let traj = cap_run();
        let cache = TrajectoryCache::new(&traj);
        let mut cfg = SingularConfig::for_grid(traj.grid(), 1.0);
        cfg.space_stride = 4;
        cfg.time_stride = 4;
        let rep = detect_singular_set(&cache, &cfg).unwrap();
        assert!(rep.scanned > 0);
        assert!(rep.flagged.is_empty());
        assert!(rep.box_count.is_none());
    }

    #[test]
    fn hedgehog_flags_the_origin_line() {
        let traj = frozen_hedgehog(1.0 / 16.0, 64, 1.0 / 128.0);
        let cache = TrajectoryCache::new(&traj);
        let mut cfg = SingularConfig::for_grid(traj.grid(), 1.0);
        cfg.radii = vec![0.25, 0.125];
        cfg.space_stride = 8;
        let rep = detect_singular_set(&cache, &cfg).unwrap();
        assert_eq!(rep.flagged.len(), 63);
        assert!(rep.flagged.iter().all(|f| f.x.iter().all(|c| c.abs() < 1e-12)));
        assert!(rep.flagged.iter().all(|f| f.sup_scaled > 0.0));

        cfg.eps0 = 1e6;
        assert!(detect_singular_set(&cache, &cfg).unwrap().flagged.is_empty());
    }

    #[test]
    fn flagged_set_shrinks_as_threshold_grows() {
        let traj = frozen_hedgehog(1.0 / 16.0, 16, 1.0 / 32.0);
        let cache = TrajectoryCache::new(&traj);
        let mut cfg = SingularConfig::for_grid(traj.grid(), 0.5);
        cfg.radii = vec![0.25, 0.125];
        cfg.space_stride = 2;
        let mut prev: Option<Vec<(usize, usize)>> = None;
        for eps in [0.5, 2.0, 10.0, 30.0] {
            cfg.eps0 = eps;
            let set: Vec<(usize, usize)> = detect_singular_set(&cache, &cfg)
                .unwrap()
                .flagged
                .iter()
                .map(|f| (f.snapshot, f.node))
                .collect();
            if let Some(p) = &prev {
                assert!(set.iter().all(|s| p.contains(s)));
            }
            prev = Some(set);
        }
    }

    #[test]
    fn box_count_on_synthetic_sets() {
        let deltas = [0.25, 0.125, 0.0625];
        let single = parabolic_box_count(&[SpacetimePoint::new(0.3, vec![0.0, 0.0])], &deltas).unwrap();
        assert_eq!(single.counts, vec![1, 1, 1]);
        assert!(single.dimension.abs() < 1e-12);

        let line: Vec<SpacetimePoint> = (1..512).map(|k| SpacetimePoint::new(k as f64 / 1024.0, vec![0.0; 3])).collect();
        let bc = parabolic_box_count(&line, &deltas).unwrap();
        assert!((bc.dimension - 2.0).abs() <= 0.3, "{bc:?}");

        let seg: Vec<SpacetimePoint> = (0..=256).map(|k| SpacetimePoint::new(0.5, vec![k as f64 / 256.0, 0.0])).collect();
        let bc = parabolic_box_count(&seg, &deltas).unwrap();
        assert!((bc.dimension - 1.0).abs() <= 0.3, "{bc:?}");
        assert!(bc.counts.windows(2).all(|w| w[0] <= w[1]));

        assert!(matches!(
            parabolic_box_count(&line, &deltas[..2]),
            Err(Error::TooFewScales(2))
        ));
    }

    #[test]
    fn small_energy_certificates() {
        let g = Arc::new(Grid::build(Domain::unit_ball(2), 1.0 / 16.0).unwrap());
        let c = InitialData::Constant { value: None }.generate(&g, 2).unwrap();
        let traj = Trajectory::frozen(c, &times(16, 1.0 / 16.0)).unwrap();
        let z0 = SpacetimePoint::new(0.5, vec![0.0, 0.0]);
        let radii = dyadic_radii(2.0, 0.125);
        assert_eq!(radii, vec![1.0, 0.5, 0.25, 0.125]);
        let cert = small_energy_certificate(&TrajectoryCache::new(&traj), &z0, &radii, 0.5).unwrap();
        assert!(cert.passed_everywhere());

        let traj = frozen_hedgehog(1.0 / 16.0, 64, 1.0 / 64.0);
        let z0 = SpacetimePoint::new(0.5, vec![0.0; 3]);
        let cert = small_energy_certificate(&TrajectoryCache::new(&traj), &z0, &dyadic_radii(2.0, 0.125), 0.5).unwrap();
        assert!(cert.rows.iter().all(|r| !r.passed));
        assert_eq!(cert.r_star, None);
    }
}
