//! Domains in R^d, masked uniform lattices, boundary frames and the
//! boundary convexity check.
//!
//! A [`Grid`] is a uniform Cartesian lattice laid over the bounding box of a
//! [`Domain`]. Nodes strictly inside the domain are [`NodeClass::Interior`];
//! nodes outside (or on the boundary) that touch an interior node along an
//! axis are [`NodeClass::Boundary`] and carry Dirichlet data; everything else
//! is [`NodeClass::Exterior`] and is never read by the solvers.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with a level value above `-INSIDE_EPS` count as outside.
const INSIDE_EPS: f64 = 1e-12;

/// Minimum number of cells across the diameter accepted by [`Grid::build`].
pub const MIN_CELLS_ACROSS: f64 = 8.0;

/// Lower boundary of a graph subdomain, written in the flattened chart
/// around the base point `x0 = 0` so that `phi(0) = 0` and `grad phi(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphProfile {
    /// `phi(x') = x'^T H x' / 2`.
    Quadratic { hessian: Vec<Vec<f64>> },
    /// Lower cap of a sphere of the given radius: `phi(x') = r - sqrt(r^2 - |x'|^2)`.
    Spherical { radius: f64 },
}

impl GraphProfile {
    pub fn flat(tangent_dim: usize) -> Self {
        GraphProfile::Quadratic {
            hessian: vec![vec![0.0; tangent_dim]; tangent_dim],
        }
    }

    pub fn paraboloid(tangent_dim: usize) -> Self {
        // |x'|^2 has Hessian 2 I
        let mut hessian = vec![vec![0.0; tangent_dim]; tangent_dim];
        for (i, row) in hessian.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        GraphProfile::Quadratic { hessian }
    }

    pub fn eval(&self, xp: &[f64]) -> f64 {
        match self {
            GraphProfile::Quadratic { hessian } => {
                let mut acc = 0.0;
                for (i, row) in hessian.iter().enumerate() {
                    for (j, hij) in row.iter().enumerate() {
                        acc += hij * xp[i] * xp[j];
                    }
                }
                0.5 * acc
            }
            GraphProfile::Spherical { radius } => {
                let r2: f64 = xp.iter().map(|v| v * v).sum();
                radius - (radius * radius - r2).max(0.0).sqrt()
            }
        }
    }

    pub fn gradient(&self, xp: &[f64]) -> Vec<f64> {
        match self {
            // d/dx_i (x^T H x / 2) = ((H + H^T) x)_i / 2
            GraphProfile::Quadratic { hessian } => (0..hessian.len())
                .map(|i| {
                    (0..hessian.len())
                        .map(|j| 0.5 * (hessian[i][j] + hessian[j][i]) * xp[j])
                        .sum()
                })
                .collect(),
            GraphProfile::Spherical { radius } => {
                let r2: f64 = xp.iter().map(|v| v * v).sum();
                let root = (radius * radius - r2).max(1e-300).sqrt();
                xp.iter().map(|v| v / root).collect()
            }
        }
    }

    fn tangent_dim(&self) -> Option<usize> {
        match self {
            GraphProfile::Quadratic { hessian } => Some(hessian.len()),
            GraphProfile::Spherical { .. } => None,
        }
    }
}

/// Spatial domain Omega.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Domain {
    UnitBall {
        d: usize,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `{|x| < 1, x_d > 0}`.
    HalfBall {
        d: usize,
    },
    /// `{ |x'_i| < half_width, phi(x') < x_d < height }`, with base point at the origin.
    GraphSubdomain {
        d: usize,
        half_width: f64,
        height: f64,
        profile: GraphProfile,
    },
}

impl Domain {
    pub fn unit_ball(d: usize) -> Self {
        Domain::UnitBall { d }
    }

    pub fn unit_box(d: usize) -> Self {
        Domain::Box {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::UnitBall { d } | Domain::HalfBall { d } | Domain::GraphSubdomain { d, .. } => *d,
            Domain::Box { lo, .. } => lo.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Domain::UnitBall { .. } => "unit-ball",
            Domain::Box { .. } => "box",
            Domain::HalfBall { .. } => "half-ball",
            Domain::GraphSubdomain { .. } => "graph-subdomain",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d < 2 {
            return Err(Error::InvalidDomain(format!("dimension {d} < 2")));
        }
        match self {
            Domain::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::InvalidDomain("lo/hi length mismatch".into()));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
                    return Err(Error::InvalidDomain("box needs lo < hi on every axis".into()));
                }
            }
            Domain::GraphSubdomain {
                half_width,
                height,
                profile,
                ..
            } => {
                if !(*half_width > 0.0) {
                    return Err(Error::InvalidDomain("half_width must be positive".into()));
                }
                if let Some(td) = profile.tangent_dim() {
                    if td != d - 1 {
                        return Err(Error::InvalidDomain(format!(
                            "profile Hessian is {td}x{td}, expected {}x{}",
                            d - 1,
                            d - 1
                        )));
                    }
                }
                if let GraphProfile::Spherical { radius } = profile {
                    let reach = half_width * ((d - 1) as f64).sqrt();
                    if !(*radius > reach) {
                        return Err(Error::InvalidDomain(
                            "spherical profile radius must exceed the patch half-diagonal".into(),
                        ));
                    }
                }
                let zero = vec![0.0; d - 1];
                let phi0 = profile.eval(&zero);
                let grad0 = profile.gradient(&zero);
                if phi0.abs() > 1e-10 || grad0.iter().any(|g| g.abs() > 1e-10) {
                    return Err(Error::InvalidDomain(
                        "graph chart must satisfy phi(0) = 0 and grad phi(0) = 0".into(),
                    ));
                }
                let (_, phi_max) = self.graph_range();
                if !(*height > phi_max) {
                    return Err(Error::InvalidDomain(format!(
                        "height {height} must exceed max phi {phi_max} on the patch"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Diameter `d0`. Exact for balls, half-balls and boxes; for graph
    /// subdomains it is the diagonal of the bounding box (an upper bound).
    pub fn diameter(&self) -> f64 {
        match self {
            Domain::UnitBall { .. } | Domain::HalfBall { .. } => 2.0,
            Domain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt(),
            Domain::GraphSubdomain {
                d,
                half_width,
                height,
                ..
            } => {
                let (phi_min, _) = self.graph_range();
                let vertical = height - phi_min;
                ((d - 1) as f64 * 4.0 * half_width * half_width + vertical * vertical).sqrt()
            }
        }
    }

    /// Center and radius used to normalize initial-data generators.
    pub fn center_and_radius(&self) -> (Vec<f64>, f64) {
        let d = self.dim();
        match self {
            Domain::Box { lo, hi } => (
                lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
                0.5 * self.diameter(),
            ),
            Domain::GraphSubdomain { height, .. } => {
                let mut c = vec![0.0; d];
                c[d - 1] = 0.5 * height;
                (c, 0.5 * self.diameter())
            }
            _ => (vec![0.0; d], 1.0),
        }
    }

    fn graph_range(&self) -> (f64, f64) {
        let Domain::GraphSubdomain {
            d,
            half_width,
            profile,
            ..
        } = self
        else {
            return (0.0, 0.0);
        };
        let td = d - 1;
        let per_axis = 21usize;
        let total = per_axis.pow(td as u32);
        let mut xp = vec![0.0; td];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..total {
            let mut rem = k;
            for v in xp.iter_mut() {
                let i = rem % per_axis;
                rem /= per_axis;
                *v = -half_width + 2.0 * half_width * i as f64 / (per_axis - 1) as f64;
            }
            let p = profile.eval(&xp);
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    /// Level function: negative inside, positive outside, zero on the boundary.
    pub fn level(&self, x: &[f64]) -> f64 {
        match self {
            Domain::UnitBall { .. } => norm(x) - 1.0,
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(xi, (a, b))| (a - xi).max(xi - b))
                .fold(f64::NEG_INFINITY, f64::max),
            Domain::HalfBall { d } => (norm(x) - 1.0).max(-x[d - 1]),
            Domain::GraphSubdomain {
                d,
                half_width,
                height,
                profile,
            } => {
                let xp = &x[..d - 1];
                let side = xp
                    .iter()
                    .map(|v| v.abs() - half_width)
                    .fold(f64::NEG_INFINITY, f64::max);
                (profile.eval(xp) - x[d - 1])
                    .max(x[d - 1] - height)
                    .max(side)
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.level(x) < -INSIDE_EPS
    }

    /// Nearest point of the boundary (exact for balls and boxes, the
    /// projection onto the active boundary piece otherwise).
    pub fn nearest_boundary_point(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match self {
            Domain::UnitBall { .. } => radial_unit(x),
            Domain::Box { lo, hi } => {
                if self.contains(x) {
                    // push the closest face out to the boundary
                    let mut best = (f64::INFINITY, 0usize, 0.0);
                    for a in 0..d {
                        for target in [lo[a], hi[a]] {
                            let dist = (x[a] - target).abs();
                            if dist < best.0 {
                                best = (dist, a, target);
                            }
                        }
                    }
                    let mut p = x.to_vec();
                    p[best.1] = best.2;
                    p
                } else {
                    x.iter()
                        .zip(lo.iter().zip(hi))
                        .map(|(v, (a, b))| v.clamp(*a, *b))
                        .collect()
                }
            }
            Domain::HalfBall { .. } => {
                let mut flat = x.to_vec();
                flat[d - 1] = 0.0;
                let r = norm(&flat);
                if r > 1.0 {
                    flat.iter_mut().for_each(|v| *v /= r);
                }
                let sphere = if x[d - 1] >= 0.0 {
                    radial_unit(x)
                } else {
                    let mut s = x.to_vec();
                    s[d - 1] = 0.0;
                    radial_unit(&s)
                };
                if dist(x, &flat) <= dist(x, &sphere) {
                    flat
                } else {
                    sphere
                }
            }
            Domain::GraphSubdomain {
                half_width,
                height,
                profile,
                ..
            } => {
                let xp = &x[..d - 1];
                let graph_gap = (profile.eval(xp) - x[d - 1]).abs();
                let top_gap = (x[d - 1] - height).abs();
                let (side_axis, side_gap) = xp
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, (v.abs() - half_width).abs()))
                    .fold((0, f64::INFINITY), |acc, it| if it.1 < acc.1 { it } else { acc });
                let mut p = x.to_vec();
                if graph_gap <= top_gap && graph_gap <= side_gap {
                    p[d - 1] = profile.eval(xp);
                } else if top_gap <= side_gap {
                    p[d - 1] = *height;
                } else {
                    p[side_axis] = half_width.copysign(x[side_axis]);
                }
                p
            }
        }
    }

    /// Outward unit normal at a boundary point `p`.
    pub fn outward_normal(&self, p: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match self {
            Domain::UnitBall { .. } => radial_unit(p),
            Domain::Box { lo, hi } => {
                let mut best = (f64::NEG_INFINITY, 0usize, 1.0);
                for a in 0..d {
                    let below = lo[a] - p[a];
                    let above = p[a] - hi[a];
                    if below > best.0 {
                        best = (below, a, -1.0);
                    }
                    if above > best.0 {
                        best = (above, a, 1.0);
                    }
                }
                let mut n = vec![0.0; d];
                n[best.1] = best.2;
                n
            }
            Domain::HalfBall { .. } => {
                if -p[d - 1] >= norm(p) - 1.0 {
                    let mut n = vec![0.0; d];
                    n[d - 1] = -1.0;
                    n
                } else {
                    radial_unit(p)
                }
            }
            Domain::GraphSubdomain {
                half_width,
                height,
                profile,
                ..
            } => {
                let xp = &p[..d - 1];
                let graph = profile.eval(xp) - p[d - 1];
                let top = p[d - 1] - height;
                let (side_axis, side) = xp
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, v.abs() - half_width))
                    .fold((0, f64::NEG_INFINITY), |acc, it| if it.1 > acc.1 { it } else { acc });
                let mut n = vec![0.0; d];
                if graph >= top && graph >= side {
                    let g = profile.gradient(xp);
                    n[..d - 1].copy_from_slice(&g);
                    n[d - 1] = -1.0;
                    let len = norm(&n);
                    n.iter_mut().for_each(|v| *v /= len);
                } else if top >= side {
                    n[d - 1] = 1.0;
                } else {
                    n[side_axis] = 1.0f64.copysign(p[side_axis]);
                }
                n
            }
        }
    }

    /// Fraction `eta` in (0, 1] of the segment `x -> x + h e_axis*dir` that
    /// stays inside the domain, found by bisection on the level function.
    pub fn crossing_fraction(&self, x: &[f64], axis: usize, dir: f64, h: f64) -> f64 {
        let mut p = x.to_vec();
        let mut at = |s: f64| {
            p[axis] = x[axis] + dir * s * h;
            self.level(&p)
        };
        if at(1.0) < 0.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if at(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Classification of a lattice node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    Interior,
    Boundary,
    Exterior,
}

/// Uniform lattice over a domain with a Dirichlet mask.
#[derive(Clone, Debug)]
pub struct Grid {
    domain: Domain,
    h: f64,
    shape: Vec<usize>,
    strides: Vec<usize>,
    base: Vec<f64>,
    offset: Vec<i64>,
    classes: Vec<NodeClass>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain && self.h == other.h && self.shape == other.shape
    }
}

impl Grid {
    /// Builds the lattice, requiring at least [`MIN_CELLS_ACROSS`] cells across the diameter.
    pub fn build(domain: Domain, h: f64) -> Result<Grid> {
        Self::build_with_min_cells(domain, h, MIN_CELLS_ACROSS)
    }

    pub fn build_with_min_cells(domain: Domain, h: f64, min_cells: f64) -> Result<Grid> {
        domain.validate()?;
        let diameter = domain.diameter();
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Precondition(format!("grid spacing must be positive, got {h}")));
        }
        let cells = diameter / h;
        if cells + 1e-9 < min_cells {
            return Err(Error::SpacingTooCoarse {
                h,
                diameter,
                cells,
                min_cells,
            });
        }
        let d = domain.dim();
        let (base, offset, shape) = lattice_layout(&domain, h);
        let mut strides = vec![1usize; d];
        for a in 1..d {
            strides[a] = strides[a - 1] * shape[a - 1];
        }
        let total: usize = shape.iter().product();

        let mut grid = Grid {
            domain,
            h,
            shape,
            strides,
            base,
            offset,
            classes: vec![NodeClass::Exterior; total],
            interior: Vec::new(),
            boundary: Vec::new(),
        };

        let mut inside = vec![false; total];
        let mut x = vec![0.0; d];
        for (i, flag) in inside.iter_mut().enumerate() {
            grid.fill_point(i, &mut x);
            *flag = grid.domain.contains(&x);
        }
        for i in 0..total {
            if inside[i] {
                // lattice margin guarantees all axis neighbors exist
                grid.classes[i] = NodeClass::Interior;
                grid.interior.push(i);
            } else {
                let touches = (0..d).any(|a| {
                    [-1i64, 1].iter().any(|&s| grid.neighbor(i, a, s).is_some_and(|n| inside[n]))
                });
                if touches {
                    grid.classes[i] = NodeClass::Boundary;
                    grid.boundary.push(i);
                }
            }
        }
        if grid.interior.is_empty() {
            return Err(Error::SpacingTooCoarse {
                h,
                diameter,
                cells,
                min_cells,
            });
        }
        Ok(grid)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Volume weight `h^d` of a node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, node: usize) -> NodeClass {
        self.classes[node]
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.classes[node] != NodeClass::Exterior
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    /// Interior and boundary nodes in lattice order.
    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_active(i)).collect()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rem = node;
        self.shape
            .iter()
            .map(|&n| {
                let i = rem % n;
                rem /= n;
                i
            })
            .collect()
    }

    /// Signed lattice coordinates (node position = base + k h).
    pub fn lattice_coords(&self, node: usize) -> Vec<i64> {
        self.multi_index(node)
            .into_iter()
            .zip(&self.offset)
            .map(|(i, o)| i as i64 - o)
            .collect()
    }

    pub fn index_of(&self, multi: &[usize]) -> Option<usize> {
        let mut idx = 0;
        for ((&m, &n), &s) in multi.iter().zip(&self.shape).zip(&self.strides) {
            if m >= n {
                return None;
            }
            idx += m * s;
        }
        Some(idx)
    }

    pub fn neighbor(&self, node: usize, axis: usize, step: i64) -> Option<usize> {
        let i = (node / self.strides[axis]) % self.shape[axis];
        let j = i as i64 + step;
        if j < 0 || j >= self.shape[axis] as i64 {
            None
        } else {
            Some((node as i64 + step * self.strides[axis] as i64) as usize)
        }
    }

    pub fn fill_point(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for (a, o) in out[..self.dim()].iter_mut().enumerate() {
            let i = rem % self.shape[a];
            rem /= self.shape[a];
            *o = self.base[a] + (i as i64 - self.offset[a]) as f64 * self.h;
        }
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.fill_point(node, &mut x);
        x
    }

    /// Lattice node closest to `x`, if it lies inside the lattice box.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut multi = Vec::with_capacity(self.dim());
        for (a, &xa) in x[..self.dim()].iter().enumerate() {
            let k = ((xa - self.base[a]) / self.h).round() as i64 + self.offset[a];
            if k < 0 || k >= self.shape[a] as i64 {
                return None;
            }
            multi.push(k as usize);
        }
        self.index_of(&multi)
    }

    /// All lattice nodes with `|x - center| < radius`.
    pub fn nodes_in_ball(&self, center: &[f64], radius: f64) -> Vec<usize> {
        let d = self.dim();
        let mut lo = vec![0usize; d];
        let mut hi = vec![0usize; d];
        for a in 0..d {
            let kmin = ((center[a] - radius - self.base[a]) / self.h).floor() as i64 + self.offset[a];
            let kmax = ((center[a] + radius - self.base[a]) / self.h).ceil() as i64 + self.offset[a];
            lo[a] = kmin.clamp(0, self.shape[a] as i64 - 1) as usize;
            hi[a] = kmax.clamp(0, self.shape[a] as i64 - 1) as usize;
        }
        let mut out = Vec::new();
        let mut multi = lo.clone();
        let mut x = vec![0.0; d];
        let r2 = radius * radius;
        loop {
            let node = self.index_of(&multi).expect("clamped index");
            self.fill_point(node, &mut x);
            if dist2(&x, center) < r2 {
                out.push(node);
            }
            let mut a = 0;
            loop {
                if a == d {
                    return out;
                }
                if multi[a] < hi[a] {
                    multi[a] += 1;
                    break;
                }
                multi[a] = lo[a];
                a += 1;
            }
        }
    }
}

fn lattice_layout(domain: &Domain, h: f64) -> (Vec<f64>, Vec<i64>, Vec<usize>) {
    let d = domain.dim();
    match domain {
        Domain::UnitBall { .. } | Domain::HalfBall { .. } => {
            let n = (1.0 / h).ceil() as i64 + 1;
            (vec![0.0; d], vec![n; d], vec![(2 * n + 1) as usize; d])
        }
        Domain::Box { lo, hi } => {
            let mut shape = Vec::with_capacity(d);
            for a in 0..d {
                let m = ((hi[a] - lo[a]) / h - 1e-9).ceil() as usize;
                shape.push(m + 3);
            }
            (lo.clone(), vec![1; d], shape)
        }
        Domain::GraphSubdomain {
            half_width, height, ..
        } => {
            let (phi_min, _) = domain.graph_range();
            let n = (half_width / h).ceil() as i64 + 1;
            let lower = (phi_min / h).floor() as i64 - 2;
            let upper = (height / h).ceil() as i64 + 2;
            let mut offset = vec![n; d];
            let mut shape = vec![(2 * n + 1) as usize; d];
            offset[d - 1] = -lower;
            shape[d - 1] = (upper - lower + 1) as usize;
            (vec![0.0; d], offset, shape)
        }
    }
}

/// Outward normals and tangential projectors at the boundary nodes of a grid.
#[derive(Clone, Debug)]
pub struct BoundaryFrame {
    nodes: Vec<usize>,
    normals: Vec<Vec<f64>>,
}

impl BoundaryFrame {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn normal(&self, k: usize) -> &[f64] {
        &self.normals[k]
    }

    /// Dense `I - nu nu^T` for the k-th boundary node, row-major.
    pub fn projector(&self, k: usize) -> Vec<f64> {
        let n = &self.normals[k];
        let d = n.len();
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] = if i == j { 1.0 } else { 0.0 } - n[i] * n[j];
            }
        }
        p
    }

    /// Applies the tangential projector to a spatial vector in place.
    pub fn project_tangential(&self, k: usize, v: &mut [f64]) {
        let n = &self.normals[k];
        let dot: f64 = n.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        for (vi, ni) in v.iter_mut().zip(n) {
            *vi -= dot * ni;
        }
    }
}

pub fn boundary_frame(grid: &Grid) -> BoundaryFrame {
    let nodes = grid.boundary_nodes().to_vec();
    let normals = nodes
        .iter()
        .map(|&i| {
            let x = grid.point(i);
            let p = grid.domain().nearest_boundary_point(&x);
            grid.domain().outward_normal(&p)
        })
        .collect();
    BoundaryFrame { nodes, normals }
}

/// Result of the boundary convexity check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionB {
    /// Infimum over sampled base points of the smallest Hessian eigenvalue of the boundary graph.
    pub theta0: f64,
    pub threshold: f64,
    pub passed: bool,
    pub base_points: usize,
}

/// Estimates the convexity constant `theta0` of the boundary graph with a
/// finite-difference Hessian of step `probe_radius`.
///
/// Unit balls are sampled on an angular net (64 points in d = 2, 256 in
/// d >= 3); graph subdomains are evaluated at their chart base point.
pub fn check_condition_b(domain: &Domain, probe_radius: f64, threshold: f64) -> Result<ConditionB> {
    domain.validate()?;
    if !(probe_radius > 0.0) {
        return Err(Error::Precondition("probe radius must be positive".into()));
    }
    let d = domain.dim();
    let theta_at = |phi: &dyn Fn(&[f64]) -> f64| min_hessian_eigenvalue(phi, d - 1, probe_radius);
    let (theta0, base_points) = match domain {
        Domain::UnitBall { .. } => {
            let bases = sphere_net(d);
            let mut inf = f64::INFINITY;
            for p in &bases {
                let tangents = orthonormal_complement(p);
                let phi = |xp: &[f64]| ball_graph_height(domain, p, &tangents, xp);
                inf = inf.min(theta_at(&phi));
            }
            (inf, bases.len())
        }
        Domain::GraphSubdomain { profile, .. } => (theta_at(&|xp: &[f64]| profile.eval(xp)), 1),
        other => return Err(Error::NoGraphAvailable(other.kind_name().to_string())),
    };
    let theta0 = theta0.max(0.0);
    Ok(ConditionB {
        theta0,
        threshold,
        passed: theta0 >= threshold,
        base_points,
    })
}

/// Inward height of the boundary above the tangent plane at `p`, at tangent offset `xp`.
fn ball_graph_height(domain: &Domain, p: &[f64], tangents: &[Vec<f64>], xp: &[f64]) -> f64 {
    let d = p.len();
    let mut q0 = p.to_vec();
    for (t, c) in tangents.iter().zip(xp) {
        for a in 0..d {
            q0[a] += c * t[a];
        }
    }
    let nu = domain.outward_normal(p);
    let mut q = vec![0.0; d];
    let mut level_at = |s: f64| {
        for a in 0..d {
            q[a] = q0[a] - s * nu[a];
        }
        domain.level(&q)
    };
    if level_at(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-17 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if level_at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn min_hessian_eigenvalue(phi: &dyn Fn(&[f64]) -> f64, m: usize, step: f64) -> f64 {
    let mut hess = DMatrix::<f64>::zeros(m, m);
    let zero = vec![0.0; m];
    let f0 = phi(&zero);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut x = zero.clone();
        for &(i, s) in pairs {
            x[i] += s * step;
        }
        phi(&x)
    };
    for i in 0..m {
        hess[(i, i)] = (shifted(&[(i, 1.0)]) - 2.0 * f0 + shifted(&[(i, -1.0)])) / (step * step);
        for j in (i + 1)..m {
            let v = (shifted(&[(i, 1.0), (j, 1.0)])
                - shifted(&[(i, 1.0), (j, -1.0)])
                - shifted(&[(i, -1.0), (j, 1.0)])
                + shifted(&[(i, -1.0), (j, -1.0)]))
                / (4.0 * step * step);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess.symmetric_eigenvalues().min()
}

/// Sample of unit vectors on S^{d-1}.
fn sphere_net(d: usize) -> Vec<Vec<f64>> {
    match d {
        2 => (0..64)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 64.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        3 => {
            let n = 256;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * k as f64;
                    vec![r * a.cos(), r * a.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut out = Vec::with_capacity(256);
            while out.len() < 256 {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = norm(&v);
                if r > 1e-3 && r <= 1.0 {
                    out.push(v.iter().map(|x| x / r).collect());
                }
            }
            out
        }
    }
}

/// Orthonormal basis of the hyperplane orthogonal to the unit vector `nu`.
pub fn orthonormal_complement(nu: &[f64]) -> Vec<Vec<f64>> {
    let d = nu.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    let mut candidates: Vec<usize> = (0..d).collect();
    // start from the axes least aligned with nu
    candidates.sort_by(|&a, &b| nu[a].abs().partial_cmp(&nu[b].abs()).unwrap());
    for &axis in &candidates {
        if basis.len() == d - 1 {
            break;
        }
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        for q in std::iter::once(nu).chain(basis.iter().map(|b| b.as_slice())) {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let len = norm(&v);
        if len > 1e-8 {
            v.iter_mut().for_each(|x| *x /= len);
            basis.push(v);
        }
    }
    basis
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn radial_unit(x: &[f64]) -> Vec<f64> {
    let r = norm(x);
    if r < 1e-300 {
        let mut e = vec![0.0; x.len()];
        e[0] = 1.0;
        e
    } else {
        x.iter().map(|v| v / r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_ball_count(d: usize, h: f64) -> usize {
        let n = (1.0 / h).ceil() as i64 + 1;
        let side = (2 * n + 1) as usize;
        let mut count = 0;
        for k in 0..side.pow(d as u32) {
            let mut rem = k;
            let mut r2 = 0.0;
            for _ in 0..d {
                let c = (rem % side) as i64 - n;
                rem /= side;
                let x = c as f64 * h;
                r2 += x * x;
            }
            if r2 < 1.0 {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn disc_quarter_spacing_has_45_interior_nodes() {
        let g = Grid::build(Domain::unit_ball(2), 0.25).unwrap();
        assert_eq!(brute_force_ball_count(2, 0.25), 45);
        assert_eq!(g.interior_nodes().len(), 45);
    }

    #[test]
    fn unit_box_half_spacing_has_single_center_node() {
        let g = Grid::build_with_min_cells(Domain::unit_box(2), 0.5, 2.0).unwrap();
        assert_eq!(g.interior_nodes().len(), 1);
        assert_eq!(g.point(g.interior_nodes()[0]), vec![0.5, 0.5]);
        assert_eq!(g.boundary_nodes().len(), 4);
    }

    #[test]
    fn ball3_interior_count_matches_enumeration() {
        let g = Grid::build_with_min_cells(Domain::unit_ball(3), 0.3, 2.0).unwrap();
        assert_eq!(g.interior_nodes().len(), brute_force_ball_count(3, 0.3));
    }

    #[test]
    fn coarse_spacing_is_rejected() {
        let err = Grid::build(Domain::unit_ball(2), 0.3).unwrap_err();
        assert!(matches!(err, Error::SpacingTooCoarse { .. }));
    }

    #[test]
    fn interior_neighbors_are_never_exterior() {
        for domain in [
            Domain::unit_ball(2),
            Domain::unit_ball(3),
            Domain::HalfBall { d: 2 },
            Domain::unit_box(3),
        ] {
            let g = Grid::build(domain, 0.1).unwrap();
            for &i in g.interior_nodes() {
                for a in 0..g.dim() {
                    for s in [-1, 1] {
                        let n = g.neighbor(i, a, s).expect("margin");
                        assert_ne!(g.class(n), NodeClass::Exterior);
                    }
                }
            }
            let h = g.spacing();
            for &b in g.boundary_nodes() {
                let x = g.point(b);
                let p = g.domain().nearest_boundary_point(&x);
                assert!(dist(&x, &p) <= h + 1e-12);
            }
        }
    }

    #[test]
    fn classification_is_a_pure_function_of_coordinates() {
        let a = Grid::build(Domain::unit_ball(2), 0.05).unwrap();
        let b = Grid::build(Domain::unit_ball(2), 0.05).unwrap();
        assert_eq!(a.classes, b.classes);
        for i in 0..a.len() {
            let x = a.point(i);
            let inside = Domain::unit_ball(2).contains(&x);
            assert_eq!(inside, a.class(i) == NodeClass::Interior);
        }
    }

    fn hausdorff_to_circle(h: f64) -> f64 {
        let g = Grid::build(Domain::unit_ball(2), h).unwrap();
        let pts: Vec<Vec<f64>> = g.boundary_nodes().iter().map(|&b| g.point(b)).collect();
        let nodes_to_circle = pts.iter().map(|p| (norm(p) - 1.0).abs()).fold(0.0, f64::max);
        let circle_to_nodes = (0..4096)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 4096.0;
                let c = [a.cos(), a.sin()];
                pts.iter().map(|p| dist(p, &c)).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        nodes_to_circle.max(circle_to_nodes)
    }

    #[test]
    fn boundary_placement_is_first_order() {
        let d: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&h| hausdorff_to_circle(h)).collect();
        for w in d.windows(2) {
            let ratio = w[1] / w[0];
            assert!((0.3..=0.7).contains(&ratio), "ratio {ratio} from {d:?}");
        }
    }

    #[test]
    fn ball_condition_b_is_one() {
        for d in [2, 3] {
            let c = check_condition_b(&Domain::unit_ball(d), 0.05, 0.5).unwrap();
            assert!((c.theta0 - 1.0).abs() < 0.05, "d={d} theta0={}", c.theta0);
            assert!(c.passed);
            assert_eq!(c.base_points, if d == 2 { 64 } else { 256 });
        }
    }

    #[test]
    fn ball_condition_b_converges_with_probe() {
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&p| (check_condition_b(&Domain::unit_ball(2), p, 0.0).unwrap().theta0 - 1.0).abs())
            .collect();
        for (e, p) in errs.iter().zip([0.2, 0.1, 0.05]) {
            assert!(*e <= p, "error {e} at probe {p}");
        }
        assert!(errs[2] < errs[0]);
    }

    #[test]
    fn graph_condition_b_flat_and_paraboloid() {
        let flat = Domain::GraphSubdomain {
            d: 2,
            half_width: 0.5,
            height: 0.5,
            profile: GraphProfile::flat(1),
        };
        let c = check_condition_b(&flat, 0.05, 1e-3).unwrap();
        assert_eq!(c.theta0, 0.0);
        assert!(!c.passed);

        let para = Domain::GraphSubdomain {
            d: 3,
            half_width: 0.5,
            height: 1.0,
            profile: GraphProfile::paraboloid(2),
        };
        let c = check_condition_b(&para, 0.05, 1.0).unwrap();
        assert!((c.theta0 - 2.0).abs() < 0.1, "theta0 = {}", c.theta0);
    }

    #[test]
    fn box_has_no_graph() {
        let err = check_condition_b(&Domain::unit_box(2), 0.05, 0.1).unwrap_err();
        assert!(matches!(err, Error::NoGraphAvailable(_)));
    }

    #[test]
    fn unnormalized_graph_chart_is_rejected() {
        let bad = Domain::GraphSubdomain {
            d: 2,
            half_width: 0.5,
            height: 0.0,
            profile: GraphProfile::flat(1),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frame_normals_and_projectors() {
        let g = Grid::build(Domain::unit_ball(3), 0.1).unwrap();
        let frame = boundary_frame(&g);
        let target = [1.0, 0.0, 0.0];
        let k = (0..frame.nodes().len())
            .min_by(|&a, &b| {
                let da = dist(&g.point(frame.nodes()[a]), &target);
                let db = dist(&g.point(frame.nodes()[b]), &target);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert!(dist(frame.normal(k), &target) <= 0.1);
        for k in 0..frame.nodes().len() {
            assert!((norm(frame.normal(k)) - 1.0).abs() < 1e-12);
            let p = frame.projector(k);
            let d = 3;
            for i in 0..d {
                for j in 0..d {
                    let pp: f64 = (0..d).map(|l| p[i * d + l] * p[l * d + j]).sum();
                    assert!((pp - p[i * d + j]).abs() < 1e-12);
                    assert!((p[i * d + j] - p[j * d + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn box_face_normals_are_axis_vectors() {
        let g = Grid::build(Domain::unit_box(2), 0.125).unwrap();
        let frame = boundary_frame(&g);
        for (k, &b) in frame.nodes().iter().enumerate() {
            let x = g.point(b);
            let n = frame.normal(k);
            let expected = if x[0] <= 0.0 {
                [-1.0, 0.0]
            } else if x[0] >= 1.0 {
                [1.0, 0.0]
            } else if x[1] <= 0.0 {
                [0.0, -1.0]
            } else {
                [0.0, 1.0]
            };
            assert_eq!(n, expected, "node at {x:?}");
        }
    }

    #[test]
    fn nodes_in_ball_matches_filter() {
        let g = Grid::build(Domain::unit_ball(3), 0.1).unwrap();
        let c = [0.13, -0.2, 0.05];
        let mut fast = g.nodes_in_ball(&c, 0.33);
        let mut slow: Vec<usize> = (0..g.len()).filter(|&i| dist(&g.point(i), &c) < 0.33).collect();
        fast.sort_unstable();
        slow.sort_unstable();
        assert_eq!(fast, slow);
    }
}
