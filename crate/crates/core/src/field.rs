//! Discrete maps from a grid into R^{D+1} (nominally into S^D).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, Grid, NodeClass};

/// Node values in R^{D+1}, stored node-major for every lattice node.
/// Exterior nodes hold zeros and are never read.
#[derive(Clone, Debug)]
pub struct SphereField {
    grid: Arc<Grid>,
    ncomp: usize,
    values: Vec<f64>,
}

impl PartialEq for SphereField {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl SphereField {
    pub fn zeros(grid: Arc<Grid>, target_dim: usize) -> Self {
        let ncomp = target_dim + 1;
        let values = vec![0.0; grid.len() * ncomp];
        SphereField { grid, ncomp, values }
    }

    /// Builds a field from a closure evaluated at every active node.
    pub fn from_fn<F>(grid: Arc<Grid>, target_dim: usize, mut f: F) -> Self
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let mut field = SphereField::zeros(grid, target_dim);
        let mut x = vec![0.0; field.grid.dim()];
        for node in 0..field.grid.len() {
            if !field.grid.is_active(node) {
                continue;
            }
            field.grid.fill_point(node, &mut x);
            let v = f(node, &x);
            field.set(node, &v);
        }
        field
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Target sphere dimension D.
    pub fn target_dim(&self) -> usize {
        self.ncomp - 1
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.ncomp..(node + 1) * self.ncomp]
    }

    pub fn value_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.ncomp..(node + 1) * self.ncomp]
    }

    pub fn set(&mut self, node: usize, v: &[f64]) {
        assert_eq!(v.len(), self.ncomp, "component count");
        self.value_mut(node).copy_from_slice(v);
    }

    pub fn norm_sq_at(&self, node: usize) -> f64 {
        self.value(node).iter().map(|v| v * v).sum()
    }

    /// Largest `|u|` over interior and boundary nodes, with its node.
    pub fn max_norm(&self) -> (f64, usize) {
        let mut best = (0.0, 0);
        for node in 0..self.grid.len() {
            if self.grid.is_active(node) {
                let n = self.norm_sq_at(node).sqrt();
                if n > best.0 {
                    best = (n, node);
                }
            }
        }
        best
    }

    pub fn same_layout(&self, other: &SphereField) -> bool {
        self.ncomp == other.ncomp && (Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid)
    }

    pub fn check_layout(&self, other: &SphereField) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Replaces every active node value by `u / |u|`.
    pub fn project_to_sphere(&self) -> Result<SphereField> {
        let mut out = self.clone();
        for node in 0..self.grid.len() {
            if !self.grid.is_active(node) {
                continue;
            }
            let n = self.norm_sq_at(node).sqrt();
            if n < 1e-14 {
                return Err(Error::NearZeroVector { node, norm: n });
            }
            out.value_mut(node).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    /// `|grad u|^2` at every interior node from symmetrized forward/backward
    /// differences; zero at boundary and exterior nodes.
    pub fn gradient_density(&self) -> Vec<f64> {
        let mut dens = vec![0.0; self.grid.len()];
        let inv_h2 = 1.0 / (self.grid.spacing() * self.grid.spacing());
        let strides = self.grid.strides().to_vec();
        let nc = self.ncomp;
        for &node in self.grid.interior_nodes() {
            let u = self.value(node);
            let mut acc = 0.0;
            for &s in &strides {
                let fwd = &self.values[(node + s) * nc..(node + s + 1) * nc];
                let bwd = &self.values[(node - s) * nc..(node - s + 1) * nc];
                // links to boundary nodes belong to this node alone
                let wf = if self.grid.class(node + s) == NodeClass::Interior { 0.5 } else { 1.0 };
                let wb = if self.grid.class(node - s) == NodeClass::Interior { 0.5 } else { 1.0 };
                for c in 0..nc {
                    let df = fwd[c] - u[c];
                    let db = u[c] - bwd[c];
                    acc += wf * df * df + wb * db * db;
                }
            }
            dens[node] = acc * inv_h2;
        }
        dens
    }

    /// Discrete Dirichlet energy `integral |grad u|^2`.
    pub fn dirichlet_energy(&self) -> f64 {
        self.gradient_density().iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Spatial gradient at a node, row-major `d x ncomp`. Central differences
    /// where both neighbors are active, one-sided otherwise.
    pub fn gradient_at(&self, node: usize, out: &mut [f64]) {
        let d = self.grid.dim();
        let nc = self.ncomp;
        let h = self.grid.spacing();
        let u = self.value(node);
        for a in 0..d {
            let fwd = self.grid.neighbor(node, a, 1).filter(|&n| self.grid.is_active(n));
            let bwd = self.grid.neighbor(node, a, -1).filter(|&n| self.grid.is_active(n));
            for c in 0..nc {
                out[a * nc + c] = match (fwd, bwd) {
                    (Some(f), Some(b)) => (self.value(f)[c] - self.value(b)[c]) / (2.0 * h),
                    (Some(f), None) => (self.value(f)[c] - u[c]) / h,
                    (None, Some(b)) => (u[c] - self.value(b)[c]) / h,
                    (None, None) => 0.0,
                };
            }
        }
    }
}

/// `sqrt(sum |a - b|^2 h^d)` over interior nodes.
pub fn l2_distance(a: &SphereField, b: &SphereField) -> Result<f64> {
    a.check_layout(b)?;
    Ok(l2_distance_sq(a, b).sqrt())
}

pub(crate) fn l2_distance_sq(a: &SphereField, b: &SphereField) -> f64 {
    let mut acc = 0.0;
    for &node in a.grid.interior_nodes() {
        for (x, y) in a.value(node).iter().zip(b.value(node)) {
            acc += (x - y) * (x - y);
        }
    }
    acc * a.grid.cell_volume()
}

/// Initial-data library. Every generator produces exactly unit-norm values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialData {
    /// Constant map; defaults to the north pole `(0, ..., 0, 1)`.
    Constant {
        #[serde(default)]
        value: Option<Vec<f64>>,
    },
    /// Polar angle `latitude * rho^2` about the north pole, azimuth from the
    /// first two coordinates; `rho` is the normalized distance to the domain center.
    Cap { latitude: f64 },
    /// `x / |x|`, zero-padded to D+1 components.
    EquatorHedgehog,
    /// `(x, sqrt(1 - |x|^2), 0...)`: wraps the boundary onto the equator.
    BoundaryWrap,
    /// Explicit values, one (D+1)-vector per active node in lattice order.
    CustomSamples { values: Vec<Vec<f64>> },
    /// Independent uniformly random unit vectors per node.
    RandomUnit { seed: u64 },
}

/// Fixed value assigned to the hedgehog's center node.
pub fn hedgehog_center_value(target_dim: usize) -> Vec<f64> {
    north_pole(target_dim)
}

pub fn north_pole(target_dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; target_dim + 1];
    v[target_dim] = 1.0;
    v
}

impl InitialData {
    pub fn generate(&self, grid: &Arc<Grid>, target_dim: usize) -> Result<SphereField> {
        if target_dim < 1 {
            return Err(Error::DimensionMismatch("target dimension D must be >= 1".into()));
        }
        let d = grid.dim();
        let nc = target_dim + 1;
        let domain = grid.domain().clone();
        let (center, radius) = domain.center_and_radius();
        // Dirichlet nodes take the data at the nearest boundary point.
        let eval_point = |node: usize, x: &[f64]| -> Vec<f64> {
            if grid.class(node) == NodeClass::Boundary {
                domain.nearest_boundary_point(x)
            } else {
                x.to_vec()
            }
        };
        let field = match self {
            InitialData::Constant { value } => {
                let v = match value {
                    Some(v) => {
                        if v.len() != nc {
                            return Err(Error::DimensionMismatch(format!(
                                "constant value has {} components, expected {nc}",
                                v.len()
                            )));
                        }
                        normalized(v).ok_or(Error::NearZeroVector { node: 0, norm: 0.0 })?
                    }
                    None => north_pole(target_dim),
                };
                SphereField::from_fn(grid.clone(), target_dim, |_, _| v.clone())
            }
            InitialData::Cap { latitude } => {
                if !latitude.is_finite() || *latitude < 0.0 {
                    return Err(Error::Precondition("cap latitude must be finite and >= 0".into()));
                }
                SphereField::from_fn(grid.clone(), target_dim, |node, x| {
                    let p = eval_point(node, x);
                    let rel: Vec<f64> = p.iter().zip(&center).map(|(a, c)| a - c).collect();
                    let rho = (norm(&rel) / radius).min(1.0);
                    let theta = latitude * rho * rho;
                    let phi = rel[1].atan2(rel[0]);
                    let mut v = vec![0.0; nc];
                    if nc == 2 {
                        v[0] = theta.sin();
                    } else {
                        v[0] = theta.sin() * phi.cos();
                        v[1] = theta.sin() * phi.sin();
                    }
                    v[nc - 1] = theta.cos();
                    v
                })
            }
            InitialData::EquatorHedgehog => {
                if nc < d {
                    return Err(Error::DimensionMismatch(format!(
                        "hedgehog x/|x| needs D + 1 >= d, got D = {target_dim}, d = {d}"
                    )));
                }
                let tiny = 1e-9 * grid.spacing();
                SphereField::from_fn(grid.clone(), target_dim, |node, x| {
                    let p = eval_point(node, x);
                    let rel: Vec<f64> = p.iter().zip(&center).map(|(a, c)| a - c).collect();
                    let r = norm(&rel);
                    if r < tiny {
                        return hedgehog_center_value(target_dim);
                    }
                    let mut v = vec![0.0; nc];
                    for a in 0..d {
                        v[a] = rel[a] / r;
                    }
                    v
                })
            }
            InitialData::BoundaryWrap => {
                if nc < d + 1 {
                    return Err(Error::DimensionMismatch(format!(
                        "boundary wrap needs D >= d, got D = {target_dim}, d = {d}"
                    )));
                }
                SphereField::from_fn(grid.clone(), target_dim, |node, x| {
                    let p = eval_point(node, x);
                    let mut rel: Vec<f64> = p.iter().zip(&center).map(|(a, c)| (a - c) / radius).collect();
                    let r = norm(&rel);
                    if r > 1.0 {
                        rel.iter_mut().for_each(|v| *v /= r);
                    }
                    let mut v = vec![0.0; nc];
                    v[..d].copy_from_slice(&rel);
                    v[d] = (1.0 - norm(&rel).powi(2)).max(0.0).sqrt();
                    normalized(&v).expect("unit by construction")
                })
            }
            InitialData::CustomSamples { values } => {
                let active = grid.active_nodes();
                if values.len() != active.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} samples for {} active nodes",
                        values.len(),
                        active.len()
                    )));
                }
                let mut field = SphereField::zeros(grid.clone(), target_dim);
                for (&node, v) in active.iter().zip(values) {
                    if v.len() != nc {
                        return Err(Error::DimensionMismatch(format!(
                            "sample has {} components, expected {nc}",
                            v.len()
                        )));
                    }
                    let u = normalized(v).ok_or(Error::NearZeroVector { node, norm: norm(v) })?;
                    field.set(node, &u);
                }
                field
            }
            InitialData::RandomUnit { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                SphereField::from_fn(grid.clone(), target_dim, |_, _| random_unit(&mut rng, nc))
            }
        };
        Ok(field)
    }

    /// Generator facts worth recording next to a snapshot.
    pub fn metadata(&self, grid: &Grid, target_dim: usize) -> serde_json::Value {
        match self {
            InitialData::EquatorHedgehog => {
                let (center, _) = grid.domain().center_and_radius();
                let node = grid.nearest_node(&center);
                serde_json::json!({
                    "center_node": node,
                    "center_value": hedgehog_center_value(target_dim),
                })
            }
            _ => serde_json::json!({}),
        }
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n >= 1e-14).then(|| v.iter().map(|x| x / n).collect())
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = norm(&v);
        if r > 1e-3 && r <= 1.0 {
            return v.iter().map(|x| x / r).collect();
        }
    }
}
