//! Componentwise harmonic extension of Dirichlet data and derivative energies.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SphereField;
use crate::geometry::{Grid, NodeClass};

/// How interior nodes next to the boundary see the Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryStencil {
    /// Boundary-class nodes act as ordinary neighbors carrying their data
    /// (first order on curved boundaries; the exact minimizer of the
    /// discrete Dirichlet energy).
    Staircase,
    /// Shortened arms ending on the true boundary crossing (second order).
    /// Needs boundary data as a function on the boundary.
    ShortleyWeller,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipticOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub damping: f64,
    pub stencil: BoundaryStencil,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        EllipticOptions {
            tol: 1e-8,
            max_sweeps: 100_000,
            damping: 0.9,
            stencil: BoundaryStencil::ShortleyWeller,
        }
    }
}

/// Dirichlet data for the harmonic extension.
pub enum BoundaryData<'a> {
    /// Values stored at the boundary-class nodes of a field.
    Nodes(&'a SphereField),
    /// A map defined on the boundary, evaluated at boundary points.
    Function {
        target_dim: usize,
        eval: &'a dyn Fn(&[f64]) -> Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct HarmonicExtension {
    pub field: SphereField,
    /// Largest Jacobi correction `|u_i - (A_offdiag u + b)_i / a_ii|` at exit.
    pub residual: f64,
    pub iterations: usize,
    pub stencil: BoundaryStencil,
}

struct Row {
    node: usize,
    diag: f64,
    links: Vec<(usize, f64)>,
    rhs: Vec<f64>,
}

/// Solves `-Lap h0 = 0` in the interior with `h0 = data` on the boundary by
/// damped Jacobi relaxation, componentwise and without any sphere constraint.
pub fn solve_harmonic_extension(
    grid: &Arc<Grid>,
    data: BoundaryData<'_>,
    opts: &EllipticOptions,
) -> Result<HarmonicExtension> {
    if !(opts.tol > 0.0) {
        return Err(Error::Precondition("solver tolerance must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Precondition("damping must lie in (0, 1]".into()));
    }
    let target_dim = match &data {
        BoundaryData::Nodes(f) => {
            if !Arc::ptr_eq(f.grid(), grid) && **f.grid() != **grid {
                return Err(Error::GridMismatch);
            }
            f.target_dim()
        }
        BoundaryData::Function { target_dim, .. } => *target_dim,
    };
    let stencil = match data {
        BoundaryData::Nodes(_) => BoundaryStencil::Staircase,
        BoundaryData::Function { .. } => opts.stencil,
    };
    let nc = target_dim + 1;
    let mut field = SphereField::zeros(grid.clone(), target_dim);

    for &b in grid.boundary_nodes() {
        let v = match &data {
            BoundaryData::Nodes(f) => f.value(b).to_vec(),
            BoundaryData::Function { eval, .. } => {
                let p = grid.domain().nearest_boundary_point(&grid.point(b));
                eval(&p)
            }
        };
        if v.len() != nc {
            return Err(Error::DimensionMismatch("boundary data component count".into()));
        }
        field.set(b, &v);
    }

    let rows = assemble(grid, &field, &data, stencil);

    // start from the mean boundary value
    let mut mean = vec![0.0; nc];
    for &b in grid.boundary_nodes() {
        for (m, v) in mean.iter_mut().zip(field.value(b)) {
            *m += v;
        }
    }
    let nb = grid.boundary_nodes().len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= nb);
    for &i in grid.interior_nodes() {
        field.set(i, &mean);
    }

    let omega = opts.damping;
    let mut next = field.values().to_vec();
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        residual = 0.0;
        let cur = field.values();
        for row in &rows {
            for c in 0..nc {
                let mut acc = row.rhs[c];
                for &(n, w) in &row.links {
                    acc += w * cur[n * nc + c];
                }
                let target = acc / row.diag;
                let old = cur[row.node * nc + c];
                residual = f64::max(residual, (target - old).abs());
                next[row.node * nc + c] = old + omega * (target - old);
            }
        }
        field.values_mut().copy_from_slice(&next);
        sweeps += 1;
        if residual <= opts.tol {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::NoConvergence {
            residual,
            iterations: sweeps,
        });
    }
    Ok(HarmonicExtension {
        field,
        residual,
        iterations: sweeps,
        stencil,
    })
}

fn assemble(grid: &Grid, field: &SphereField, data: &BoundaryData<'_>, stencil: BoundaryStencil) -> Vec<Row> {
    let d = grid.dim();
    let h = grid.spacing();
    let nc = field.ncomp();
    let mut rows = Vec::with_capacity(grid.interior_nodes().len());
    for &i in grid.interior_nodes() {
        let x = grid.point(i);
        let mut row = Row {
            node: i,
            diag: 0.0,
            links: Vec::with_capacity(2 * d),
            rhs: vec![0.0; nc],
        };
        for a in 0..d {
            // (neighbor or boundary value, arm fraction) on each side
            let mut arms: [(Option<usize>, Vec<f64>, f64); 2] = [(None, Vec::new(), 1.0), (None, Vec::new(), 1.0)];
            for (slot, dir) in [(0usize, -1i64), (1, 1)] {
                let n = grid.neighbor(i, a, dir).expect("interior nodes have all neighbors");
                let arm = &mut arms[slot];
                match (grid.class(n), stencil, data) {
                    (NodeClass::Interior, _, _) => arm.0 = Some(n),
                    (_, BoundaryStencil::ShortleyWeller, BoundaryData::Function { eval, .. }) => {
                        let eta = grid.domain().crossing_fraction(&x, a, dir as f64, h).max(1e-6);
                        let mut p = x.clone();
                        p[a] += dir as f64 * eta * h;
                        arm.1 = eval(&p);
                        arm.2 = eta;
                    }
                    _ => arm.1 = field.value(n).to_vec(),
                }
            }
            let (em, ep) = (arms[0].2, arms[1].2);
            row.diag += 2.0 / (em * ep);
            for (k, arm) in arms.iter().enumerate() {
                let (mine, other) = if k == 0 { (em, ep) } else { (ep, em) };
                let w = 2.0 / (mine * (mine + other));
                match arm.0 {
                    Some(n) => row.links.push((n, w)),
                    None => {
                        for (r, v) in row.rhs.iter_mut().zip(&arm.1) {
                            *r += w * v;
                        }
                    }
                }
            }
        }
        rows.push(row);
    }
    rows
}

/// Derivative order `[(d+1)/2] + 1` appearing in the hybrid inequality.
pub fn hybrid_order(d: usize) -> usize {
    d.div_ceil(2) + 1
}

/// Per-node `|grad^order f|^2` (sum over all ordered multi-indices of the
/// squared composed central differences). `None` where the stencil does not fit.
pub fn derivative_density(field: &SphereField, order: usize) -> Result<Vec<Option<f64>>> {
    let grid = field.grid();
    if order == 0 {
        return Err(Error::OrderTooHighForGrid { order });
    }
    let d = grid.dim();
    let nc = field.ncomp();
    let h = grid.spacing();
    let mut out = vec![None; grid.len()];
    let mut any = false;
    let mut multi = vec![0usize; order];
    let mut buf = vec![0.0; nc];
    for &node in grid.interior_nodes() {
        if !stencil_fits(grid, node, order) {
            continue;
        }
        any = true;
        let mut acc = 0.0;
        multi.iter_mut().for_each(|m| *m = 0);
        loop {
            buf.iter_mut().for_each(|b| *b = 0.0);
            composed_difference(field, node, &multi, 1.0, &mut buf);
            let scale = (2.0 * h).powi(order as i32);
            acc += buf.iter().map(|v| (v / scale) * (v / scale)).sum::<f64>();
            // next multi-index
            let mut k = 0;
            while k < order {
                multi[k] += 1;
                if multi[k] < d {
                    break;
                }
                multi[k] = 0;
                k += 1;
            }
            if k == order {
                break;
            }
        }
        out[node] = Some(acc);
    }
    if !any {
        return Err(Error::OrderTooHighForGrid { order });
    }
    Ok(out)
}

/// `sum over admissible nodes of |grad^order f|^2 h^d`.
pub fn higher_derivative_energy(field: &SphereField, order: usize) -> Result<f64> {
    let dens = derivative_density(field, order)?;
    Ok(dens.iter().flatten().sum::<f64>() * field.grid().cell_volume())
}

fn composed_difference(field: &SphereField, node: usize, axes: &[usize], sign: f64, out: &mut [f64]) {
    match axes.split_first() {
        None => {
            for (o, v) in out.iter_mut().zip(field.value(node)) {
                *o += sign * v;
            }
        }
        Some((&a, rest)) => {
            let s = field.grid().strides()[a];
            composed_difference(field, node + s, rest, sign, out);
            composed_difference(field, node - s, rest, -sign, out);
        }
    }
}

fn stencil_fits(grid: &Grid, node: usize, reach: usize) -> bool {
    let d = grid.dim();
    let center = grid.multi_index(node);
    let r = reach as i64;
    let side = (2 * reach + 1) as u32;
    let total = side.pow(d as u32);
    let mut multi = vec![0usize; d];
    for k in 0..total {
        let mut rem = k;
        for a in 0..d {
            let off = (rem % side) as i64 - r;
            rem /= side;
            let j = center[a] as i64 + off;
            if j < 0 || j >= grid.shape()[a] as i64 {
                return false;
            }
            multi[a] = j as usize;
        }
        match grid.index_of(&multi) {
            Some(n) if grid.is_active(n) => {}
            _ => return false,
        }
    }
    true
}
