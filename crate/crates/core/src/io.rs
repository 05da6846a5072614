//! Snapshot files: little-endian `f64` values of the active nodes in lattice
//! order (components innermost) next to a JSON sidecar describing the grid.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SphereField;
use crate::flow::PenaltySchedule;
use crate::geometry::{Domain, Grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub domain: Domain,
    pub h: f64,
    pub shape: Vec<usize>,
    /// Which nodes are stored; always `"active"` (interior and boundary).
    pub node_set: String,
    pub nodes: usize,
    #[serde(rename = "D")]
    pub target_dim: usize,
    pub t: f64,
    pub step: usize,
    pub lambda: Option<f64>,
    pub exponent: Option<f64>,
    pub tag: String,
}

/// Writes `<stem>.bin` and `<stem>.json`; returns both paths.
pub fn write_snapshot(
    stem: &Path,
    field: &SphereField,
    t: f64,
    step: usize,
    schedule: Option<&PenaltySchedule>,
    tag: &str,
) -> Result<(PathBuf, PathBuf)> {
    let grid = field.grid();
    let nodes = grid.active_nodes();
    let mut bytes = Vec::with_capacity(nodes.len() * field.ncomp() * 8);
    for &i in &nodes {
        for x in field.value(i) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sidecar = SnapshotSidecar {
        domain: grid.domain().clone(),
        h: grid.spacing(),
        shape: grid.shape().to_vec(),
        node_set: "active".into(),
        nodes: nodes.len(),
        target_dim: field.target_dim(),
        t,
        step,
        lambda: schedule.map(|s| s.lambda),
        exponent: schedule.map(|s| s.exponent(t)),
        tag: tag.into(),
    };
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok((bin, json))
}

/// Reads a snapshot written by [`write_snapshot`], rebuilding its grid.
pub fn read_snapshot(bin: &Path) -> Result<(SphereField, SnapshotSidecar)> {
    let sidecar: SnapshotSidecar = serde_json::from_slice(&fs::read(bin.with_extension("json"))?)?;
    // the stored grid passed validation when written
    let grid = Arc::new(Grid::build_with_min_cells(sidecar.domain.clone(), sidecar.h, 0.0)?);
    let nodes = grid.active_nodes();
    if grid.shape() != sidecar.shape.as_slice() || nodes.len() != sidecar.nodes {
        return Err(Error::GridMismatch);
    }
    let bytes = fs::read(bin)?;
    let nc = sidecar.target_dim + 1;
    if bytes.len() != nodes.len() * nc * 8 {
        return Err(Error::Precondition(format!(
            "snapshot holds {} bytes, expected {}",
            bytes.len(),
            nodes.len() * nc * 8
        )));
    }
    let mut field = SphereField::zeros(grid, sidecar.target_dim);
    let mut chunks = bytes.chunks_exact(8);
    for &i in &nodes {
        for v in field.value_mut(i) {
            let chunk = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok((field, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::InitialData;

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::build(Domain::unit_ball(2), 1.0 / 16.0).unwrap());
        let u = InitialData::RandomUnit { seed: 3 }.generate(&g, 2).unwrap();
        let sched = PenaltySchedule::new(100.0).unwrap();
        let (bin, json) = write_snapshot(&dir.path().join("snap_0001"), &u, 0.5, 7, Some(&sched), "u").unwrap();
        assert!(json.exists());
        assert_eq!(
            fs::metadata(&bin).unwrap().len() as usize,
            g.active_nodes().len() * 3 * 8
        );
        let (back, meta) = read_snapshot(&bin).unwrap();
        assert_eq!(back.values(), u.values());
        assert_eq!(meta.step, 7);
        assert_eq!(meta.lambda, Some(100.0));
        assert!((meta.exponent.unwrap() - sched.exponent(0.5)).abs() < 1e-15);
    }

    #[test]
    fn truncated_snapshot_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::build(Domain::unit_box(2), 0.125).unwrap());
        let u = InitialData::Constant { value: None }.generate(&g, 1).unwrap();
        let (bin, _) = write_snapshot(&dir.path().join("h0"), &u, 0.0, 0, None, "h0").unwrap();
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_snapshot(&bin).is_err());
    }
}
