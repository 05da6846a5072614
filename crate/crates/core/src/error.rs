use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid spacing {h} is too coarse: {cells:.2} cells across diameter {diameter} (need at least {min_cells})")]
    SpacingTooCoarse {
        h: f64,
        diameter: f64,
        cells: f64,
        min_cells: f64,
    },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("no boundary graph available for {0} (boundary is not C^2)")]
    NoGraphAvailable(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("vector at node {node} has norm {norm:e}, too close to zero to project")]
    NearZeroVector { node: usize, norm: f64 },
    #[error("fields live on different grids or target dimensions")]
    GridMismatch,
    #[error("harmonic extension did not converge: residual {residual:e} after {iterations} sweeps")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("derivative order {order} does not fit in the grid interior")]
    OrderTooHighForGrid { order: usize },
    #[error("time step {dt:e} violates the stability bound {bound:e} = safety*h^2/(2d)")]
    CflViolated { dt: f64, bound: f64 },
    #[error("node {node} reached norm {norm} > 1 + 1e-7 at t = {t}")]
    NormBlowup { node: usize, norm: f64, t: f64 },
    #[error("time {t} is not before the kernel center t0 = {t0}")]
    TimeNotBeforeCenter { t: f64, t0: f64 },
    #[error("time window [{lo}, {hi}] is not covered by the trajectory [0, {t_final}]")]
    WindowOutsideTrajectory { lo: f64, hi: f64, t_final: f64 },
    #[error("cylinder of radius {radius} around t0 = {t0} does not meet the trajectory domain")]
    EmptyIntersection { t0: f64, radius: f64 },
    #[error("box counting needs at least 3 scales, got {0}")]
    TooFewScales(usize),
    #[error("node {node} is within 1e-6 of the south pole; stereographic chart undefined")]
    PoleProximity { node: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
