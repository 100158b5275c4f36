use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("boundary points coincide")]
    CoincidentPoints,
    #[error("point {0:?} is not strictly inside the unit disk")]
    NotInterior((f64, f64)),
    #[error("degenerate side: endpoints coincide")]
    DegenerateSide,
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("decoration does not cover vertex {0}")]
    MissingDecoration(usize),
    #[error("invalid decoration: {0}")]
    InvalidDecoration(String),
    #[error("polygon with {0} vertices exceeds the enumeration guard of {1}")]
    TooLarge(usize, usize),
    #[error("perturbation overshoots the neighbouring vertex")]
    Overshoot,
    #[error("no admissible perturbation found down to tau = {0:e}")]
    NoAdmissibleTau(f64),
    #[error("parent polygon is not admissible")]
    NotAdmissibleParent,
    #[error("polygon is not admissible")]
    NotAdmissible,
    #[error("horocycles of the base decoration overlap at vertices {0} and {1}")]
    DecorationOverlap(usize, usize),
    #[error("mesh generation failed: {0}")]
    MeshFailure(String),
    #[error("argument outside domain: {0}")]
    DomainError(String),
    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("arc leaves the meshed domain")]
    ArcOutsideDomain,
    #[error("solutions live on different meshes")]
    MeshMismatch,
    #[error("ring is not an annulus: {0}")]
    NotAnAnnulus(String),
    #[error("bad boundary data: {0}")]
    BoundaryData(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
