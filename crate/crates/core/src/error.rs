use thiserror::Error;

/// Errors shared across the learning, kernel and evaluation modules.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum McuosError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is rank deficient below tolerance")]
    RankDeficient,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate neighborhood: duplicate points with zero distance")]
    DegenerateNeighborhood,
    #[error("empty observation overlap between signals {i} and {j}")]
    EmptyOverlap { i: usize, j: usize },
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("degenerate denominator in pre-image combination")]
    DegenerateDenominator,
    #[error("coordinate {0} is observed by no training signal")]
    UncoveredCoordinate(usize),
    #[error("observation set too small: |omega| = {observed} but subspace dimension is {s}")]
    InsufficientObservations { observed: usize, s: usize },
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("patch size does not tile the image: {0}")]
    TilingError(String),
}

pub type Result<T> = std::result::Result<T, McuosError>;
