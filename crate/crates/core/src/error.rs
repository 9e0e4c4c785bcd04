use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("coefficient tensor of degree {degree} is not symmetric: entry {index:?} differs from its permutation {permuted:?}")]
    Asymmetric {
        degree: usize,
        index: Vec<usize>,
        permuted: Vec<usize>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point has a nonpositive coordinate x[{index}] = {value}")]
    NonPositivePoint { index: usize, value: f64 },

    #[error("point mixes zero and positive coordinates; only 0 or strictly positive vectors are classified")]
    MixedZeroPoint,

    #[error("matrix is not symmetric: |M[{i}][{j}] - M[{j}][{i}]| = {gap}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },

    #[error("matrix is not diagonally signed: M[{i}][{j}] = {value} must be negative")]
    NotDiagonallySigned { i: usize, j: usize, value: f64 },

    #[error("eigen solver failed: {0}")]
    Eigen(String),

    #[error("perturbation size must be positive, got {0}")]
    NonPositivePerturbation(f64),

    #[error("perturbation {needed} falls outside the representable range [{floor}, {cap}]")]
    PerturbationOutOfRange { needed: f64, floor: f64, cap: f64 },

    #[error("layout: {0}")]
    Layout(String),

    #[error("tensor storage of {bytes} bytes exceeds the budget of {budget} bytes")]
    Budget { bytes: u128, budget: u128 },

    #[error("degree {k} outside the supported range 2..={max}")]
    Degree { k: usize, max: usize },

    #[error("hessian requested for N = {n}, above the cap {cap}")]
    HessianCap { n: usize, cap: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shooting failed: {0}")]
    Shooting(String),

    #[error("singular linear system at q = {q}")]
    Singular { q: f64 },

    #[error("negative radicand {value} at q = {q} for species {species}")]
    NegativeRadicand { q: f64, species: usize, value: f64 },

    #[error("zero denominator in overlap map for species {0}")]
    ZeroDenominator(usize),

    #[error("fixed-point iteration did not converge in {iterations} steps (gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("non-finite iterate at step {0}")]
    NonFinite(usize),

    #[error("stage I not converged: |m^k - m^(k-1)|_N = {gap} > {threshold}")]
    StageOneNotConverged { gap: f64, threshold: f64 },

    #[error("cannot round: self-overlap of species {species} is {value}")]
    Rounding { species: usize, value: f64 },

    #[error("tree: {0}")]
    Tree(String),

    #[error("cache file: {0}")]
    Cache(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
