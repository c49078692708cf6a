//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("L0 = {0} is not a positive multiple of five")]
    L0NotMultipleOfFive(u64),
    #[error("ell_0 = {ell0} < 5: L0 = {l0} is too small for exponent a = {a}")]
    L0TooSmall { l0: u64, a: f64, ell0: u64 },
    #[error("exponent a = {0} outside the admissible domain: 2a + a^2 must be < 1")]
    ExponentDomain(f64),
    #[error("paper regime requires a <= beta/(1000 d); got a = {a}, beta = {beta}, d = {d}")]
    PaperRegimeExponent { a: f64, beta: f64, d: usize },
    #[error("schedule has no level n with n >= m_bar + 1 = {needed}; {available} level(s) built")]
    InsufficientLevels { needed: usize, available: usize },

    #[error("perturbation amplitude eta0 = {0} must lie in [0, 1/2)")]
    Eta0OutOfRange(f64),
    #[error("noise spacing h = {h} must divide R/2 = {half_r} evenly and satisfy h < R/4")]
    BadNoiseSpacing { h: f64, half_r: f64 },
    #[error("requested coverage needs ~{need_mib} MiB of field storage (budget {budget_mib} MiB)")]
    RegionTooLarge { need_mib: usize, budget_mib: usize },
    #[error("point {0:?} lies outside the environment's covered region")]
    OutOfCoverage([f64; 3]),

    #[error("inflation distance {delta} outside (0, r0/2) with r0 = {r0}")]
    DeltaOutOfRange { delta: f64, r0: f64 },
    #[error("radius argument {r} outside the annulus [{r1}, {r2}]")]
    OutsideAnnulus { r: f64, r1: f64, r2: f64 },

    #[error("walk-on-spheres step cap {0} exceeded; geometry oracle may be inconsistent")]
    WalkStepCap(usize),

    #[error("kernel grid leaks {leak:.3e} of its mass (cap {cap:.1e}); enlarge the grid")]
    GridTooSmall { leak: f64, cap: f64 },
    #[error("grids are not matched (origin/spacing/extents differ)")]
    GridMismatch,
    #[error("exact transport refused: support size {0} above threshold {1}")]
    SupportTooLarge(usize, usize),
    #[error("coupled chain failed at step {step}: {reason}")]
    ChainStep { step: usize, reason: String },

    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
