use thiserror::Error;

use crate::chain::Arm;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid trajectory {index}: {reason}")]
    InvalidTrajectory { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite rate on arm {arm}")]
    NonFiniteRate { arm: Arm },

    #[error("total outgoing rate is zero in state {state}")]
    ZeroTotalRate { state: usize },

    #[error("rate on arm {arm} overflows (log-rate {lngen})")]
    OverflowingRate { arm: Arm, lngen: f64 },

    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("arm {0} is not part of the topology")]
    UnknownArm(Arm),

    #[error("trajectory {trajectory} uses arm {arm}, which is not in the topology")]
    TopologyViolation { trajectory: usize, arm: Arm },

    #[error("rate functions cover different nonparametric arms")]
    ArmMismatch,

    #[error("loss is not finite at the initial point")]
    NonFiniteLoss,

    #[error("mixture fit degenerated: {0}")]
    DegenerateMixture(String),

    #[error("covariate dimension is {0}; a slice specification is required")]
    NeedsSliceSpec(usize),

    #[error("simulation exceeded {0} jumps without absorption or censoring")]
    RunawaySimulation(usize),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
