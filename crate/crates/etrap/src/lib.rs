//! Simulation and statistics toolkit for a single electron in a microwave
//! quadrupole trap.
//!
//! The crate is organized as six layers:
//!
//! - [`model`]: particle/drive specifications, analytic field models,
//!   pseudopotential evaluation, and target-driven calibration.
//! - [`dynamics`]: fixed-step integration of the driven equation of motion,
//!   with optional tickle tone and drive-amplitude noise.
//! - [`mathieu`]: linear-trap stability parameters and Floquet (monodromy)
//!   classification; the secular-frequency oracle for the integrator.
//! - [`analysis`]: spectral extraction of secular frequency and amplitude,
//!   subharmonic-lock detection, stability sweeps, and tickle scans.
//! - [`stats`]: detection-chain efficiency, Poisson number inversion,
//!   deadtime/histogram processing, decay fits, and a Monte Carlo cycle
//!   simulator.
//! - [`cli`]: configuration parsing, subcommand dispatch, and deterministic
//!   text output.
//!
//! All quantities are strict SI internally; unit conversions happen only at
//! the command-line boundary.

pub mod analysis;
pub mod cli;
pub mod constants;
pub mod dynamics;
pub mod mathieu;
pub mod model;
pub(crate) mod rng;
pub mod stats;

/// Coordinate axis label for 3D models and axis-resolved results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Crate-wide error type. Domain errors map to exit code 1 at the CLI,
/// configuration errors to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pseudopotential increases monotonically within {extent_m} m; depth unbounded within extent")]
    UnboundedDepth { extent_m: f64 },

    #[error("calibration failed: no parameter set meets all targets (best residuals recorded in report)")]
    CalibrationFailed { report: Box<model::CalibrationReport> },

    #[error("integration diverged (non-finite state); last valid time {last_valid_time} s")]
    IntegrationDiverged { last_valid_time: f64 },

    #[error("no secular motion detected: spectrum has no peak above the noise floor")]
    NoSecularMotion,

    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),

    #[error("phase {requested} rad is not on the sweep grid; nearest grid phase is {nearest} rad")]
    PhaseOffGrid { requested: f64, nearest: f64 },

    #[error("ensemble unstable without tickle: {0}")]
    UnstableEnsemble(String),

    #[error("detection probability 1.0 saturates the Poisson inversion")]
    SaturatedDetector,

    #[error("event timestamps not sorted within cycle {cycle}")]
    UnsortedEvents { cycle: usize },

    #[error("fit failed: {message}")]
    FitFailed {
        message: String,
        best: Box<stats::DecayFit>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for the CLI: 2 for configuration errors, 1 for
    /// domain errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
