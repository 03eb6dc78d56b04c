use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    InvalidShape {
        op: &'static str,
        reason: String,
    },
    InvalidAxis {
        axis: usize,
        rank: usize,
    },
    DivisionGuard {
        index: usize,
        value: f64,
    },
    NonFinite {
        op: &'static str,
    },
    NonFiniteGradient {
        param: String,
    },
    InvalidParameter(String),
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    OracleTooLarge {
        pixels: usize,
        limit: usize,
    },
    SolverDiverged {
        iterations: usize,
        residual: f64,
    },
    MissingParameter(String),
    EmptyDataset,
    EmptyValidSet,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, found } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}")
            }
            Error::InvalidShape { op, reason } => write!(f, "{op}: {reason}"),
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::DivisionGuard { index, value } => {
                write!(f, "division guard: divisor {value:e} at element {index}")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::WindowTooLarge { window, height, width } => write!(
                f,
                "kernel window {window} larger than image {height}x{width}"
            ),
            Error::OracleTooLarge { pixels, limit } => {
                write!(f, "exact solve limited to {limit} pixels, got {pixels}")
            }
            Error::SolverDiverged { iterations, residual } => write!(
                f,
                "conjugate gradient did not converge in {iterations} iterations (residual {residual:e})"
            ),
            Error::MissingParameter(name) => write!(f, "missing parameter `{name}`"),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::EmptyValidSet => write!(f, "no valid pixels to evaluate"),
        }
    }
}

impl core::error::Error for Error {}
