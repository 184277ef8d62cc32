//! Structured error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by the tensor engine, backbones, data pipeline,
/// CL methods and metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum CglError {
    /// Operand shapes are not conformable for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A reduction was requested over an empty axis.
    EmptyReduction { op: &'static str },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// An optimizer step found a parameter without a gradient.
    MissingGradient { name: String },
    /// A label refers to a class outside the active set.
    InactiveLabel { label: usize },
    /// The active-class mask has no active entry.
    NoActiveClasses,
    /// A permutation argument is not a valid permutation.
    InvalidPermutation { detail: String },
    /// A configuration value violates its invariant.
    InvalidConfig { detail: String },
    /// The GEM projection QP did not converge within the iteration cap.
    QpNoConvergence { residual: f64 },
    /// A method hook was handed an empty sample set.
    EmptyTaskData { op: &'static str },
    /// Malformed or inconsistent input data.
    InvalidData { detail: String },
}

impl fmt::Display for CglError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CglError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            CglError::EmptyReduction { op } => write!(f, "{op}: empty reduction axis"),
            CglError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got shape {shape:?}")
            }
            CglError::MissingGradient { name } => {
                write!(f, "sgd_step: parameter `{name}` has no gradient")
            }
            CglError::InactiveLabel { label } => {
                write!(f, "cross_entropy: label {label} is not an active class")
            }
            CglError::NoActiveClasses => write!(f, "cross_entropy: no active classes in mask"),
            CglError::InvalidPermutation { detail } => write!(f, "invalid permutation: {detail}"),
            CglError::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
            CglError::QpNoConvergence { residual } => {
                write!(f, "gem projection QP did not converge, residual {residual:e}")
            }
            CglError::EmptyTaskData { op } => write!(f, "{op}: empty task data"),
            CglError::InvalidData { detail } => write!(f, "invalid data: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CglError {}

pub type Result<T> = core::result::Result<T, CglError>;
