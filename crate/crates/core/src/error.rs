use alloc::string::String;
use core::fmt;

/// Errors produced by tensor kernels, the layer graph and the training /
/// evaluation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer argument shapes are inconsistent; the message names
    /// both shapes.
    ShapeMismatch(String),
    /// An operation or model specification is invalid (zero-sized output,
    /// bad stride, geometry that breaks divisibility, ...).
    InvalidSpec(String),
    /// A named graph input was not provided, or an unknown one was.
    UnboundInput(String),
    /// A parameter binding does not resolve in the store.
    UnknownParam(String),
    /// A parameter name was inserted twice.
    DuplicateParam(String),
    /// A node wires to a not-yet-added node; graphs are built in
    /// topological order so this also rules out cycles.
    InvalidWire(String),
    /// Gradient check requested on a function that is not scalar-valued.
    NonScalarOutput,
    /// A batch-level operation received no samples.
    EmptyBatch,
    /// Dataset does not contain enough identities for the requested split.
    InsufficientIdentities { needed: usize, available: usize },
    /// An identity is missing images for one camera.
    MissingCamera { identity: String, camera: char },
    /// Pair generation found no positive cross-camera pairs.
    NoPositivePairs,
    /// Mining or pair generation found no negative candidates.
    NoNegativePairs,
    /// A probe identity does not appear in the gallery.
    ProbeNotInGallery(String),
    /// Trial curves of different lengths cannot be averaged.
    MixedCurveLengths { expected: usize, actual: usize },
    /// Training aborted because the loss became non-finite.
    Divergence { iter: usize },
    /// Generic invalid argument with context.
    InvalidArgument(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid specification: {msg}"),
            Error::UnboundInput(name) => write!(f, "unbound graph input: {name}"),
            Error::UnknownParam(name) => write!(f, "unknown parameter: {name}"),
            Error::DuplicateParam(name) => write!(f, "duplicate parameter: {name}"),
            Error::InvalidWire(msg) => write!(f, "invalid wire: {msg}"),
            Error::NonScalarOutput => write!(f, "gradient check requires a scalar-valued function"),
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::InsufficientIdentities { needed, available } => write!(
                f,
                "insufficient identities: need {needed}, have {available}"
            ),
            Error::MissingCamera { identity, camera } => {
                write!(f, "identity {identity} has no images for camera {camera}")
            }
            Error::NoPositivePairs => write!(f, "no positive cross-camera pairs available"),
            Error::NoNegativePairs => write!(f, "no negative cross-camera pairs available"),
            Error::ProbeNotInGallery(id) => {
                write!(f, "probe identity {id} is absent from the gallery")
            }
            Error::MixedCurveLengths { expected, actual } => {
                write!(f, "curve length mismatch: expected {expected}, got {actual}")
            }
            Error::Divergence { iter } => {
                write!(f, "training diverged: non-finite loss at iteration {iter}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
