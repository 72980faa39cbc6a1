use alloc::string::String;
use core::fmt;

use crate::shape::Shape;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the engine and the modules built on it.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors disagree on one axis; names the offending axis.
    AxisMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Raw buffer length does not match the declared shape.
    DataLength { expected: usize, got: usize },
    /// `backward` was called on a non-scalar tensor.
    NonScalarLoss(Shape),
    /// A metric was asked to average over zero pixels.
    EmptyMask,
    /// Invalid model or training configuration.
    Config(String),
    /// Checkpoint container does not start with the expected magic bytes.
    BadMagic,
    /// Checkpoint container version not understood by this build.
    UnsupportedVersion(u32),
    /// Byte stream ended before the declared payload.
    Truncated { needed: usize, got: usize },
    /// A weight blob referenced by the configuration is missing.
    MissingBlob(String),
    /// A non-finite value appeared during training.
    NonFinite { step: u64, tensor: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::AxisMismatch {
                context,
                axis,
                expected,
                got,
            } => write!(
                f,
                "{context}: {axis} mismatch (expected {expected}, got {got})"
            ),
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} elements)")
            }
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar [1, 1, 1, 1] loss, got {shape}")
            }
            Error::EmptyMask => write!(f, "evaluation mask selects zero pixels"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::BadMagic => write!(f, "bad magic bytes: not a checkpoint container"),
            Error::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Error::Truncated { needed, got } => {
                write!(f, "truncated payload: needed {needed} bytes, got {got}")
            }
            Error::MissingBlob(name) => write!(f, "missing weight blob '{name}'"),
            Error::NonFinite { step, tensor } => {
                write!(f, "non-finite value in '{tensor}' at step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}
