use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("segment ids must be sorted ascending (position {0})")]
    UnsortedSegments(usize),
    #[error("segment id {id} out of range for {num_segments} segments")]
    SegmentOutOfRange { id: usize, num_segments: usize },
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("architecture string has length {0}, expected a positive multiple of 6")]
    TokenLength(usize),
    #[error("unknown token `{token}` at position {position} for class {class}")]
    UnknownToken {
        position: usize,
        class: &'static str,
        token: String,
    },
    #[error("registry entry `{key}` has shape {stored:?}, tensor needs {expected:?}")]
    RegistryCorrupt {
        key: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("proposal does not belong to the current controller state")]
    StaleProposal,
    #[error("empty {0}")]
    Empty(&'static str),
}
