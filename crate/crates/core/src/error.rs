use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input is {height}×{width}, not a multiple of the spatial ratio {ratio}; pad it first")]
    NotPadded { height: usize, width: usize, ratio: usize },
    #[error("image {width}×{height} is too large for the bitstream header")]
    ImageTooLarge { width: usize, height: usize },
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("range decoder: {0}")]
    Decode(String),
    #[error("ppm parse error at byte {offset}: {msg}")]
    Ppm { offset: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
