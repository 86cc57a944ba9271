use thiserror::Error;

/// Failure to parse a fixed-layout binary encoding.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid group element encoding")]
    Point,
    #[error("scalar not in canonical range")]
    Scalar,
    #[error("identity public key is malformed")]
    Identity,
    #[error("malformed frame: {0}")]
    Frame(String),
}
