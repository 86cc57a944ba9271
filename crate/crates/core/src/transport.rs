//! Byte-level transports between the three roles. Bodies are already padded;
//! a transport only moves them. The in-process implementations call the
//! services directly, the HTTP ones live in [`crate::http`].

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

pub trait IssuerTransport: Send + Sync {
    /// GET /v1/group-keys
    fn group_keys(&self) -> Result<Vec<u8>, TransportError>;
    /// POST /v1/join
    fn join(&self, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

pub trait VerifierTransport: Send + Sync {
    /// POST /v1/collect
    fn collect(&self, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

/// Issuer → verifier admin channel (POST /v1/admin/epoch).
pub trait RotationSink: Send + Sync {
    fn notify_epoch(&self, body: &[u8]) -> Result<(), TransportError>;
}

impl<T: IssuerTransport + ?Sized> IssuerTransport for Arc<T> {
    fn group_keys(&self) -> Result<Vec<u8>, TransportError> {
        (**self).group_keys()
    }

    fn join(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).join(body)
    }
}

impl<T: VerifierTransport + ?Sized> VerifierTransport for Arc<T> {
    fn collect(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).collect(body)
    }
}

impl<T: RotationSink + ?Sized> RotationSink for Arc<T> {
    fn notify_epoch(&self, body: &[u8]) -> Result<(), TransportError> {
        (**self).notify_epoch(body)
    }
}
