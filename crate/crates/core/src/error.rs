//! Error vocabulary shared by every module.
//!
//! The variants map one-to-one onto the failure classes the public contracts
//! name: shape mismatches, domain violations (negative flow capacities),
//! contract misuse, resource caps, bad external data, and internal numeric
//! failures that should never happen on finite inputs.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum FlowError {
    /// Shape or extent mismatch. Always names the offending shapes.
    #[error("dimension error in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// Input outside the mathematical domain of the operation.
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    /// API misuse: a precondition that is not about shapes or values.
    #[error("contract error in {op}: {details}")]
    Contract { op: &'static str, details: String },

    /// Work refused because it exceeds a configured cap.
    #[error("resource error in {op}: {details}")]
    Resource { op: &'static str, details: String },

    /// Malformed or unusable external data (files, token streams).
    #[error("data error in {op}: {details}")]
    Data { op: &'static str, details: String },

    /// Operation not defined for the requested configuration.
    #[error("unsupported operation in {op}: {details}")]
    Unsupported { op: &'static str, details: String },

    /// Non-finite value produced from finite inputs; includes a location.
    #[error("internal error in {op}: {details}")]
    Internal { op: &'static str, details: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

impl FlowError {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Dim { op, details: details.into() }
    }
    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Domain { op, details: details.into() }
    }
    pub fn contract(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Contract { op, details: details.into() }
    }
    pub fn resource(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Resource { op, details: details.into() }
    }
    pub fn data(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Data { op, details: details.into() }
    }
    pub fn unsupported(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Unsupported { op, details: details.into() }
    }
    pub fn internal(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::Internal { op, details: details.into() }
    }
}
