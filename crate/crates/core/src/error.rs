use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "reversible reconstruction diverged: max abs error {error:.3e} exceeds bound {bound:.3e}"
    )]
    Reconstruction { error: f64, bound: f64 },

    #[error("activation ledger overflow: {bytes} bytes retained, limit {limit}")]
    LedgerOverflow { bytes: usize, limit: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
