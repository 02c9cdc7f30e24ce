use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("gradient requires a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("operation `{0}` does not support higher-order gradients")]
    SecondOrderUnsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
