use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] usbone_core::Error),
    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
}

impl Error {
    pub fn arg(message: impl Into<String>) -> Self {
        Error::Core(usbone_core::Error::Argument(message.into()))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Core(e) if e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
