use std::path::PathBuf;

/// Errors surfaced by the library. Contract violations on internal invariants
/// panic instead; these are the recoverable failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sphere tracing started inside the surface (s = {0})")]
    StartInsideSurface(f64),

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: u64, what: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no readable images in {0}")]
    NoImages(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mesh file: {0}")]
    MeshFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
