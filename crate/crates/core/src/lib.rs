//! Fine-grid single-shot detection of small objects in overhead imagery.

pub mod anchors;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod network;
pub mod trainer;

/// Keeps freed activation buffers in the process heap instead of returning
/// them to the OS. Training allocates and frees tensors of tens of megabytes
/// every step; with glibc's default mmap threshold each one is page-faulted
/// in afresh, which costs about a third of a training step. No-op on other
/// platforms.
pub fn retain_heap_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Any failure surfaced by the library, split into bad input (the caller
/// can fix it) and runtime failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Anchors(#[from] anchors::AnchorError),
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

impl Error {
    pub fn is_validation(&self) -> bool {
        use dataset::DatasetError as D;
        use network::NetworkError as N;
        match self {
            Error::Dataset(e) => !matches!(e, D::Io { .. } | D::Image { .. }),
            Error::Anchors(e) => !matches!(e, anchors::AnchorError::Io { .. }),
            Error::Network(e) => matches!(e, N::Config(_) | N::Checkpoint(_)),
            Error::Train(e) => matches!(e, trainer::TrainError::Config(_) | trainer::TrainError::EmptyDataset),
            Error::Inference(e) => match e {
                inference::InferenceError::Config(_) | inference::InferenceError::Parse { .. } => true,
                inference::InferenceError::Network(n) => matches!(n, N::Config(_)),
                _ => false,
            },
            Error::Eval(_) | Error::Invalid(_) => true,
            Error::Io { .. } => false,
        }
    }
}
