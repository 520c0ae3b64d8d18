use thiserror::Error;

#[derive(Debug, Error)]
pub enum DfqError {
    #[error("invalid clip range: alpha must be positive, got {0}")]
    InvalidRange(f64),
    #[error("invalid bit width: {0} (must be in 2..=16)")]
    InvalidBits(u32),
    #[error("non-finite value in input tensor")]
    NonFiniteInput,
    #[error("range tracker is frozen")]
    FrozenTracker,
    #[error("range tracker has not observed any data")]
    UninitializedTracker,
    #[error("unknown architecture: {0}")]
    UnknownArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: train-mode batch norm needs batch size >= 2, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDiverged { step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing teacher logits on synthetic batch")]
    MissingLogits,
    #[error("semantic start layer {l_st} exceeds number of BN layers {num_layers}")]
    SemanticLayerOutOfRange { l_st: usize, num_layers: usize },
    #[error("separability metrics need at least 2 classes with 2 samples each")]
    InsufficientClasses,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DfqError>;
