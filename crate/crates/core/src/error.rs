use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // checkpoint container
    #[error("truncated header: declared {declared} bytes but only {available} available")]
    TruncatedHeader { declared: u64, available: u64 },
    #[error("header length {0} exceeds the {max} byte limit", max = crate::tensorstore::MAX_HEADER_BYTES)]
    HeaderTooLarge(u64),
    #[error("file too short to hold a header length prefix ({0} bytes)")]
    MissingHeaderLength(usize),
    #[error("malformed header: {0}")]
    HeaderParse(String),
    #[error("unsupported dtype {dtype:?} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name}: byte range [{start}, {end}) is invalid ({reason})")]
    BadByteRange {
        name: String,
        start: u64,
        end: u64,
        reason: String,
    },
    #[error("tensor {0} overlaps a preceding tensor")]
    OverlappingTensor(String),
    #[error("data region has a gap before tensor {0}")]
    GapBeforeTensor(String),
    #[error("data region has {0} trailing bytes not covered by any tensor")]
    TrailingData(u64),
    #[error("duplicate tensor name {0}")]
    NameCollision(String),
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },

    // architecture
    #[error("missing required tensor {0}")]
    MissingTensor(String),
    #[error("missing required metadata key {0}")]
    MissingMetadata(String),
    #[error("invalid metadata value for {key}: {value:?}")]
    BadMetadata { key: String, value: String },
    #[error("inconsistent {field} across layers: layer 0 has {first}, layer {layer} has {found}")]
    InconsistentArch {
        field: &'static str,
        first: usize,
        layer: usize,
        found: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("incompatible expert(s): {0}")]
    Incompatible(String),

    // composition
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("LoRA adapter targets {0}, which is absent from the base checkpoint")]
    LoraTargetMissing(String),
    #[error("LoRA adapter: {0}")]
    BadLora(String),
    #[error("slot out of range: slot {slot} but the model has {num_experts} experts")]
    SlotOutOfRange { slot: usize, num_experts: usize },
    #[error("zero-norm hidden-state difference for expert {expert} at layer {layer}")]
    ZeroNormHidden { layer: usize, expert: usize },
    #[error("missing prompt activations for expert {0}")]
    MissingActivations(usize),
    #[error("empty prompt set")]
    EmptyPromptSet,

    // runtime
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("top_k ({top_k}) exceeds the number of experts ({num_experts})")]
    TopKTooLarge { top_k: usize, num_experts: usize },
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("missing router for {0}")]
    MissingRouter(String),

    // training and analysis
    #[error("nothing to train: {0}")]
    NothingToTrain(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("empty routing trace")]
    EmptyTrace,
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's input rather than the environment.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
