use std::path::PathBuf;

/// Crate-wide error type. Contract violations carry enough context to
/// identify the offending shapes, files, or parameter blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("conv2d: input has {input} channels but weight expects {weight}")]
    ChannelMismatch { input: usize, weight: usize },

    #[error("conv2d: non-positive output size for input {input:?}, kernel {kernel}, stride {stride}, padding {padding}")]
    NonPositiveOutput {
        input: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tape is empty or already consumed")]
    TapeConsumed,

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("normalize: std must be positive, got {std}")]
    NonPositiveStd { std: f64 },

    #[error("image too small: {height}x{width} is below the {min}x{min} minimum")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("backbone: input size {size} is not divisible by the downsampling factor {factor}")]
    InputNotDivisible { size: usize, factor: usize },

    #[error("AUC undefined: scores contain only one class")]
    UndefinedAuc,

    #[error("threshold: no positive samples present")]
    NoPositives,

    #[error("non-finite loss at step {step}; first offending parameter block: {block}")]
    NonFiniteLoss { step: usize, block: String },

    #[error("target class {class} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("forward trace was captured for class {traced}, not class {requested}")]
    TraceClassMismatch { traced: usize, requested: usize },

    #[error("config parse error in {path}: line {line}: {msg}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("manifest {path}: line {line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("referenced file does not exist: {path}")]
    MissingFile { path: PathBuf },

    #[error("checkpoint {path}: {msg}")]
    CheckpointFormat { path: PathBuf, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
