use thiserror::Error;

pub type Result<T, E = BitflowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BitflowError {
    #[error("dimension is zero or element count overflows")]
    DimensionOverflow,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("word span length mismatch ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("channel mismatch: input has {input}, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("convolution output would be empty")]
    EmptyOutput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input")]
    EmptyInput,
    #[error("value {0} does not fit a signed 16-bit Q-format")]
    QuantOverflow(f64),
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("training stage violation: {0}")]
    StageViolation(String),
    #[error("output mismatch: {0}")]
    Mismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
