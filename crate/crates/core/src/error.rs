use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt bitstream at frame {frame:?}: {reason}")]
    CorruptBitstream { frame: Option<usize>, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] bvc_tensor::TensorError),
    #[error("image: {0}")]
    Image(String),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CodecError {
    CodecError::InvalidArgument(msg.into())
}

pub(crate) fn corrupt(frame: Option<usize>, reason: impl Into<String>) -> CodecError {
    CodecError::CorruptBitstream {
        frame,
        reason: reason.into(),
    }
}

impl CodecError {
    /// Attaches the display index of the frame being processed.
    pub fn at_frame(self, frame: usize) -> Self {
        match self {
            e @ CodecError::Frame { .. } => e,
            CodecError::CorruptBitstream { frame: None, reason } => CodecError::CorruptBitstream {
                frame: Some(frame),
                reason,
            },
            e => CodecError::Frame {
                frame,
                source: Box::new(e),
            },
        }
    }
}
