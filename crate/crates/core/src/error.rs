use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// A value outside the accepted domain (empty dimension, bad config, ...).
    Invalid(String),
    /// A zero-norm row reached an L2 normalization.
    ZeroNorm { row: usize },
    /// Loss or gradient became NaN/inf.
    NonFinite { what: String },
    /// Class id outside `0..num_classes`.
    Label { label: usize, num_classes: usize },
    /// Training produced a non-finite loss on the given batch.
    Diverged(Box<Divergence>),
}

/// What was being trained when the loss stopped being finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub dialogues: Vec<u64>,
    pub labels: Vec<usize>,
    pub ce: f64,
    pub contrast: Option<f64>,
}

impl Error {
    /// Errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroNorm { .. } | Error::NonFinite { .. } | Error::Diverged(_)
        )
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::ZeroNorm { row } => write!(f, "cannot l2-normalize zero vector at row {row}"),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Label { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::Diverged(d) => write!(
                f,
                "non-finite loss at epoch {} batch {} (dialogues {:?}): ce {}, contrastive {:?}",
                d.epoch, d.batch, d.dialogues, d.ce, d.contrast
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
