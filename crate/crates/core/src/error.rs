use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape(String),
    /// A value was NaN or infinite where finite values are required.
    NonFinite(&'static str),
    /// Malformed caller input (labels out of range, bad planes, ...).
    Input(String),
    /// A parameter outside its valid range.
    Param(String),
    /// The label map holds no pixel of a movable class.
    NoMovableObject,
    /// A metric could not be computed (e.g. no valid pixels).
    Metric(String),
    /// Teacher/student state mismatch.
    State(String),
    /// Unparseable or unknown configuration.
    Config(String),
    /// Finite-difference oracle hit a non-finite evaluation.
    Oracle(String),
    /// Training produced a non-finite loss.
    Diverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(op) => write!(f, "non-finite value in {op}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::NoMovableObject => write!(f, "no movable object in label map"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Oracle(m) => write!(f, "gradient oracle error: {m}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
