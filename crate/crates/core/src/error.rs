use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Dimension(String),
    /// Bad input value (label out of range, wrong image shape, ...).
    Input(String),
    /// API misuse, e.g. backward from a non-scalar.
    Usage(String),
    /// Invalid configuration field.
    Config(String),
    /// Operation not valid in the model's current state.
    State(String),
    /// Training produced a non-finite loss.
    NumericalAbort { step: usize, lr: f64, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::NumericalAbort { step, lr, loss } => {
                write!(f, "non-finite loss: step={step} lr={lr:e} loss={loss}")
            }
        }
    }
}

impl core::error::Error for Error {}
