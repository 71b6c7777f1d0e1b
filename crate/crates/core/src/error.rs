use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    NoAudioFound,
    InvalidRate(u32),
    ZeroPower(&'static str),
    InvalidClip(String),
    BandSpec(String),
    InvalidParams(String),
    Dimension { expected: usize, actual: usize, what: &'static str },
    Expansion { output_delta_db: f64 },
    TooShort { samples: usize, frame: usize },
    TrainingDiverged { epoch: usize },
    NotReady { have: usize, need: usize },
    QueueExhausted,
    InvalidAction { action: usize, n_actions: usize },
    Listener(String),
    /// A progress sink could not record an event.
    Sink(String),
    /// Error raised inside a protocol stage, with the stage and step attached.
    Protocol { stage: &'static str, step: usize, source: alloc::boxed::Box<Error> },
}

impl Error {
    /// True when the error, possibly inside stage context, means the
    /// listener is unavailable.
    pub fn is_listener(&self) -> bool {
        match self {
            Error::Listener(_) => true,
            Error::Protocol { source, .. } => source.is_listener(),
            _ => false,
        }
    }

    pub fn in_stage(self, stage: &'static str, step: usize) -> Self {
        Error::Protocol { stage, step, source: alloc::boxed::Box::new(self) }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NoAudioFound => write!(f, "no audio found"),
            Error::InvalidRate(r) => write!(f, "invalid sample rate {r} Hz"),
            Error::ZeroPower(what) => write!(f, "{what} has zero power"),
            Error::InvalidClip(msg) => write!(f, "invalid clip: {msg}"),
            Error::BandSpec(msg) => write!(f, "invalid band specification: {msg}"),
            Error::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            Error::Dimension { expected, actual, what } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, got {actual}")
            }
            Error::Expansion { output_delta_db } => write!(
                f,
                "gains imply expansion or infinite compression (output level delta {output_delta_db} dB)"
            ),
            Error::TooShort { samples, frame } => {
                write!(f, "clip of {samples} samples is shorter than one {frame}-sample frame")
            }
            Error::TrainingDiverged { epoch } => write!(f, "training diverged at epoch {epoch}"),
            Error::NotReady { have, need } => {
                write!(f, "replay buffer holds {have} transitions, {need} needed")
            }
            Error::QueueExhausted => write!(f, "segment queue has no pair with distinct CR sets"),
            Error::InvalidAction { action, n_actions } => {
                write!(f, "action {action} outside action space of size {n_actions}")
            }
            Error::Listener(msg) => write!(f, "listener unavailable: {msg}"),
            Error::Sink(msg) => write!(f, "could not record progress: {msg}"),
            Error::Protocol { stage, step, source } => {
                write!(f, "{stage} (step {step}): {source}")
            }
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Protocol { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}
