use std::fmt;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// A failure with an explicit exit code.
#[derive(Debug)]
pub struct Tagged {
    pub kind: ExitKind,
    pub msg: String,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Tagged {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind: ExitKind::Usage,
        msg: msg.into(),
    }
    .into()
}

pub fn numeric(msg: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind: ExitKind::Numeric,
        msg: msg.into(),
    }
    .into()
}

fn core_kind(e: &haan_core::Error) -> ExitKind {
    use haan_core::Error as E;
    match e {
        E::Config { .. } => ExitKind::Usage,
        E::Format { .. } | E::InvalidTrace(_) | E::DimensionMismatch(_) | E::Io(_) => ExitKind::Data,
        E::ZeroVariance
        | E::ZeroVarianceAt { .. }
        | E::InvalidIsd(_)
        | E::Domain(_)
        | E::DegenerateInput(_)
        | E::NoValidRange(_)
        | E::OutOfRange { .. } => ExitKind::Numeric,
    }
}

/// First recognizable cause decides the exit code; unknown errors are data errors.
pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return t.kind;
        }
        if let Some(e) = cause.downcast_ref::<haan_core::Error>() {
            return core_kind(e);
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return ExitKind::Usage;
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return ExitKind::Usage;
        }
    }
    ExitKind::Data
}
