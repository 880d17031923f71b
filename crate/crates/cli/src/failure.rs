use std::fmt;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const CONVERGENCE: u8 = 3;

/// Why a command stopped; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Convergence(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => USAGE,
            Failure::Data(_) => DATA,
            Failure::Convergence(_) => CONVERGENCE,
        }
    }

    pub fn classify(e: anyhow::Error) -> Self {
        let numerical = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<ordlat::Error>(),
                Some(ordlat::Error::SingularInformation(_) | ordlat::Error::BoundaryEstimate(_))
            )
        });
        if numerical {
            Failure::Convergence(format!("{e:#}"))
        } else {
            Failure::Data(e)
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Data(e) => write!(f, "{e:#}"),
            Failure::Convergence(m) => write!(f, "did not converge: {m}"),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl From<ordlat::Error> for Failure {
    fn from(e: ordlat::Error) -> Self {
        Failure::classify(e.into())
    }
}
