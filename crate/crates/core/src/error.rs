use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid species: {0}")]
    InvalidSpecies(String),
    #[error("{count} selections exceed the limit of {limit}")]
    CombinatorialLimit { count: u128, limit: u128 },
    #[error("model matrix is rank deficient (sigma_min/sigma_max = {0:e})")]
    RankDeficient(f64),
    #[error("|Im xi| = {0} Hz would overflow the echo weights")]
    OverflowRisk(f64),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("curvature at the true parameter vanishes")]
    DegenerateCurvature,
    #[error("no sign change found in (0, {0}]")]
    NonBracketed(f64),
    #[error("polynomial degree {degree} exceeds the limit of {limit}")]
    PolynomialDegreeLimit { degree: usize, limit: usize },
    #[error("projection did not converge: violation {violation:e} after {sweeps} sweeps")]
    NonConvergence { violation: f64, sweeps: usize },
    #[error("bad phantom spec: {0}")]
    Spec(String),
    #[error("bad container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::RankDeficient(_)
                | Error::OverflowRisk(_)
                | Error::DegenerateCurvature
                | Error::NonBracketed(_)
                | Error::NonConvergence { .. }
                | Error::PolynomialDegreeLimit { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DimensionError",
            Error::InvalidSpecies(_) => "InvalidSpecies",
            Error::CombinatorialLimit { .. } => "CombinatorialLimit",
            Error::RankDeficient(_) => "RankDeficient",
            Error::OverflowRisk(_) => "OverflowRisk",
            Error::Domain(_) => "DomainError",
            Error::DegenerateCurvature => "DegenerateCurvature",
            Error::NonBracketed(_) => "NonBracketed",
            Error::PolynomialDegreeLimit { .. } => "PolynomialDegreeLimit",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::Spec(_) => "SpecError",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
