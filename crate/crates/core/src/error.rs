//! Error type shared by every stage of the estimation pipeline.

use std::fmt;

/// Pipeline stage an error originated from. Used to tag propagated errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Simulation,
    Discretization,
    RankSelection,
    Eigendecomposition,
    Profiles,
    Scales,
    Weights,
    Labeling,
    Competition,
    Sieve,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Simulation => "simulation",
            Stage::Discretization => "discretization",
            Stage::RankSelection => "rank-selection",
            Stage::Eigendecomposition => "eigendecomposition",
            Stage::Profiles => "profiles",
            Stage::Scales => "scales",
            Stage::Weights => "weights",
            Stage::Labeling => "labeling",
            Stage::Competition => "competition",
            Stage::Sieve => "sieve",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("malformed estimate: {0}")]
    MalformedEstimate(String),

    #[error("degenerate quantile grid: {0}")]
    DegenerateGrid(String),

    /// Instrument relevance failed: eigenvalues complex or not distinct.
    #[error("instrument relevance failure: {0}")]
    Relevance(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("weights are not unique: {0}")]
    NonUniqueWeights(String),

    #[error("labeling ambiguity: {0}")]
    LabelingAmbiguity(String),

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("ambiguous solution: {0}")]
    Ambiguity(String),

    #[error("uniqueness violation: {0}")]
    Uniqueness(String),

    #[error("model misfit: {0}")]
    Misfit(String),

    #[error("value out of attainable range: {0}")]
    Range(String),

    #[error("optimization failure: {0}")]
    Optimization(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("[{stage}] {source}")]
    Staged {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Wraps the error with a stage tag unless it already carries one.
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Staged { .. } => e,
            other => Error::Staged {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Staged { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 identification/assumption, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Relevance(_)
            | Error::RankDeficient(_)
            | Error::NonUniqueWeights(_)
            | Error::LabelingAmbiguity(_)
            | Error::Identification(_)
            | Error::Ambiguity(_)
            | Error::Uniqueness(_)
            | Error::Misfit(_)
            | Error::Range(_) => 4,
            Error::Domain(_)
            | Error::Numeric(_)
            | Error::DegenerateDensity(_)
            | Error::MalformedEstimate(_)
            | Error::DegenerateGrid(_)
            | Error::Optimization(_) => 5,
            Error::Staged { .. } => unreachable!("root strips stage tags"),
        }
    }
}

/// Extension for tagging `Result`s with a stage.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tag_is_applied_once() {
        let e = Error::Relevance("tie".into())
            .at(Stage::Eigendecomposition)
            .at(Stage::Profiles);
        assert!(e.to_string().starts_with("[eigendecomposition]"));
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::config("estimation.r", "missing").exit_code(), 2);
        assert_eq!(Error::Data("bad row".into()).exit_code(), 3);
        assert_eq!(Error::numeric("nan").exit_code(), 5);
    }
}
