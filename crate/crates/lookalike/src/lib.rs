//! Multi-view user embeddings and seed-list audience expansion.
//!
//! The pipeline trains one embedding per user and view (demography, loyalty,
//! e-commerce, travel, family), fuses the views with cosine-derived weights,
//! and ranks candidate users against a seed list. A synthetic generator with
//! planted preference groups provides ground truth for the evaluation harness.

pub mod cli;
pub mod config;
pub mod embed_file;
pub mod encoders;
pub mod evaluation;
pub mod expansion;
pub mod fusion;
pub mod kg;
pub mod linalg;
pub mod manifest;
pub mod synthgen;
pub mod trainer;

use std::fmt;

/// The five user views, in fixed slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewKind {
    Demography,
    Loyalty,
    Ichiba,
    Travel,
    Family,
}

impl ViewKind {
    pub const ALL: [ViewKind; 5] = [
        ViewKind::Demography,
        ViewKind::Loyalty,
        ViewKind::Ichiba,
        ViewKind::Travel,
        ViewKind::Family,
    ];

    /// Slot index in `ALL`.
    pub fn slot(self) -> usize {
        match self {
            ViewKind::Demography => 0,
            ViewKind::Loyalty => 1,
            ViewKind::Ichiba => 2,
            ViewKind::Travel => 3,
            ViewKind::Family => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Demography => "demography",
            ViewKind::Loyalty => "loyalty",
            ViewKind::Ichiba => "ichiba",
            ViewKind::Travel => "travel",
            ViewKind::Family => "family",
        }
    }

    /// Single-letter code used by the `--views` flag.
    pub fn code(self) -> char {
        match self {
            ViewKind::Demography => 'd',
            ViewKind::Loyalty => 'l',
            ViewKind::Ichiba => 'i',
            ViewKind::Travel => 't',
            ViewKind::Family => 'f',
        }
    }

    pub fn from_code(c: char) -> Option<ViewKind> {
        Self::ALL.iter().copied().find(|v| v.code() == c)
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("missing input `{file}`; run `{producer}` first")]
    MissingStageInput { file: String, producer: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(file: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            file: file.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
