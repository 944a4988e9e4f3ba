//! Failure classes and their process exit codes.

use std::fmt;

use streamrq::checkpoint::CheckpointError;
use streamrq::eval::{EvalError, ManifestError};
use streamrq::frontend::FrontendError;
use streamrq::model::ModelError;
use streamrq::ngram::LmError;
use streamrq::stream::StreamError;
use streamrq::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub err: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // skip causes already spelled out by the message above them
        let mut shown = String::new();
        for cause in self.err.chain() {
            let msg = cause.to_string();
            if shown.contains(&msg) {
                continue;
            }
            if !shown.is_empty() {
                shown.push_str(": ");
            }
            shown.push_str(&msg);
        }
        f.write_str(&shown)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Usage,
        err: anyhow::anyhow!("{msg}"),
    }
}

fn tensor_kind(e: &TensorError) -> Kind {
    match e {
        TensorError::NonFinite(_) => Kind::Numeric,
        TensorError::Usage(_) | TensorError::Config(_) => Kind::Usage,
        TensorError::Shape { .. } => Kind::Data,
    }
}

/// Attach a failure class (and optional context) to library errors.
pub trait Classify<T> {
    fn kind(self, kind: Kind, ctx: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind, ctx: &str) -> CliResult<T> {
        self.map_err(|e| Failure {
            kind,
            err: e.into().context(ctx.to_string()),
        })
    }
}

macro_rules! from_kind {
    ($t:ty, $k:expr) => {
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                let kind: fn(&$t) -> Kind = $k;
                Failure {
                    kind: kind(&e),
                    err: e.into(),
                }
            }
        }
    };
}

from_kind!(TensorError, tensor_kind);
from_kind!(std::io::Error, |_| Kind::Data);
from_kind!(csv::Error, |_| Kind::Data);
from_kind!(serde_json::Error, |_| Kind::Data);
from_kind!(FrontendError, |_| Kind::Data);
from_kind!(ManifestError, |_| Kind::Data);
from_kind!(CheckpointError, |_| Kind::Data);
from_kind!(LmError, |e| match e {
    LmError::Config(_) => Kind::Usage,
    _ => Kind::Data,
});
from_kind!(ModelError, |e| match e {
    ModelError::Checkpoint(_) => Kind::Data,
    _ => Kind::Usage,
});
from_kind!(StreamError, |e| match e {
    StreamError::Numeric(t) => tensor_kind(t),
    _ => Kind::Usage,
});
from_kind!(EvalError, |e| match e {
    EvalError::Numeric { .. } => Kind::Numeric,
    EvalError::NotFinetuned => Kind::Usage,
    _ => Kind::Data,
});
