//! Multi-task graph node embeddings learned by single-task adaptation
//! meta-learning (SAME), together with the classical and meta-learning
//! baselines it is compared against.
//!
//! The crate is organised around the stages of an experiment:
//!
//! * [`graph`] / [`tudataset`] — graph data model, TUDataset-format parsing,
//!   cross-validation folds
//! * [`tensor`] / [`autodiff`] — dense matrices with tape-based reverse-mode
//!   differentiation and Hessian-vector products
//! * [`model`] — the 3-layer GCN encoder with graph/node/link heads
//! * [`episodes`] — multi-task episode construction (support/target pools)
//! * [`training`] — the six training strategies (classical single/multi-task,
//!   traditional meta-learning, fine-tuning, iSAME, eSAME)
//! * [`evaluation`] — frozen-encoder probes, metrics, delta-m, transfer runs
//! * [`report`] — CSV/JSON result files and aggregated tables

pub mod adam;
pub mod autodiff;
pub mod episodes;
pub mod evaluation;
pub mod exec;
pub mod fdcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod report;
pub mod seeds;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod tudataset;

use thiserror::Error;

/// Crate-wide error type. The CLI maps the variants onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A dataset directory or file does not have the expected structure.
    #[error("format error: {0}")]
    Format(String),
    /// A token inside a dataset file could not be parsed.
    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    /// Parsed data violates a structural invariant (e.g. node index out of range).
    #[error("integrity error: {0}")]
    Integrity(String),
    /// An operation was called with incompatible arguments (shape mismatch,
    /// empty label set, index out of range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A computation produced NaN/Inf or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
