//! Simulation and analysis of genealogies in interacting particle systems.
//!
//! A population of `N` particles on a finite state space evolves in discrete
//! generations by selection (resampling proportional to potentials) and
//! mutation (Markov kernels). Tracing the ancestry of a sample of particles
//! from the terminal generation backwards in time yields a partition-valued
//! genealogical process. This crate provides:
//!
//! - forward simulation of such particle systems under multinomial,
//!   stratified and systematic resampling ([`model`], [`resampling`]);
//! - genealogy extraction as labelled partitions ([`genealogy`]);
//! - exact quenched coalescence rates, the induced time rescaling, and
//!   Monte Carlo estimates of both ([`lineage`]);
//! - brute-force enumeration oracles for tiny populations and the
//!   stratified-vs-multinomial merger-ordering counterexample ([`oracle`]);
//! - a reference Kingman coalescent and end-to-end convergence experiments
//!   ([`kingman`]);
//! - CSV/config plumbing shared with the `coalsim` command-line tool ([`io`]).
//!
//! The guide in `book/` walks through the concepts chapter by chapter; every
//! code snippet there is mirrored as a doc-test in this crate.
//!
//! ```
//! use coalsim::model::{builtin_model, BuiltinParams};
//! use coalsim::model::simulate_forward;
//! use coalsim::resampling::ResamplingScheme;
//!
//! let model = builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap();
//! let run = simulate_forward(&model, 100, 50, ResamplingScheme::Multinomial, 7).unwrap();
//! assert_eq!(run.generations(), 50);
//! let cert = coalsim::model::compute_mixing_certificate(&model).unwrap();
//! assert!(cert.gamma >= 1.0);
//! ```

// Negated comparisons (`!(x > 0.0)`) are NaN guards, index loops walk
// parallel arrays, and published approximation constants keep their full
// printed precision.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::excessive_precision,
    clippy::manual_is_multiple_of
)]

pub mod genealogy;
pub mod io;
pub mod kingman;
pub mod lineage;
pub mod model;
pub mod oracle;
pub mod resampling;

use thiserror::Error;

/// Errors across the crate. Variants carry enough context to be actionable
/// from the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown builtin model `{0}`")]
    UnknownModel(String),
    #[error("weights must be strictly positive and normalisable")]
    NonPositiveWeight,
    #[error("duplicate label {0}")]
    DuplicateLabel(usize),
    #[error("label {label} out of range for population size {population}")]
    LabelOutOfRange { label: usize, population: usize },
    #[error("exact filtering over {arity} lineages in a population of {population} exceeds the enumeration guard")]
    ArityTooLarge { population: usize, arity: usize },
    #[error("cumulative coalescence mass {available} does not reach t = {requested}; extend the run horizon")]
    HorizonExceeded { requested: f64, available: f64 },
    #[error("only {survivors} surviving replicates; Monte Carlo conditioning is degenerate")]
    DegenerateSurvival { survivors: usize },
    #[error("problem size too large for exact enumeration (N <= {max_n}, lineages <= {max_r})")]
    TooLarge { max_n: usize, max_r: usize },
    #[error("argument {0} outside its admissible range")]
    OutOfRange(String),
    #[error("arity must satisfy 2 <= alpha <= dimension")]
    BadArity,
    #[error("matrix columns must be non-negative and sum to one")]
    NotStochastic,
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("scheme not supported by this operation")]
    UnsupportedScheme,
    #[error("config error: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
