//! Neural probabilistic logic programming.
//!
//! A program mixes ordinary logic clauses, probabilistic facts, annotated
//! disjunctions and neural annotations whose probabilities come from a
//! network's normalized output. Inference runs in four stages:
//!
//! 1. [`grounder`] finds the ground clauses relevant to a query by tabled
//!    SLD resolution.
//! 2. [`compiler::complete`] turns the ground program into a propositional
//!    definition of the query.
//! 3. [`compiler::compile`] expands that definition into a decision circuit
//!    with deterministic sums and decomposable products.
//! 4. [`semiring`] evaluates the circuit, either for the probability alone or
//!    for the probability together with its gradient over every learnable
//!    quantity.
//!
//! [`learning`] closes the loop: it routes circuit gradients to the
//! probabilistic parameters and, through backpropagation, to the networks in
//! [`neural`]. [`oracle`] enumerates possible worlds and serves as an
//! independent reference for small programs.
//!
//! The crate is `no_std` with `alloc`; IO and data formats live in the
//! companion `neurlog` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod compiler;
pub mod grounder;
mod hash;
pub mod learning;
pub mod neural;
pub mod oracle;
pub mod semiring;
pub mod syntax;

pub use hash::StableHasher;

use thiserror::Error;

/// Any error raised along the inference and learning pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] syntax::ParseError),
    #[error(transparent)]
    Ground(#[from] grounder::GroundError),
    #[error(transparent)]
    Compile(#[from] compiler::CompileError),
    #[error(transparent)]
    Label(#[from] semiring::LabelError),
    #[error(transparent)]
    Neural(#[from] neural::NeuralError),
    #[error(transparent)]
    Learning(#[from] learning::LearningError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
}
