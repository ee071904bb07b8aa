//! Knowledge compilation.
//!
//! [`complete`] rewrites a ground program into a [`Formula`] over choice
//! variables, one variable per probabilistic fact, annotated disjunction
//! and neural annotation instance. [`compile`] expands the formula into a
//! [`Circuit`] by multi-valued Shannon expansion: every decision node
//! branches on all values of one variable, and conjunctions whose parts
//! share no variable become product nodes. Sums are deterministic and
//! products decomposable, so the circuit can be evaluated in any
//! commutative semiring in one bottom-up pass.

mod cache;
mod circuit;
mod formula;
mod shannon;

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub use cache::{abstract_query, instantiate, placeholder, CacheKey, CacheStats, CircuitCache};
pub use circuit::{Circuit, Node, NodeId, FALSE_NODE, TRUE_NODE};
pub use formula::{complete, FId, FNode, Formula};
pub use shannon::compile;

use crate::syntax::{ProbLabel, Symbol, Term};

/// Index into the variable table of a formula or circuit.
pub type VarId = u32;

/// Where the weight of one value of a choice variable comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum LeafSource {
    Prob(ProbLabel),
    /// Output `output` of `model` applied to `inputs`; `None` for the
    /// scalar output of a neural fact.
    Neural {
        model: Symbol,
        inputs: Vec<Term>,
        output: Option<usize>,
    },
    /// One minus the sum of the listed weights.
    Residual(Vec<LeafSource>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChoiceKind {
    /// Probabilistic fact: value 0 is true, value 1 false.
    Fact,
    /// Annotated disjunction: one value per relevant head, then the
    /// residual value if any.
    Ad,
    /// Neural annotated disjunction, always with a residual value.
    NeuralAd,
    /// Neural fact: value 0 is true, value 1 false.
    NeuralFact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceValue {
    /// Ground atom made true by this value, if any.
    pub atom: Option<crate::grounder::AtomId>,
    pub source: LeafSource,
}

/// A set of mutually exclusive, exhaustive alternatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceVariable {
    pub kind: ChoiceKind,
    pub values: Vec<ChoiceValue>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarOrder {
    /// Variables with the most occurrences in the formula first.
    #[default]
    MostOccurring,
    /// Variables in order of first appearance in a depth-first walk.
    FirstAppearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompileOptions {
    pub order: VarOrder,
    /// Maximum number of circuit nodes.
    pub max_nodes: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            order: VarOrder::MostOccurring,
            max_nodes: 10_000_000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("ground program is cyclic through {atom}")]
    CyclicGroundProgram { atom: String },
    #[error("circuit exceeds the budget of {limit} nodes")]
    BlowupLimit { limit: usize },
}

#[cfg(test)]
mod tests;
