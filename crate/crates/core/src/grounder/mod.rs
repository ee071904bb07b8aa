//! Query-directed grounding by tabled SLD resolution.
//!
//! [`ground_query`] resolves a query against a [`Program`] and returns the
//! part of the ground program the query depends on: ground rules, instances
//! of probabilistic facts, instances of annotated disjunctions and instances
//! of neural annotations.

mod engine;
mod store;
mod subst;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

pub use subst::{apply, unify, Substitution};

use crate::syntax::{print_term, Atom, ProbLabel, Program, Symbol, Term};


/// Index into [`GroundProgram::atoms`].
pub type AtomId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroundLiteral {
    pub atom: AtomId,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundRule {
    pub head: AtomId,
    pub body: Vec<GroundLiteral>,
}

/// A ground instance of a probabilistic fact.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundFact {
    pub label: ProbLabel,
    pub atom: AtomId,
}

/// A ground instance of an annotated disjunction. `heads` lists every head
/// of the instance; `relevant` the indices of those the query depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundAd {
    pub heads: Vec<(ProbLabel, AtomId)>,
    pub relevant: Vec<usize>,
    pub body: Vec<GroundLiteral>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NeuralKind {
    /// One head per domain value; `relevant` as for [`GroundAd`].
    Ad {
        domain: Vec<Term>,
        heads: Vec<AtomId>,
        relevant: Vec<usize>,
    },
    /// A single head whose probability is the network's scalar output.
    Fact { atom: AtomId },
}

/// A neural annotation applied to concrete inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundNeural {
    pub model: Symbol,
    pub inputs: Vec<Term>,
    pub kind: NeuralKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundProgram {
    pub atoms: Vec<Atom>,
    /// Ground instances of the queried atoms.
    pub queries: Vec<AtomId>,
    pub rules: Vec<GroundRule>,
    pub facts: Vec<GroundFact>,
    pub ads: Vec<GroundAd>,
    pub neural: Vec<GroundNeural>,
}

impl GroundProgram {
    pub fn atom(&self, id: AtomId) -> &Atom {
        &self.atoms[id as usize]
    }

    pub fn find_atom(&self, atom: &Atom) -> Option<AtomId> {
        self.atoms.iter().position(|a| a == atom).map(|i| i as AtomId)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty() && self.facts.is_empty() && self.ads.is_empty() && self.neural.is_empty()
    }

    fn write_body(&self, f: &mut fmt::Formatter<'_>, body: &[GroundLiteral]) -> fmt::Result {
        for (i, l) in body.iter().enumerate() {
            f.write_str(if i == 0 { " :- " } else { ", " })?;
            if !l.positive {
                f.write_str("\\+")?;
            }
            write!(f, "{}", self.atom(l.atom))?;
        }
        Ok(())
    }
}

fn write_label(f: &mut fmt::Formatter<'_>, l: &ProbLabel) -> fmt::Result {
    match l {
        ProbLabel::Fixed(p) => write!(f, "{p}"),
        ProbLabel::Learnable { init, .. } => write!(f, "t({init})"),
    }
}

/// Surface syntax, one clause per line. Disjunctions show their relevant
/// heads only.
impl fmt::Display for GroundProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.neural {
            let inputs = print_term(&Term::list(n.inputs.clone()));
            match &n.kind {
                NeuralKind::Ad {
                    domain,
                    heads,
                    relevant,
                } => {
                    for (i, &k) in relevant.iter().enumerate() {
                        if i > 0 {
                            f.write_str(" ; ")?;
                        }
                        write!(
                            f,
                            "nn({},{},{})::{}",
                            n.model,
                            inputs,
                            domain[k],
                            self.atom(heads[k])
                        )?;
                    }
                    f.write_str(".\n")?;
                }
                NeuralKind::Fact { atom } => {
                    writeln!(f, "nn({},{})::{}.", n.model, inputs, self.atom(*atom))?;
                }
            }
        }
        for fact in &self.facts {
            write_label(f, &fact.label)?;
            writeln!(f, "::{}.", self.atom(fact.atom))?;
        }
        for ad in &self.ads {
            for (i, &k) in ad.relevant.iter().enumerate() {
                if i > 0 {
                    f.write_str(" ; ")?;
                }
                write_label(f, &ad.heads[k].0)?;
                write!(f, "::{}", self.atom(ad.heads[k].1))?;
            }
            self.write_body(f, &ad.body)?;
            f.write_str(".\n")?;
        }
        for r in &self.rules {
            write!(f, "{}", self.atom(r.head))?;
            self.write_body(f, &r.body)?;
            f.write_str(".\n")?;
        }
        for &q in &self.queries {
            writeln!(f, "query({}).", self.atom(q))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroundOptions {
    /// Maximum number of resolution steps (clause head unifications).
    pub max_steps: u64,
    /// Maximum nesting of tabled calls.
    pub max_depth: usize,
    /// Drop certainly true literals and certainly false branches.
    pub simplify: bool,
    /// Keep only the clauses the queries depend on.
    pub prune: bool,
}

impl Default for GroundOptions {
    fn default() -> Self {
        GroundOptions {
            max_steps: 100_000,
            max_depth: 1_000,
            simplify: true,
            prune: true,
        }
    }
}

impl GroundOptions {
    /// Everything derivable from the query's calls, unsimplified. Used by
    /// the world-enumeration oracle.
    pub fn full() -> Self {
        GroundOptions {
            simplify: false,
            prune: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroundError {
    #[error("arithmetic on unbound variables in {goal}")]
    UnboundArithmetic { goal: String },
    #[error("invalid arithmetic in {goal}: {detail}")]
    BadArithmetic { goal: String, detail: String },
    #[error("negation of non-ground goal {goal}")]
    NonGroundNegation { goal: String },
    #[error("derived atom {atom} is not ground")]
    NonGroundAnswer { atom: String },
    #[error("neural inputs of {atom} are not ground")]
    UnboundNeuralInput { atom: String },
    #[error("resolution exceeded the limit of {limit} {what}")]
    DepthLimitExceeded { limit: u64, what: &'static str },
    #[error("ground program is cyclic through {atom}")]
    CyclicGroundProgram { atom: String },
}

/// Grounds `query` with default options.
pub fn ground_query(program: &Program, query: &Atom) -> Result<GroundProgram, GroundError> {
    ground_queries(program, core::slice::from_ref(query), &GroundOptions::default())
}

/// Grounds several queries into one ground program; `queries` of the
/// result lists the ground instances of all of them.
pub fn ground_queries(
    program: &Program,
    queries: &[Atom],
    options: &GroundOptions,
) -> Result<GroundProgram, GroundError> {
    engine::ground(program, queries, options)
}

#[cfg(test)]
mod tests;
