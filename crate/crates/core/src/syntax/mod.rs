//! Surface language: terms, clauses, annotations and the program container.

mod lexer;
mod parser;
mod print;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

pub use parser::{parse_atom, parse_program, parse_term};
pub use print::print_term;

/// Interned-by-sharing name of a constant, functor, predicate or variable.
pub type Symbol = Arc<str>;

pub fn sym(s: &str) -> Symbol {
    Arc::from(s)
}

/// Functor of a list cell.
pub const CONS: &str = ".";
/// The empty list.
pub const NIL: &str = "[]";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Atom(Symbol),
    Int(i64),
    Var(Symbol),
    Compound(Symbol, Vec<Term>),
}

impl Term {
    pub fn atom(name: &str) -> Self {
        Term::Atom(sym(name))
    }

    pub fn var(name: &str) -> Self {
        Term::Var(sym(name))
    }

    pub fn compound(functor: &str, args: Vec<Term>) -> Self {
        if args.is_empty() {
            Term::atom(functor)
        } else {
            Term::Compound(sym(functor), args)
        }
    }

    pub fn nil() -> Self {
        Term::atom(NIL)
    }

    pub fn cons(head: Term, tail: Term) -> Self {
        Term::Compound(sym(CONS), alloc::vec![head, tail])
    }

    /// Builds `[a, b, ...| tail]`.
    pub fn list_with_tail(items: Vec<Term>, tail: Term) -> Self {
        items
            .into_iter()
            .rev()
            .fold(tail, |acc, item| Term::cons(item, acc))
    }

    pub fn list(items: Vec<Term>) -> Self {
        Self::list_with_tail(items, Term::nil())
    }

    pub fn is_ground(&self) -> bool {
        match self {
            Term::Var(_) => false,
            Term::Atom(_) | Term::Int(_) => true,
            Term::Compound(_, args) => args.iter().all(Term::is_ground),
        }
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, Term::Atom(a) if &**a == NIL)
    }

    /// Splits a list term into its items and the final tail.
    pub fn list_parts(&self) -> Option<(Vec<&Term>, &Term)> {
        let mut items = Vec::new();
        let mut cur = self;
        while let Term::Compound(f, args) = cur {
            if &**f != CONS || args.len() != 2 {
                break;
            }
            items.push(&args[0]);
            cur = &args[1];
        }
        if items.is_empty() {
            None
        } else {
            Some((items, cur))
        }
    }

    /// Items of a proper, nil-terminated list (the empty list included).
    pub fn as_list(&self) -> Option<Vec<&Term>> {
        if self.is_nil() {
            return Some(Vec::new());
        }
        let (items, tail) = self.list_parts()?;
        tail.is_nil().then_some(items)
    }

    /// Pushes every variable name in depth-first order, duplicates included.
    pub fn collect_vars<'a>(&'a self, out: &mut Vec<&'a Symbol>) {
        match self {
            Term::Var(v) => out.push(v),
            Term::Compound(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
            _ => {}
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_term(self))
    }
}

/// Predicate name and arity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredKey {
    pub name: Symbol,
    pub arity: usize,
}

impl fmt::Display for PredKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.arity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub predicate: Symbol,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(predicate: &str, args: Vec<Term>) -> Self {
        Atom {
            predicate: sym(predicate),
            args,
        }
    }

    pub fn key(&self) -> PredKey {
        PredKey {
            name: self.predicate.clone(),
            arity: self.args.len(),
        }
    }

    pub fn to_term(&self) -> Term {
        if self.args.is_empty() {
            Term::Atom(self.predicate.clone())
        } else {
            Term::Compound(self.predicate.clone(), self.args.clone())
        }
    }

    /// Reads a callable term (constant or compound) as an atom.
    pub fn from_term(t: &Term) -> Option<Self> {
        match t {
            Term::Atom(name) => Some(Atom {
                predicate: name.clone(),
                args: Vec::new(),
            }),
            Term::Compound(name, args) => Some(Atom {
                predicate: name.clone(),
                args: args.clone(),
            }),
            _ => None,
        }
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(Term::is_ground)
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_term(&self.to_term()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    pub atom: Atom,
    pub positive: bool,
}

impl Literal {
    pub fn pos(atom: Atom) -> Self {
        Literal {
            atom,
            positive: true,
        }
    }

    pub fn neg(atom: Atom) -> Self {
        Literal {
            atom,
            positive: false,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.positive {
            f.write_str("\\+")?;
        }
        write!(f, "{}", self.atom)
    }
}

/// 1-based source position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Literal>,
    pub location: Location,
}

/// Index of a learnable probability in the program's parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbLabel {
    Fixed(f64),
    /// `t(p)`: a probability adjusted by training, starting at `init`.
    Learnable { param: ParamId, init: f64 },
}

impl ProbLabel {
    pub fn initial(&self) -> f64 {
        match *self {
            ProbLabel::Fixed(p) => p,
            ProbLabel::Learnable { init, .. } => init,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticFact {
    pub label: ProbLabel,
    pub atom: Atom,
    pub location: Location,
}

/// `p1::h1 ; ... ; pn::hn :- body.` At most one head is chosen per ground
/// instance; with probability `1 - sum(p)` none is.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedDisjunction {
    pub heads: Vec<(ProbLabel, Atom)>,
    pub body: Vec<Literal>,
    pub location: Location,
}

/// `nn(model, Inputs, Output, Domain) :: pred(...)` or, without output and
/// domain, the neural fact form `nn(model, Inputs) :: pred(...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralAnnotation {
    pub model: Symbol,
    pub inputs: Vec<Term>,
    pub output: Option<Term>,
    pub domain: Option<Vec<Term>>,
    pub atom: Atom,
    pub location: Location,
}

impl NeuralAnnotation {
    pub fn is_fact(&self) -> bool {
        self.domain.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub atom: Atom,
    pub value: bool,
}

/// A learnable probability declared by the program.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub init: f64,
    /// Index into [`Program::param_groups`] when the parameter belongs to an
    /// annotated disjunction.
    pub group: Option<usize>,
    /// Ground head the parameter annotates, for reporting.
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub rules: Vec<Rule>,
    pub facts: Vec<ProbabilisticFact>,
    pub ads: Vec<AnnotatedDisjunction>,
    pub neural: Vec<NeuralAnnotation>,
    pub queries: Vec<Atom>,
    pub evidence: Vec<Evidence>,
    pub params: Vec<ParamInfo>,
    /// Parameters of each learnable annotated disjunction; they sum to one.
    pub param_groups: Vec<Vec<ParamId>>,
}

impl Program {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
            && self.facts.is_empty()
            && self.ads.is_empty()
            && self.neural.is_empty()
            && self.queries.is_empty()
            && self.evidence.is_empty()
    }

    /// Stable fingerprint of the program's content, used in circuit cache
    /// keys.
    pub fn fingerprint(&self) -> u64 {
        crate::hash::StableHasher::hash_bytes(print::print_program(self).as_bytes())
    }

    pub fn to_source(&self) -> String {
        print::print_program(self)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{location}: syntax error: expected {expected}, found {found}")]
    Syntax {
        location: Location,
        expected: String,
        found: String,
    },
    #[error("{location}: arity clash: {detail}")]
    ArityClash { location: Location, detail: String },
    #[error("{location}: probability {value} outside [0, 1]")]
    ProbOutOfRange { location: Location, value: f64 },
    #[error("{location}: {predicate} is defined both by a neural annotation and by other clauses")]
    NeuralRedefinition {
        location: Location,
        predicate: String,
    },
    #[error("{location}: invalid neural annotation: {detail}")]
    BadNeuralAnnotation { location: Location, detail: String },
}

impl ParseError {
    pub fn location(&self) -> Location {
        match self {
            ParseError::Syntax { location, .. }
            | ParseError::ArityClash { location, .. }
            | ParseError::ProbOutOfRange { location, .. }
            | ParseError::NeuralRedefinition { location, .. }
            | ParseError::BadNeuralAnnotation { location, .. } => *location,
        }
    }
}
