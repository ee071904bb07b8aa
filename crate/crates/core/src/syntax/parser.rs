use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::lexer::{describe, tokenize, Tok, Token};
use super::*;

/// Tolerance on the sum of fixed head probabilities of a disjunction.
const AD_SUM_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Assoc {
    Xfx,
    Yfx,
}

fn infix(op: &str) -> Option<(u32, Assoc)> {
    Some(match op {
        "is" | "=:=" | "=\\=" | "<" | ">" | "=<" | ">=" | "=" | "\\=" | "==" => (700, Assoc::Xfx),
        "+" | "-" => (500, Assoc::Yfx),
        "*" | "/" | "//" | "mod" => (400, Assoc::Yfx),
        _ => return None,
    })
}

pub(crate) fn is_infix(op: &str) -> bool {
    infix(op).is_some()
}

pub(crate) fn infix_priority(op: &str) -> Option<u32> {
    infix(op).map(|(p, _)| p)
}

enum Label {
    Prob(ProbLabel),
    Neural {
        model: Symbol,
        inputs: Vec<Term>,
        output: Option<Term>,
        domain: Option<Vec<Term>>,
    },
}

enum Goal {
    Lit(Literal),
    /// `\+ (g1, ..., gn)` with more than one conjunct.
    NotConj(Vec<Goal>),
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    program: Program,
    aux_counter: usize,
}

type PResult<T> = Result<T, ParseError>;

/// Parses program text into a validated [`Program`].
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        toks: tokenize(source)?,
        pos: 0,
        program: Program::default(),
        aux_counter: 0,
    };
    while p.peek().tok != Tok::Eof {
        p.statement()?;
    }
    validate(&mut p.program)?;
    Ok(p.program)
}

/// Parses a single term such as `f(X, [1,2])`.
pub fn parse_term(source: &str) -> Result<Term, ParseError> {
    let mut p = Parser {
        toks: tokenize(source)?,
        pos: 0,
        program: Program::default(),
        aux_counter: 0,
    };
    let t = p.term(1200)?;
    if p.peek().tok == Tok::End {
        p.pos += 1;
    }
    p.expect_eof()?;
    Ok(t)
}

/// Parses a single callable term as an atom.
pub fn parse_atom(source: &str) -> Result<Atom, ParseError> {
    let t = parse_term(source)?;
    Atom::from_term(&t).ok_or_else(|| ParseError::Syntax {
        location: Location { line: 1, column: 1 },
        expected: "callable term".into(),
        found: print_term(&t),
    })
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, off: usize) -> &Token {
        let i = (self.pos + off).min(self.toks.len() - 1);
        &self.toks[i]
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        let t = self.peek();
        ParseError::Syntax {
            location: t.loc,
            expected: expected.into(),
            found: describe(&t.tok),
        }
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek().tok, Tok::Sym(x) if x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.error(&format!("'{s}'")))
        }
    }

    fn expect_end(&mut self) -> PResult<()> {
        if self.peek().tok == Tok::End {
            self.advance();
            Ok(())
        } else {
            Err(self.error("'.'"))
        }
    }

    fn expect_eof(&self) -> PResult<()> {
        if self.peek().tok == Tok::Eof {
            Ok(())
        } else {
            Err(self.error("end of input"))
        }
    }

    /// Name token that acts as an infix operator at the current position.
    fn infix_here(&self) -> Option<(&'static str, u32, Assoc)> {
        let t = self.peek();
        let op: &'static str = match &t.tok {
            Tok::Sym(s) => s,
            Tok::Name {
                text,
                quoted: false,
            } if !t.call => match text.as_str() {
                "is" => "is",
                "mod" => "mod",
                _ => return None,
            },
            _ => return None,
        };
        infix(op).map(|(p, a)| (op, p, a))
    }

    // ---- terms -----------------------------------------------------------

    fn term(&mut self, max_prec: u32) -> PResult<Term> {
        let mut left = self.primary()?;
        let mut left_prec = 0;
        while let Some((op, prec, assoc)) = self.infix_here() {
            if prec > max_prec {
                break;
            }
            let left_max = match assoc {
                Assoc::Xfx => prec - 1,
                Assoc::Yfx => prec,
            };
            if left_prec > left_max {
                break;
            }
            self.advance();
            let right = self.term(prec - 1)?;
            left = Term::Compound(sym(op), vec![left, right]);
            left_prec = prec;
        }
        Ok(left)
    }

    fn args(&mut self) -> PResult<Vec<Term>> {
        self.expect_sym("(")?;
        let mut args = vec![self.term(999)?];
        while self.eat_sym(",") {
            args.push(self.term(999)?);
        }
        self.expect_sym(")")?;
        Ok(args)
    }

    fn primary(&mut self) -> PResult<Term> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(i) => {
                self.advance();
                Ok(Term::Int(i))
            }
            Tok::Float(_) => Err(self.error("term (floats are only allowed as probabilities)")),
            Tok::Var(v) => {
                self.advance();
                Ok(Term::Var(sym(&v)))
            }
            Tok::Name { text, .. } => {
                self.advance();
                if t.call {
                    Ok(Term::Compound(sym(&text), self.args()?))
                } else {
                    Ok(Term::Atom(sym(&text)))
                }
            }
            Tok::Sym("-") if !t.call => {
                self.advance();
                if let Tok::Int(i) = self.peek().tok {
                    self.advance();
                    return Ok(Term::Int(-i));
                }
                let arg = self.term(200)?;
                Ok(Term::Compound(sym("-"), vec![arg]))
            }
            Tok::Sym(s) if t.call && s != "(" && s != "[" => {
                self.advance();
                Ok(Term::Compound(sym(s), self.args()?))
            }
            Tok::Sym("(") => {
                self.advance();
                let inner = self.term(1200)?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Tok::Sym("[") => self.list(),
            _ => Err(self.error("term")),
        }
    }

    fn list(&mut self) -> PResult<Term> {
        self.expect_sym("[")?;
        if self.eat_sym("]") {
            return Ok(Term::nil());
        }
        let mut items = vec![self.term(999)?];
        let mut tail = Term::nil();
        loop {
            if self.is_sym("..") || self.is_sym("...") {
                // [a .. b]
                self.advance();
                let hi = self.term(999)?;
                self.expand_range(&mut items, hi)?;
                continue;
            }
            if self.is_sym(",") && matches!(self.peek_at(1).tok, Tok::Sym("..."))
                && matches!(self.peek_at(2).tok, Tok::Sym(","))
            {
                // [a, ..., b]
                self.advance();
                self.advance();
                self.advance();
                let hi = self.term(999)?;
                self.expand_range(&mut items, hi)?;
                continue;
            }
            if self.eat_sym(",") {
                items.push(self.term(999)?);
                continue;
            }
            if self.eat_sym("|") {
                tail = self.term(999)?;
            }
            break;
        }
        self.expect_sym("]")?;
        Ok(Term::list_with_tail(items, tail))
    }

    fn expand_range(&mut self, items: &mut Vec<Term>, hi: Term) -> PResult<()> {
        let loc = self.peek().loc;
        let (Some(Term::Int(lo)), Term::Int(hi)) = (items.last(), hi.clone()) else {
            return Err(ParseError::Syntax {
                location: loc,
                expected: "integer range bounds".into(),
                found: print_term(&hi),
            });
        };
        if hi < *lo {
            return Err(ParseError::Syntax {
                location: loc,
                expected: "ascending integer range".into(),
                found: format!("{lo}..{hi}"),
            });
        }
        let lo = *lo;
        items.extend((lo + 1..=hi).map(Term::Int));
        Ok(())
    }

    // ---- labels ----------------------------------------------------------

    /// Index just past the parenthesis matching the one at `self.pos + 1`.
    fn matching_paren_end(&self) -> Option<usize> {
        let mut depth = 0usize;
        let mut i = self.pos + 1;
        while i < self.toks.len() {
            match self.toks[i].tok {
                Tok::Sym("(") => depth += 1,
                Tok::Sym(")") => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i + 1);
                    }
                }
                Tok::End | Tok::Eof => return None,
                _ => {}
            }
            i += 1;
        }
        None
    }

    fn label_ahead(&self) -> bool {
        let t = self.peek();
        match &t.tok {
            Tok::Int(_) | Tok::Float(_) => true,
            Tok::Sym("(") => true,
            Tok::Name { text, quoted: false } if t.call && (text == "t" || text == "nn") => self
                .matching_paren_end()
                .is_some_and(|end| matches!(self.toks[end].tok, Tok::Sym("::"))),
            _ => false,
        }
    }

    fn number_expr(&mut self) -> PResult<f64> {
        let mut acc = self.number_term()?;
        loop {
            if self.eat_sym("+") {
                acc += self.number_term()?;
            } else if self.eat_sym("-") {
                acc -= self.number_term()?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn number_term(&mut self) -> PResult<f64> {
        let mut acc = self.number_factor()?;
        loop {
            if self.eat_sym("*") {
                acc *= self.number_factor()?;
            } else if self.eat_sym("/") {
                let d = self.number_factor()?;
                if d == 0.0 {
                    return Err(self.error("non-zero divisor"));
                }
                acc /= d;
            } else {
                return Ok(acc);
            }
        }
    }

    fn number_factor(&mut self) -> PResult<f64> {
        match self.peek().tok {
            Tok::Int(i) => {
                self.advance();
                Ok(i as f64)
            }
            Tok::Float(x) => {
                self.advance();
                Ok(x)
            }
            Tok::Sym("-") => {
                self.advance();
                Ok(-self.number_factor()?)
            }
            Tok::Sym("(") => {
                self.advance();
                let v = self.number_expr()?;
                self.expect_sym(")")?;
                Ok(v)
            }
            _ => Err(self.error("numeric probability")),
        }
    }

    fn check_prob(&self, value: f64, loc: Location) -> PResult<f64> {
        if (0.0..=1.0).contains(&value) {
            Ok(value)
        } else {
            Err(ParseError::ProbOutOfRange {
                location: loc,
                value,
            })
        }
    }

    fn label(&mut self) -> PResult<Label> {
        let loc = self.peek().loc;
        let t = self.peek().clone();
        let label = match &t.tok {
            Tok::Name { text, .. } if text == "t" => {
                self.advance();
                self.expect_sym("(")?;
                let init = self.number_expr()?;
                self.expect_sym(")")?;
                let init = self.check_prob(init, loc)?;
                let param = ParamId(self.program.params.len() as u32);
                self.program.params.push(ParamInfo {
                    init,
                    group: None,
                    name: String::new(),
                });
                Label::Prob(ProbLabel::Learnable { param, init })
            }
            Tok::Name { text, .. } if text == "nn" => {
                self.advance();
                self.expect_sym("(")?;
                let model = match self.advance().tok {
                    Tok::Name { text, .. } => sym(&text),
                    other => {
                        return Err(ParseError::Syntax {
                            location: loc,
                            expected: "model name".into(),
                            found: describe(&other),
                        })
                    }
                };
                self.expect_sym(",")?;
                let inputs_loc = self.peek().loc;
                let inputs_term = self.term(999)?;
                let inputs: Vec<Term> = inputs_term
                    .as_list()
                    .ok_or_else(|| ParseError::Syntax {
                        location: inputs_loc,
                        expected: "list of network inputs".into(),
                        found: print_term(&inputs_term),
                    })?
                    .into_iter()
                    .cloned()
                    .collect();
                let (output, domain) = if self.eat_sym(",") {
                    let output = self.term(999)?;
                    self.expect_sym(",")?;
                    let dom_loc = self.peek().loc;
                    let dom_term = self.term(999)?;
                    let domain: Vec<Term> = dom_term
                        .as_list()
                        .ok_or_else(|| ParseError::Syntax {
                            location: dom_loc,
                            expected: "list of output values".into(),
                            found: print_term(&dom_term),
                        })?
                        .into_iter()
                        .cloned()
                        .collect();
                    (Some(output), Some(domain))
                } else {
                    (None, None)
                };
                self.expect_sym(")")?;
                Label::Neural {
                    model,
                    inputs,
                    output,
                    domain,
                }
            }
            _ => {
                let p = self.number_expr()?;
                Label::Prob(ProbLabel::Fixed(self.check_prob(p, loc)?))
            }
        };
        if !self.eat_sym("::") {
            return Err(self.error("'::'"));
        }
        Ok(label)
    }

    // ---- clauses ---------------------------------------------------------

    fn head_atom(&mut self) -> PResult<Atom> {
        let loc = self.peek().loc;
        let t = self.term(999)?;
        if self.is_sym("::") {
            return Err(ParseError::Syntax {
                location: loc,
                expected: "numeric probability, t(p) or nn(...)".into(),
                found: print_term(&t),
            });
        }
        match &t {
            Term::Atom(_) | Term::Compound(..) => Ok(Atom::from_term(&t).unwrap()),
            _ => Err(ParseError::Syntax {
                location: loc,
                expected: "clause head".into(),
                found: print_term(&t),
            }),
        }
    }

    fn goal(&mut self) -> PResult<Goal> {
        if self.eat_sym("\\+") {
            if self.is_sym("(") {
                self.advance();
                let mut goals = self.conjunction()?;
                self.expect_sym(")")?;
                if goals.len() == 1 {
                    return Ok(match goals.pop().unwrap() {
                        Goal::Lit(l) => Goal::Lit(Literal {
                            atom: l.atom,
                            positive: !l.positive,
                        }),
                        Goal::NotConj(inner) => Goal::NotConj(inner),
                    });
                }
                return Ok(Goal::NotConj(goals));
            }
            return match self.goal()? {
                Goal::Lit(l) => Ok(Goal::Lit(Literal {
                    atom: l.atom,
                    positive: !l.positive,
                })),
                g => Ok(Goal::NotConj(vec![g])),
            };
        }
        let loc = self.peek().loc;
        let t = self.term(999)?;
        Atom::from_term(&t)
            .map(|a| Goal::Lit(Literal::pos(a)))
            .ok_or_else(|| ParseError::Syntax {
                location: loc,
                expected: "callable goal".into(),
                found: print_term(&t),
            })
    }

    fn conjunction(&mut self) -> PResult<Vec<Goal>> {
        let mut goals = vec![self.goal()?];
        while self.eat_sym(",") {
            goals.push(self.goal()?);
        }
        Ok(goals)
    }

    fn statement(&mut self) -> PResult<()> {
        let location = self.peek().loc;
        if let Some(done) = self.directive()? {
            return Ok(done);
        }
        let mut heads: Vec<(Option<Label>, Atom, Location)> = Vec::new();
        loop {
            let loc = self.peek().loc;
            let label = if self.label_ahead() {
                Some(self.label()?)
            } else {
                None
            };
            let atom = self.head_atom()?;
            heads.push((label, atom, loc));
            if !self.eat_sym(";") {
                break;
            }
        }
        let mut body_goals = Vec::new();
        if self.eat_sym(":-") {
            body_goals = self.conjunction()?;
        }
        self.expect_end()?;

        let mut context_vars: Vec<Symbol> = Vec::new();
        for (label, atom, _) in &heads {
            collect_atom_vars(atom, &mut context_vars);
            if let Some(Label::Neural {
                inputs, output, ..
            }) = label
            {
                for t in inputs.iter().chain(output.iter()) {
                    let mut vs = Vec::new();
                    t.collect_vars(&mut vs);
                    context_vars.extend(vs.into_iter().cloned());
                }
            }
        }
        let body = self.lower_body(body_goals, &context_vars, location)?;

        if heads.len() == 1 && heads[0].0.is_none() {
            let (_, head, _) = heads.pop().unwrap();
            self.program.rules.push(Rule {
                head,
                body,
                location,
            });
            return Ok(());
        }
        if heads.iter().any(|h| h.0.is_none()) {
            return Err(ParseError::Syntax {
                location,
                expected: "probability label on every disjunct".into(),
                found: "unlabeled head".into(),
            });
        }
        if heads.len() == 1 {
            let (label, atom, loc) = heads.pop().unwrap();
            match label.unwrap() {
                Label::Neural {
                    model,
                    inputs,
                    output,
                    domain,
                } => {
                    if !body.is_empty() {
                        return Err(ParseError::BadNeuralAnnotation {
                            location: loc,
                            detail: "neural annotations cannot have a body".into(),
                        });
                    }
                    self.program.neural.push(NeuralAnnotation {
                        model,
                        inputs,
                        output,
                        domain,
                        atom,
                        location: loc,
                    });
                }
                Label::Prob(label) if body.is_empty() => {
                    self.program.facts.push(ProbabilisticFact {
                        label,
                        atom,
                        location: loc,
                    });
                }
                Label::Prob(label) => {
                    self.program.ads.push(AnnotatedDisjunction {
                        heads: vec![(label, atom)],
                        body,
                        location,
                    });
                }
            }
            return Ok(());
        }
        let mut ad_heads = Vec::with_capacity(heads.len());
        for (label, atom, loc) in heads {
            match label.unwrap() {
                Label::Prob(l) => ad_heads.push((l, atom)),
                Label::Neural { .. } => {
                    return Err(ParseError::BadNeuralAnnotation {
                        location: loc,
                        detail: "neural labels cannot appear inside a disjunction".into(),
                    })
                }
            }
        }
        self.program.ads.push(AnnotatedDisjunction {
            heads: ad_heads,
            body,
            location,
        });
        Ok(())
    }

    /// `query(A).` and `evidence(A, true|false).`
    fn directive(&mut self) -> PResult<Option<()>> {
        let t = self.peek();
        let Tok::Name { text, quoted: false } = &t.tok else {
            return Ok(None);
        };
        if !t.call || (text != "query" && text != "evidence") {
            return Ok(None);
        }
        let is_query = text == "query";
        let Some(end) = self.matching_paren_end() else {
            return Ok(None);
        };
        if self.toks[end].tok != Tok::End {
            return Ok(None);
        }
        let loc = t.loc;
        self.advance();
        let args = self.args()?;
        self.expect_end()?;
        let bad = |found: String| ParseError::Syntax {
            location: loc,
            expected: "query(Atom) or evidence(Atom, true|false)".into(),
            found,
        };
        let atom = Atom::from_term(&args[0]).ok_or_else(|| bad(print_term(&args[0])))?;
        if is_query {
            if args.len() != 1 {
                return Err(bad(format!("{} arguments", args.len())));
            }
            self.program.queries.push(atom);
        } else {
            let value = match args.get(1) {
                None => true,
                Some(Term::Atom(a)) if &**a == "true" => true,
                Some(Term::Atom(a)) if &**a == "false" => false,
                Some(other) => return Err(bad(print_term(other))),
            };
            if args.len() > 2 {
                return Err(bad(format!("{} arguments", args.len())));
            }
            self.program.evidence.push(Evidence { atom, value });
        }
        Ok(Some(()))
    }

    /// Replaces negated conjunctions by negations of fresh auxiliary atoms.
    /// The auxiliary predicate's arguments are the conjunction's variables
    /// that also occur elsewhere in the clause; the rest are local to it.
    fn lower_body(
        &mut self,
        goals: Vec<Goal>,
        head_vars: &[Symbol],
        location: Location,
    ) -> PResult<Vec<Literal>> {
        let mut occurrences: Vec<Vec<Symbol>> = Vec::with_capacity(goals.len());
        for g in &goals {
            let mut vs = Vec::new();
            goal_vars(g, &mut vs);
            occurrences.push(vs);
        }
        let mut body = Vec::with_capacity(goals.len());
        for (i, g) in goals.into_iter().enumerate() {
            match g {
                Goal::Lit(l) => body.push(l),
                Goal::NotConj(inner) => {
                    let outside: BTreeSet<&Symbol> = head_vars
                        .iter()
                        .chain(
                            occurrences
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != i)
                                .flat_map(|(_, vs)| vs.iter()),
                        )
                        .filter(|v| &***v != "_")
                        .collect();
                    let mut shared: Vec<Symbol> = Vec::new();
                    for v in &occurrences[i] {
                        if outside.contains(v) && !shared.contains(v) {
                            shared.push(v.clone());
                        }
                    }
                    self.aux_counter += 1;
                    let name = format!("$not{}", self.aux_counter);
                    let head = Atom {
                        predicate: sym(&name),
                        args: shared.iter().map(|v| Term::Var(v.clone())).collect(),
                    };
                    let inner_body = self.lower_body(inner, &shared, location)?;
                    self.program.rules.push(Rule {
                        head: head.clone(),
                        body: inner_body,
                        location,
                    });
                    body.push(Literal::neg(head));
                }
            }
        }
        Ok(body)
    }
}

fn collect_atom_vars(atom: &Atom, out: &mut Vec<Symbol>) {
    let mut vs = Vec::new();
    atom.args.iter().for_each(|a| a.collect_vars(&mut vs));
    out.extend(vs.into_iter().cloned());
}

fn goal_vars(g: &Goal, out: &mut Vec<Symbol>) {
    match g {
        Goal::Lit(l) => collect_atom_vars(&l.atom, out),
        Goal::NotConj(gs) => gs.iter().for_each(|g| goal_vars(g, out)),
    }
}

fn validate(p: &mut Program) -> PResult<()> {
    // Neural predicates must not be defined elsewhere.
    let mut neural_preds: BTreeMap<PredKey, Location> = BTreeMap::new();
    let mut models: BTreeMap<Symbol, (usize, Option<usize>, Location)> = BTreeMap::new();
    for n in &p.neural {
        let expected_arity = n.inputs.len() + usize::from(n.output.is_some());
        if n.atom.args.len() != expected_arity {
            return Err(ParseError::ArityClash {
                location: n.location,
                detail: format!(
                    "{} has {} arguments but the annotation declares {} inputs{}",
                    n.atom.key(),
                    n.atom.args.len(),
                    n.inputs.len(),
                    if n.output.is_some() { " and an output" } else { "" }
                ),
            });
        }
        if let Some(domain) = &n.domain {
            if domain.is_empty() {
                return Err(ParseError::BadNeuralAnnotation {
                    location: n.location,
                    detail: "empty output domain".into(),
                });
            }
            if let Some(t) = domain.iter().find(|t| !t.is_ground()) {
                return Err(ParseError::BadNeuralAnnotation {
                    location: n.location,
                    detail: format!("non-ground domain value {}", print_term(t)),
                });
            }
            let distinct: BTreeSet<&Term> = domain.iter().collect();
            if distinct.len() != domain.len() {
                return Err(ParseError::BadNeuralAnnotation {
                    location: n.location,
                    detail: "duplicate domain value".into(),
                });
            }
        }
        let shape = (n.inputs.len(), n.domain.as_ref().map(Vec::len));
        match models.get(&n.model) {
            Some(&(k, d, _)) if (k, d) != shape => {
                return Err(ParseError::ArityClash {
                    location: n.location,
                    detail: format!(
                        "model {} is used with {} inputs and {:?} outputs, previously {} and {:?}",
                        n.model, shape.0, shape.1, k, d
                    ),
                });
            }
            Some(_) => {}
            None => {
                models.insert(n.model.clone(), (shape.0, shape.1, n.location));
            }
        }
        if neural_preds.insert(n.atom.key(), n.location).is_some() {
            return Err(ParseError::NeuralRedefinition {
                location: n.location,
                predicate: n.atom.key().to_string(),
            });
        }
    }
    let other_heads = p
        .rules
        .iter()
        .map(|r| (r.head.key(), r.location))
        .chain(p.facts.iter().map(|f| (f.atom.key(), f.location)))
        .chain(
            p.ads
                .iter()
                .flat_map(|ad| ad.heads.iter().map(move |(_, a)| (a.key(), ad.location))),
        );
    for (key, loc) in other_heads {
        if neural_preds.contains_key(&key) {
            return Err(ParseError::NeuralRedefinition {
                location: loc,
                predicate: key.to_string(),
            });
        }
    }

    // Fixed disjunction mass, then renormalize learnable groups.
    for ad in &p.ads {
        let fixed: f64 = ad
            .heads
            .iter()
            .map(|(l, _)| match l {
                ProbLabel::Fixed(x) => *x,
                ProbLabel::Learnable { .. } => 0.0,
            })
            .sum();
        if fixed > 1.0 + AD_SUM_SLACK {
            return Err(ParseError::ProbOutOfRange {
                location: ad.location,
                value: fixed,
            });
        }
    }
    for f in &p.facts {
        if let ProbLabel::Learnable { param, .. } = f.label {
            p.params[param.index()].name = f.atom.to_string();
        }
    }
    for ad in &mut p.ads {
        let learnable: Vec<ParamId> = ad
            .heads
            .iter()
            .filter_map(|(l, _)| match l {
                ProbLabel::Learnable { param, .. } => Some(*param),
                ProbLabel::Fixed(_) => None,
            })
            .collect();
        for (l, a) in &ad.heads {
            if let ProbLabel::Learnable { param, .. } = l {
                p.params[param.index()].name = a.to_string();
            }
        }
        if learnable.is_empty() || ad.heads.len() < 2 {
            continue;
        }
        let fixed: f64 = ad
            .heads
            .iter()
            .map(|(l, _)| match l {
                ProbLabel::Fixed(x) => *x,
                ProbLabel::Learnable { .. } => 0.0,
            })
            .sum();
        let budget = (1.0 - fixed).max(0.0);
        let total: f64 = learnable.iter().map(|id| p.params[id.index()].init).sum();
        let group = p.param_groups.len();
        for id in &learnable {
            let info = &mut p.params[id.index()];
            info.init = if total > 0.0 {
                info.init / total * budget
            } else {
                budget / learnable.len() as f64
            };
            info.group = Some(group);
        }
        for (l, _) in &mut ad.heads {
            if let ProbLabel::Learnable { param, init } = l {
                *init = p.params[param.index()].init;
            }
        }
        p.param_groups.push(learnable);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Program {
        parse_program(s).unwrap_or_else(|e| panic!("{e}"))
    }

    #[test]
    fn probabilistic_fact() {
        let p = parse("0.1::burglary.");
        assert_eq!(p.facts.len(), 1);
        assert_eq!(p.facts[0].label, ProbLabel::Fixed(0.1));
        assert_eq!(p.facts[0].atom, Atom::new("burglary", vec![]));
    }

    #[test]
    fn neural_annotation_with_range() {
        let p = parse("nn(m_digit,[X],Y,[0,...,9]) :: digit(X,Y).");
        assert_eq!(p.neural.len(), 1);
        let n = &p.neural[0];
        assert_eq!(&*n.model, "m_digit");
        assert_eq!(n.domain.as_ref().unwrap(), &(0..=9).map(Term::Int).collect::<Vec<_>>());
        assert_eq!(n.inputs, vec![Term::var("X")]);
        assert_eq!(n.output, Some(Term::var("Y")));
    }

    #[test]
    fn range_variants_agree() {
        let a = parse("nn(c,[X],Y,[0 .. 9]) :: d(X,Y).");
        let b = parse("nn(c,[X],Y,[0...9]) :: d(X,Y).");
        assert_eq!(a.neural[0].domain, b.neural[0].domain);
    }

    #[test]
    fn empty_source() {
        let p = parse("");
        assert!(p.is_empty());
        let p = parse("% only a comment\n");
        assert!(p.is_empty());
    }

    #[test]
    fn fraction_labels_and_disjunction() {
        let p = parse("1/19 :: u(X,0) ; 1/19 :: u(X,1).");
        assert_eq!(p.ads.len(), 1);
        assert!((p.ads[0].heads[0].0.initial() - 1.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn learnable_disjunction_is_renormalized() {
        let p = parse("t(0.5)::h(a) ; t(0.5)::h(b) ; t(1.0)::h(c).");
        let total: f64 = p.ads[0].heads.iter().map(|(l, _)| l.initial()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(p.param_groups, vec![vec![ParamId(0), ParamId(1), ParamId(2)]]);
        assert!((p.params[2].init - 0.5).abs() < 1e-12);
    }

    #[test]
    fn learnable_fact_gets_param() {
        let p = parse("t(0.2) :: noisy.");
        assert_eq!(
            p.facts[0].label,
            ProbLabel::Learnable {
                param: ParamId(0),
                init: 0.2
            }
        );
        assert_eq!(p.params[0].name, "noisy");
    }

    #[test]
    fn rule_with_builtins_and_negation() {
        let p = parse("addition(X,Y,Z) :- \\+noisy, digit(X,N1), digit(Y,N2), Z is N1+N2.");
        let r = &p.rules[0];
        assert_eq!(r.body.len(), 4);
        assert!(!r.body[0].positive);
        assert_eq!(print_term(&r.body[3].atom.to_term()), "Z is N1 + N2");
    }

    #[test]
    fn negated_conjunction_becomes_auxiliary() {
        let p = parse("b(C,R) :- h(C,H), r(H,R), \\+(h(C,H2), r(H2,R2), R2 > R).");
        assert_eq!(p.rules.len(), 2);
        let aux = &p.rules[0];
        assert_eq!(&*aux.head.predicate, "$not1");
        assert_eq!(aux.head.args, vec![Term::var("C"), Term::var("R")]);
        assert_eq!(aux.body.len(), 3);
        let main = &p.rules[1];
        assert_eq!(main.body[2], Literal::neg(aux.head.clone()));
    }

    #[test]
    fn out_of_range_probability() {
        assert!(matches!(
            parse_program("1.5::a."),
            Err(ParseError::ProbOutOfRange { .. })
        ));
        assert!(matches!(
            parse_program("0.6::a ; 0.6::b."),
            Err(ParseError::ProbOutOfRange { .. })
        ));
        assert!(matches!(
            parse_program("t(1.2)::a."),
            Err(ParseError::ProbOutOfRange { .. })
        ));
    }

    #[test]
    fn variable_probability_rejected() {
        let e = parse_program("P::a.").unwrap_err();
        assert!(matches!(e, ParseError::Syntax { .. }), "{e}");
    }

    #[test]
    fn neural_and_rule_definition_clash() {
        let e = parse_program("nn(m,[X],Y,[0,1]) :: d(X,Y).\nd(a,0).").unwrap_err();
        assert!(matches!(e, ParseError::NeuralRedefinition { .. }), "{e}");
    }

    #[test]
    fn parenthesised_list_item() {
        let t = parse_term("[(a)|b]").unwrap();
        assert_eq!(t, Term::list_with_tail(vec![Term::atom("a")], Term::atom("b")));
    }

    #[test]
    fn neural_arity_checked() {
        let e = parse_program("nn(m,[X],Y,[0,1]) :: d(X).").unwrap_err();
        assert!(matches!(e, ParseError::ArityClash { .. }), "{e}");
        let e = parse_program("nn(m,[X],Y,[0,1]) :: d(X,Y).\nnn(m,[X,Z],Y,[0,1]) :: e(X,Z,Y).")
            .unwrap_err();
        assert!(matches!(e, ParseError::ArityClash { .. }), "{e}");
    }

    #[test]
    fn neural_domain_checked() {
        let e = parse_program("nn(m,[X],Y,[a,a]) :: d(X,Y).").unwrap_err();
        assert!(matches!(e, ParseError::BadNeuralAnnotation { .. }), "{e}");
    }

    #[test]
    fn syntax_error_location() {
        let e = parse_program("a :- b.\nc :- d e.").unwrap_err();
        assert_eq!(e.location(), Location { line: 2, column: 8 });
    }

    #[test]
    fn directives() {
        let p = parse("a. query(a). evidence(b, false). evidence(c).");
        assert_eq!(p.queries.len(), 1);
        assert_eq!(p.evidence.len(), 2);
        assert!(!p.evidence[0].value);
        assert!(p.evidence[1].value);
    }

    #[test]
    fn neural_fact_form() {
        let p = parse("nn(m_swap, [X,Y]) :: swap(X,Y).");
        assert!(p.neural[0].is_fact());
        assert_eq!(p.neural[0].inputs.len(), 2);
    }

    #[test]
    fn predicate_named_t_is_not_a_label() {
        let p = parse("t(a). t(X) :- s(X).");
        assert_eq!(p.rules.len(), 2);
    }

    #[test]
    fn probabilistic_rule_is_single_head_disjunction() {
        let p = parse("0.3::a(X) :- b(X).");
        assert_eq!(p.ads.len(), 1);
        assert_eq!(p.ads[0].body.len(), 1);
    }
}
