use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::store::{FxMap, FxSet, GId, GNode, GStore, SymId};
use super::*;
use crate::syntax::{parse_program, Literal, PredKey, Program, Term};

/// Runtime term: a variable, an interned ground term or a structure with
/// at least one variable inside.
#[derive(Clone, Debug)]
enum Rt {
    Var(u32),
    G(GId),
    App(SymId, Rc<[Rt]>),
}

/// Clause-local term; variables are numbered from zero per clause.
#[derive(Clone, Debug)]
enum Tpl {
    Var(u32),
    G(GId),
    App(SymId, Box<[Tpl]>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Builtin {
    Is,
    ArithEq,
    ArithNe,
    Lt,
    Gt,
    Le,
    Ge,
    Unify,
    NotUnify,
    Identical,
    True,
    Fail,
}

fn builtin(name: &str, arity: usize) -> Option<Builtin> {
    Some(match (name, arity) {
        ("is", 2) => Builtin::Is,
        ("=:=", 2) => Builtin::ArithEq,
        ("=\\=", 2) => Builtin::ArithNe,
        ("<", 2) => Builtin::Lt,
        (">", 2) => Builtin::Gt,
        ("=<", 2) => Builtin::Le,
        (">=", 2) => Builtin::Ge,
        ("=", 2) => Builtin::Unify,
        ("\\=", 2) => Builtin::NotUnify,
        ("==", 2) => Builtin::Identical,
        ("true", 0) => Builtin::True,
        ("fail" | "false", 0) => Builtin::Fail,
        _ => return None,
    })
}

#[derive(Clone, Debug)]
struct CAtom {
    pred: SymId,
    args: Box<[Tpl]>,
}

#[derive(Clone, Debug)]
struct CLit {
    atom: CAtom,
    positive: bool,
    builtin: Option<Builtin>,
}

#[derive(Clone, Copy, Debug)]
enum ClauseKind {
    Rule,
    Fact { fact: usize },
    Ad { ad: usize, head: usize },
    Neural { nn: usize },
}

#[derive(Debug)]
struct Clause {
    head: CAtom,
    body: Rc<[CLit]>,
    nvars: u32,
    kind: ClauseKind,
}

struct CAd {
    heads: Vec<(ProbLabel, CAtom)>,
}

struct CNeural {
    model: Symbol,
    inputs: Vec<Tpl>,
    output: Option<Tpl>,
    domain: Option<Vec<GId>>,
    head: CAtom,
    nvars: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Active { pos: usize },
    /// Evaluated while depending on an older active table `leader`.
    Incomplete { pass: u64, leader: usize },
    Complete,
}

struct Table {
    pred: SymId,
    pattern: Box<[Tpl]>,
    nvars: u32,
    answers: Vec<GId>,
    answer_set: FxSet<GId>,
    state: State,
}

struct Frame {
    table: usize,
    min_dep: usize,
    incomplete_start: usize,
}

type Body = Box<[(GId, bool)]>;

struct AdInst {
    ad: usize,
    heads: Vec<GId>,
    body: Body,
}

struct NnInst {
    nn: usize,
    inputs: Box<[GId]>,
    /// Head per domain value; `None` when the value does not fit the output.
    heads: Vec<Option<GId>>,
}

/// How a ground atom can become true.
#[derive(Clone, Copy, Debug)]
enum Def {
    Rule(usize),
    Fact(usize),
    AdHead(usize, usize),
    NnHead(usize, usize),
}

struct Engine<'a> {
    program: &'a Program,
    options: &'a GroundOptions,
    store: GStore,
    clauses: Vec<Rc<Clause>>,
    preds: FxMap<(SymId, usize), Vec<usize>>,
    ads: Vec<CAd>,
    neural: Vec<CNeural>,
    bind: Vec<Option<Rt>>,
    trail: Vec<u32>,
    tables: Vec<Table>,
    table_index: FxMap<Box<[u64]>, usize>,
    stack: Vec<Frame>,
    incomplete: Vec<usize>,
    pass: u64,
    answers_added: u64,
    steps: u64,
    rules: Vec<(GId, Body)>,
    /// Atoms with a derivation free of choices.
    certain: FxSet<GId>,
    rule_set: FxSet<(GId, Body)>,
    fact_insts: Vec<(usize, GId)>,
    fact_set: FxSet<(usize, GId)>,
    ad_insts: Vec<AdInst>,
    ad_index: FxMap<(usize, Box<[GId]>, Body), usize>,
    ad_heads_seen: FxSet<(usize, usize)>,
    nn_insts: Vec<NnInst>,
    nn_index: FxMap<(usize, Box<[GId]>), usize>,
}

const LIBRARY: &str = "
member(X,[X|_]).
member(X,[_|T]) :- member(X,T).
select(X,[X|T],T).
select(X,[H|T],[H|R]) :- select(X,T,R).
";

type R<T> = Result<T, GroundError>;

pub(super) fn ground(
    program: &Program,
    queries: &[Atom],
    options: &GroundOptions,
) -> R<GroundProgram> {
    let mut e = Engine {
        program,
        options,
        store: GStore::default(),
        clauses: Vec::new(),
        preds: FxMap::default(),
        ads: Vec::new(),
        neural: Vec::new(),
        bind: Vec::new(),
        trail: Vec::new(),
        tables: Vec::new(),
        table_index: FxMap::default(),
        stack: Vec::new(),
        incomplete: Vec::new(),
        pass: 0,
        answers_added: 0,
        steps: 0,
        rules: Vec::new(),
        certain: FxSet::default(),
        rule_set: FxSet::default(),
        fact_insts: Vec::new(),
        fact_set: FxSet::default(),
        ad_insts: Vec::new(),
        ad_index: FxMap::default(),
        ad_heads_seen: FxSet::default(),
        nn_insts: Vec::new(),
        nn_index: FxMap::default(),
    };
    e.load();
    let mut roots = Vec::new();
    for q in queries {
        let mut names = Vec::new();
        let args: Vec<Rt> = q
            .args
            .iter()
            .map(|t| {
                let tpl = e.compile_term(t, &mut names);
                e.instantiate(&tpl, 0)
            })
            .collect();
        for _ in 0..names.len() {
            e.bind.push(None);
        }
        let pred = e.store.syms.intern(&q.predicate);
        if builtin(&q.predicate, q.args.len()).is_some() {
            e.bind.clear();
            e.trail.clear();
            continue;
        }
        let t = e.call(pred, &args)?;
        if let Some(g) = e.atom_gid(pred, &args) {
            roots.push(g);
        }
        roots.extend(e.tables[t].answers.iter().copied());
        e.bind.clear();
        e.trail.clear();
    }
    let mut seen = FxSet::default();
    roots.retain(|g| seen.insert(*g));
    e.finish(&roots)
}

impl<'a> Engine<'a> {
    // ---- loading -----------------------------------------------------------

    fn compile_term(&mut self, t: &Term, names: &mut Vec<Symbol>) -> Tpl {
        match t {
            Term::Var(v) => {
                if &**v == "_" {
                    names.push(v.clone());
                    return Tpl::Var(names.len() as u32 - 1);
                }
                let i = match names.iter().position(|n| n == v) {
                    Some(i) => i,
                    None => {
                        names.push(v.clone());
                        names.len() - 1
                    }
                };
                Tpl::Var(i as u32)
            }
            Term::Compound(f, args) => {
                let args: Box<[Tpl]> = args.iter().map(|a| self.compile_term(a, names)).collect();
                let f = self.store.syms.intern(f);
                if args.iter().all(|a| matches!(a, Tpl::G(_))) {
                    let gs = args
                        .iter()
                        .map(|a| match a {
                            Tpl::G(g) => *g,
                            _ => unreachable!(),
                        })
                        .collect();
                    Tpl::G(self.store.intern(GNode::App(f, gs)))
                } else {
                    Tpl::App(f, args)
                }
            }
            _ => Tpl::G(self.store.intern_term(t).expect("constant")),
        }
    }

    fn compile_atom(&mut self, a: &Atom, names: &mut Vec<Symbol>) -> CAtom {
        CAtom {
            pred: self.store.syms.intern(&a.predicate),
            args: a.args.iter().map(|t| self.compile_term(t, names)).collect(),
        }
    }

    fn compile_body(&mut self, body: &[Literal], names: &mut Vec<Symbol>) -> Rc<[CLit]> {
        body.iter()
            .map(|l| CLit {
                atom: self.compile_atom(&l.atom, names),
                positive: l.positive,
                builtin: builtin(&l.atom.predicate, l.atom.args.len()),
            })
            .collect()
    }

    fn add_clause(&mut self, c: Clause) {
        let key = (c.head.pred, c.head.args.len());
        let id = self.clauses.len();
        self.clauses.push(Rc::new(c));
        self.preds.entry(key).or_default().push(id);
    }

    fn load(&mut self) {
        let p = self.program;
        for (i, n) in p.neural.iter().enumerate() {
            let mut names = Vec::new();
            let head = self.compile_atom(&n.atom, &mut names);
            let inputs = n.inputs.iter().map(|t| self.compile_term(t, &mut names)).collect();
            let output = n.output.as_ref().map(|t| self.compile_term(t, &mut names));
            let domain = n.domain.as_ref().map(|d| {
                d.iter()
                    .map(|t| self.store.intern_term(t).expect("ground domain"))
                    .collect()
            });
            let nvars = names.len() as u32;
            self.neural.push(CNeural {
                model: n.model.clone(),
                inputs,
                output,
                domain,
                head: head.clone(),
                nvars,
            });
            self.add_clause(Clause {
                head,
                body: Rc::from(Vec::new()),
                nvars,
                kind: ClauseKind::Neural { nn: i },
            });
        }
        for (i, f) in p.facts.iter().enumerate() {
            let mut names = Vec::new();
            let head = self.compile_atom(&f.atom, &mut names);
            self.add_clause(Clause {
                head,
                body: Rc::from(Vec::new()),
                nvars: names.len() as u32,
                kind: ClauseKind::Fact { fact: i },
            });
        }
        for (i, ad) in p.ads.iter().enumerate() {
            let mut names = Vec::new();
            let heads: Vec<(ProbLabel, CAtom)> = ad
                .heads
                .iter()
                .map(|(l, a)| (*l, self.compile_atom(a, &mut names)))
                .collect();
            let body = self.compile_body(&ad.body, &mut names);
            let nvars = names.len() as u32;
            for (j, (_, h)) in heads.iter().enumerate() {
                self.add_clause(Clause {
                    head: h.clone(),
                    body: body.clone(),
                    nvars,
                    kind: ClauseKind::Ad { ad: i, head: j },
                });
            }
            self.ads.push(CAd { heads });
        }
        let defined: FxSet<PredKey> = p
            .rules
            .iter()
            .map(|r| r.head.key())
            .chain(p.facts.iter().map(|f| f.atom.key()))
            .chain(p.ads.iter().flat_map(|a| a.heads.iter().map(|h| h.1.key())))
            .chain(p.neural.iter().map(|n| n.atom.key()))
            .collect();
        let library = parse_program(LIBRARY).expect("library parses");
        let extra = library
            .rules
            .iter()
            .filter(|r| !defined.contains(&r.head.key()));
        for r in p.rules.iter().chain(extra) {
            let mut names = Vec::new();
            let head = self.compile_atom(&r.head, &mut names);
            let body = self.compile_body(&r.body, &mut names);
            self.add_clause(Clause {
                head,
                body,
                nvars: names.len() as u32,
                kind: ClauseKind::Rule,
            });
        }
    }

    // ---- bindings ----------------------------------------------------------

    fn instantiate(&self, t: &Tpl, base: u32) -> Rt {
        match t {
            Tpl::Var(i) => Rt::Var(base + i),
            Tpl::G(g) => Rt::G(*g),
            Tpl::App(f, args) => Rt::App(*f, args.iter().map(|a| self.instantiate(a, base)).collect()),
        }
    }

    fn alloc(&mut self, n: u32) -> u32 {
        let base = self.bind.len() as u32;
        self.bind.resize(self.bind.len() + n as usize, None);
        base
    }

    fn mark(&self) -> (usize, usize) {
        (self.trail.len(), self.bind.len())
    }

    fn undo(&mut self, (trail, vars): (usize, usize)) {
        for v in self.trail.drain(trail..) {
            self.bind[v as usize] = None;
        }
        self.bind.truncate(vars);
    }

    fn deref(&self, t: &Rt) -> Rt {
        let mut t = t.clone();
        while let Rt::Var(v) = t {
            match &self.bind[v as usize] {
                Some(b) => t = b.clone(),
                None => return t,
            }
        }
        t
    }

    fn set(&mut self, v: u32, t: Rt) {
        self.bind[v as usize] = Some(t);
        self.trail.push(v);
    }

    fn occurs(&self, v: u32, t: &Rt) -> bool {
        match self.deref(t) {
            Rt::Var(w) => v == w,
            Rt::G(_) => false,
            Rt::App(_, args) => args.iter().any(|a| self.occurs(v, a)),
        }
    }

    fn unify(&mut self, a: &Rt, b: &Rt) -> bool {
        let a = self.deref(a);
        let b = self.deref(b);
        match (a, b) {
            (Rt::Var(x), Rt::Var(y)) => {
                if x != y {
                    let (old, new) = if x < y { (x, y) } else { (y, x) };
                    self.set(new, Rt::Var(old));
                }
                true
            }
            (Rt::Var(x), t) | (t, Rt::Var(x)) => {
                if self.occurs(x, &t) {
                    false
                } else {
                    self.set(x, t);
                    true
                }
            }
            (Rt::G(x), Rt::G(y)) => x == y,
            (Rt::G(g), Rt::App(f, args)) | (Rt::App(f, args), Rt::G(g)) => {
                let GNode::App(gf, gargs) = self.store.node(g) else {
                    return false;
                };
                if *gf != f || gargs.len() != args.len() {
                    return false;
                }
                let gargs: Vec<GId> = gargs.to_vec();
                args.iter()
                    .zip(gargs)
                    .all(|(a, g)| self.unify(a, &Rt::G(g)))
            }
            (Rt::App(f, xs), Rt::App(g, ys)) => {
                f == g && xs.len() == ys.len() && xs.iter().zip(ys.iter()).all(|(x, y)| self.unify(x, y))
            }
        }
    }

    fn ground(&mut self, t: &Rt) -> Option<GId> {
        match self.deref(t) {
            Rt::Var(_) => None,
            Rt::G(g) => Some(g),
            Rt::App(f, args) => {
                let gs = args
                    .iter()
                    .map(|a| self.ground(a))
                    .collect::<Option<Box<[GId]>>>()?;
                Some(self.store.intern(GNode::App(f, gs)))
            }
        }
    }

    fn atom_gid(&mut self, pred: SymId, args: &[Rt]) -> Option<GId> {
        if args.is_empty() {
            return Some(self.store.intern(GNode::Atom(pred)));
        }
        let gs = args
            .iter()
            .map(|a| self.ground(a))
            .collect::<Option<Box<[GId]>>>()?;
        Some(self.store.intern(GNode::App(pred, gs)))
    }

    fn rt_to_term(&self, t: &Rt) -> Term {
        match self.deref(t) {
            Rt::Var(v) => Term::Var(crate::syntax::sym(&format!("_G{v}"))),
            Rt::G(g) => self.store.to_term(g),
            Rt::App(f, args) => Term::Compound(
                self.store.syms.name(f).clone(),
                args.iter().map(|a| self.rt_to_term(a)).collect(),
            ),
        }
    }

    fn goal_string(&self, pred: SymId, args: &[Rt]) -> String {
        let t = if args.is_empty() {
            Term::Atom(self.store.syms.name(pred).clone())
        } else {
            Term::Compound(
                self.store.syms.name(pred).clone(),
                args.iter().map(|a| self.rt_to_term(a)).collect(),
            )
        };
        print_term(&t)
    }

    /// Variant-normal form of a call: ground subterms interned, variables
    /// renumbered by first occurrence.
    fn canon(&mut self, t: &Rt, vars: &mut Vec<u32>) -> Tpl {
        match self.deref(t) {
            Rt::Var(v) => {
                let i = match vars.iter().position(|&w| w == v) {
                    Some(i) => i,
                    None => {
                        vars.push(v);
                        vars.len() - 1
                    }
                };
                Tpl::Var(i as u32)
            }
            Rt::G(g) => Tpl::G(g),
            Rt::App(f, args) => {
                let args: Box<[Tpl]> = args.iter().map(|a| self.canon(a, vars)).collect();
                if args.iter().all(|a| matches!(a, Tpl::G(_))) {
                    let gs = args
                        .iter()
                        .map(|a| match a {
                            Tpl::G(g) => *g,
                            _ => unreachable!(),
                        })
                        .collect();
                    Tpl::G(self.store.intern(GNode::App(f, gs)))
                } else {
                    Tpl::App(f, args)
                }
            }
        }
    }

    fn encode(t: &Tpl, out: &mut Vec<u64>) {
        match t {
            Tpl::G(g) => out.extend([0, u64::from(*g)]),
            Tpl::Var(v) => out.extend([1, u64::from(*v)]),
            Tpl::App(f, args) => {
                out.extend([2, u64::from(*f), args.len() as u64]);
                args.iter().for_each(|a| Self::encode(a, out));
            }
        }
    }

    fn step(&mut self) -> R<()> {
        self.steps += 1;
        if self.steps > self.options.max_steps {
            return Err(GroundError::DepthLimitExceeded {
                limit: self.options.max_steps,
                what: "resolution steps",
            });
        }
        Ok(())
    }

    // ---- tabled resolution ------------------------------------------------

    fn call(&mut self, pred: SymId, args: &[Rt]) -> R<usize> {
        let mut vars = Vec::new();
        let pattern: Box<[Tpl]> = args.iter().map(|a| self.canon(a, &mut vars)).collect();
        let mut key = vec![u64::from(pred)];
        pattern.iter().for_each(|p| Self::encode(p, &mut key));
        let key = key.into_boxed_slice();
        let t = match self.table_index.get(&key) {
            Some(&t) => {
                match self.tables[t].state {
                    State::Complete => return Ok(t),
                    State::Active { pos } => {
                        self.note_dependency(pos);
                        return Ok(t);
                    }
                    State::Incomplete { pass, leader } if pass == self.pass => {
                        self.note_dependency(leader);
                        return Ok(t);
                    }
                    State::Incomplete { .. } => {}
                }
                t
            }
            None => {
                let t = self.tables.len();
                self.tables.push(Table {
                    pred,
                    pattern,
                    nvars: vars.len() as u32,
                    answers: Vec::new(),
                    answer_set: FxSet::default(),
                    state: State::Complete,
                });
                self.table_index.insert(key, t);
                t
            }
        };
        self.evaluate(t)?;
        Ok(t)
    }

    fn note_dependency(&mut self, pos: usize) {
        if let Some(top) = self.stack.last_mut() {
            top.min_dep = top.min_dep.min(pos);
        }
    }

    fn evaluate(&mut self, t: usize) -> R<()> {
        let pos = self.stack.len();
        if pos >= self.options.max_depth {
            return Err(GroundError::DepthLimitExceeded {
                limit: self.options.max_depth as u64,
                what: "nested calls",
            });
        }
        self.stack.push(Frame {
            table: t,
            min_dep: usize::MAX,
            incomplete_start: self.incomplete.len(),
        });
        self.tables[t].state = State::Active { pos };
        loop {
            let before = self.answers_added;
            self.run_clauses(t)?;
            let top = self.stack.last_mut().expect("frame");
            if top.min_dep == pos && self.answers_added != before {
                top.min_dep = usize::MAX;
                self.pass += 1;
                continue;
            }
            break;
        }
        let frame = self.stack.pop().expect("frame");
        debug_assert_eq!(frame.table, t);
        if frame.min_dep < pos {
            self.tables[t].state = State::Incomplete {
                pass: self.pass,
                leader: frame.min_dep,
            };
            self.incomplete.push(t);
            self.note_dependency(frame.min_dep);
        } else {
            self.tables[t].state = State::Complete;
            for u in self.incomplete.drain(frame.incomplete_start..) {
                self.tables[u].state = State::Complete;
            }
        }
        Ok(())
    }

    fn add_answer(&mut self, t: usize, g: GId) {
        let table = &mut self.tables[t];
        if table.answer_set.insert(g) {
            table.answers.push(g);
            self.answers_added += 1;
        }
    }

    fn run_clauses(&mut self, t: usize) -> R<()> {
        let pred = self.tables[t].pred;
        let arity = self.tables[t].pattern.len();
        let Some(ids) = self.preds.get(&(pred, arity)).cloned() else {
            return Ok(());
        };
        for ci in ids {
            let clause = self.clauses[ci].clone();
            let mark = self.mark();
            let gbase = self.alloc(self.tables[t].nvars);
            let goal: Vec<Rt> = self.tables[t]
                .pattern
                .iter()
                .map(|p| self.instantiate(p, gbase))
                .collect();
            self.step()?;
            let base = self.alloc(clause.nvars);
            let head: Vec<Rt> = clause.head.args.iter().map(|a| self.instantiate(a, base)).collect();
            if goal.iter().zip(&head).all(|(g, h)| self.unify(g, h)) {
                match clause.kind {
                    ClauseKind::Neural { nn } => self.resolve_neural(t, nn, pred, &goal, base)?,
                    _ => {
                        let mut acc = Vec::new();
                        self.solve(t, &clause, &goal, base, 0, &mut acc)?;
                    }
                }
            }
            self.undo(mark);
        }
        Ok(())
    }

    fn solve(
        &mut self,
        t: usize,
        clause: &Clause,
        goal: &[Rt],
        base: u32,
        i: usize,
        acc: &mut Vec<(GId, bool)>,
    ) -> R<()> {
        if i == clause.body.len() {
            return self.on_solution(t, clause, goal, base, acc);
        }
        let lit = &clause.body[i];
        let args: Vec<Rt> = lit.atom.args.iter().map(|a| self.instantiate(a, base)).collect();
        if let Some(b) = lit.builtin {
            let mark = self.mark();
            let ok = self.builtin(b, lit.atom.pred, &args)?;
            let proceed = if lit.positive {
                ok
            } else {
                self.undo(mark);
                if args.iter().any(|a| self.ground_check(a)) {
                    return Err(GroundError::NonGroundNegation {
                        goal: self.goal_string(lit.atom.pred, &args),
                    });
                }
                !ok
            };
            if proceed {
                self.solve(t, clause, goal, base, i + 1, acc)?;
            }
            self.undo(mark);
            return Ok(());
        }
        if !lit.positive {
            let Some(g) = self.atom_gid(lit.atom.pred, &args) else {
                return Err(GroundError::NonGroundNegation {
                    goal: self.goal_string(lit.atom.pred, &args),
                });
            };
            let u = self.call(lit.atom.pred, &args)?;
            if self.tables[u].state != State::Complete {
                return Err(GroundError::CyclicGroundProgram {
                    atom: self.goal_string(lit.atom.pred, &args),
                });
            }
            let provable = !self.tables[u].answers.is_empty();
            if self.options.simplify && self.certain.contains(&g) {
                return Ok(());
            }
            if provable || !self.options.simplify {
                acc.push((g, false));
                self.solve(t, clause, goal, base, i + 1, acc)?;
                acc.pop();
            } else {
                self.solve(t, clause, goal, base, i + 1, acc)?;
            }
            return Ok(());
        }
        let u = self.call(lit.atom.pred, &args)?;
        let mut k = 0;
        while k < self.tables[u].answers.len() {
            let ans = self.tables[u].answers[k];
            k += 1;
            self.step()?;
            let mark = self.mark();
            let gargs: Vec<GId> = self.store.args(ans).to_vec();
            if args.iter().zip(gargs).all(|(a, g)| self.unify(a, &Rt::G(g))) {
                acc.push((ans, true));
                self.solve(t, clause, goal, base, i + 1, acc)?;
                acc.pop();
            }
            self.undo(mark);
        }
        Ok(())
    }

    /// True when the term still contains a variable.
    fn ground_check(&mut self, t: &Rt) -> bool {
        self.ground(t).is_none()
    }

    fn non_ground_answer(&self, pred: SymId, goal: &[Rt]) -> GroundError {
        GroundError::NonGroundAnswer {
            atom: self.goal_string(pred, goal),
        }
    }

    fn on_solution(
        &mut self,
        t: usize,
        clause: &Clause,
        goal: &[Rt],
        base: u32,
        acc: &[(GId, bool)],
    ) -> R<()> {
        let pred = self.tables[t].pred;
        let Some(ans) = self.atom_gid(pred, goal) else {
            return Err(self.non_ground_answer(pred, goal));
        };
        match clause.kind {
            ClauseKind::Rule => {
                if acc.iter().all(|(g, pos)| *pos && self.certain.contains(g)) {
                    self.certain.insert(ans);
                }
                let key = (ans, Box::<[(GId, bool)]>::from(acc));
                if self.rule_set.insert(key.clone()) {
                    self.rules.push(key);
                }
            }
            ClauseKind::Fact { fact } => {
                if self.fact_set.insert((fact, ans)) {
                    self.fact_insts.push((fact, ans));
                }
            }
            ClauseKind::Ad { ad, head } => {
                let mut heads = Vec::with_capacity(self.ads[ad].heads.len());
                for j in 0..self.ads[ad].heads.len() {
                    let h = self.ads[ad].heads[j].1.clone();
                    let args: Vec<Rt> = h.args.iter().map(|a| self.instantiate(a, base)).collect();
                    match self.atom_gid(h.pred, &args) {
                        Some(g) => heads.push(g),
                        None => return Err(self.non_ground_answer(h.pred, &args)),
                    }
                }
                let key = (ad, heads.clone().into_boxed_slice(), Box::<[(GId, bool)]>::from(acc));
                let id = match self.ad_index.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = self.ad_insts.len();
                        self.ad_insts.push(AdInst {
                            ad,
                            heads,
                            body: key.2.clone(),
                        });
                        self.ad_index.insert(key, id);
                        id
                    }
                };
                self.ad_heads_seen.insert((id, head));
            }
            ClauseKind::Neural { .. } => unreachable!("neural clauses resolve separately"),
        }
        self.add_answer(t, ans);
        Ok(())
    }

    fn resolve_neural(&mut self, t: usize, nn: usize, pred: SymId, goal: &[Rt], base: u32) -> R<()> {
        let n = &self.neural[nn];
        let input_tpls = n.inputs.clone();
        let output = n.output.clone();
        let domain = n.domain.clone();
        let head = n.head.clone();
        let nvars = n.nvars;
        let mut inputs = Vec::with_capacity(input_tpls.len());
        for tpl in &input_tpls {
            let rt = self.instantiate(tpl, base);
            match self.ground(&rt) {
                Some(g) => inputs.push(g),
                None => {
                    return Err(GroundError::UnboundNeuralInput {
                        atom: self.goal_string(pred, goal),
                    })
                }
            }
        }
        let inputs: Box<[GId]> = inputs.into();
        let key = (nn, inputs.clone());
        if !self.nn_index.contains_key(&key) {
            {
                // Heads for every domain value, from a fresh copy of the
                // annotation with only the inputs bound.
                let mark = self.mark();
                let b2 = self.alloc(nvars);
                for (tpl, g) in input_tpls.iter().zip(inputs.iter()) {
                    let rt = self.instantiate(tpl, b2);
                    let ok = self.unify(&rt, &Rt::G(*g));
                    debug_assert!(ok);
                }
                let head_args: Vec<Rt> = head.args.iter().map(|a| self.instantiate(a, b2)).collect();
                let mut heads = Vec::new();
                match (&output, &domain) {
                    (Some(out), Some(dom)) => {
                        let out = self.instantiate(out, b2);
                        for &v in dom {
                            let m2 = self.mark();
                            if self.unify(&out, &Rt::G(v)) {
                                match self.atom_gid(head.pred, &head_args) {
                                    Some(g) => heads.push(Some(g)),
                                    None => return Err(self.non_ground_answer(head.pred, &head_args)),
                                }
                            } else {
                                heads.push(None);
                            }
                            self.undo(m2);
                        }
                    }
                    _ => match self.atom_gid(head.pred, &head_args) {
                        Some(g) => heads.push(Some(g)),
                        None => return Err(self.non_ground_answer(head.pred, &head_args)),
                    },
                }
                self.undo(mark);
                let id = self.nn_insts.len();
                self.nn_insts.push(NnInst { nn, inputs, heads });
                self.nn_index.insert(key, id);
            }
        }
        match (&output, &domain) {
            (Some(out), Some(dom)) => {
                let out = self.instantiate(out, base);
                for &v in dom {
                    let mark = self.mark();
                    if self.unify(&out, &Rt::G(v)) {
                        match self.atom_gid(pred, goal) {
                            Some(g) => self.add_answer(t, g),
                            None => return Err(self.non_ground_answer(pred, goal)),
                        }
                    }
                    self.undo(mark);
                }
            }
            _ => match self.atom_gid(pred, goal) {
                Some(g) => self.add_answer(t, g),
                None => return Err(self.non_ground_answer(pred, goal)),
            },
        }
        Ok(())
    }

    // ---- builtins ----------------------------------------------------------

    fn eval(&mut self, t: &Rt, pred: SymId, args: &[Rt]) -> R<Option<i64>> {
        let bad = |e: &Self, detail: &str| GroundError::BadArithmetic {
            goal: e.goal_string(pred, args),
            detail: detail.to_string(),
        };
        let (f, xs): (SymId, Vec<Rt>) = match self.deref(t) {
            Rt::Var(_) => {
                return Err(GroundError::UnboundArithmetic {
                    goal: self.goal_string(pred, args),
                })
            }
            Rt::G(g) => match self.store.node(g).clone() {
                GNode::Int(i) => return Ok(Some(i)),
                GNode::Atom(a) => {
                    return Err(bad(self, &format!("{} is not a number", self.store.syms.name(a))))
                }
                GNode::App(f, gs) => (f, gs.iter().map(|&g| Rt::G(g)).collect()),
            },
            Rt::App(f, xs) => (f, xs.to_vec()),
        };
        let name = self.store.syms.name(f).clone();
        let mut vals = Vec::with_capacity(xs.len());
        for x in &xs {
            match self.eval(x, pred, args)? {
                Some(v) => vals.push(v),
                None => return Ok(None),
            }
        }
        let overflow = |e: &Self| bad(e, "integer overflow");
        let r = match (&*name, vals.as_slice()) {
            ("+", [a, b]) => a.checked_add(*b),
            ("-", [a, b]) => a.checked_sub(*b),
            ("*", [a, b]) => a.checked_mul(*b),
            ("-", [a]) => a.checked_neg(),
            ("+", [a]) => Some(*a),
            ("abs", [a]) => a.checked_abs(),
            ("min", [a, b]) => Some(*a.min(b)),
            ("max", [a, b]) => Some(*a.max(b)),
            ("//", [_, 0]) | ("mod", [_, 0]) | ("/", [_, 0]) => return Ok(None),
            ("//", [a, b]) => a.checked_div(*b),
            ("mod", [a, b]) => a.checked_rem(*b).map(|r| if r != 0 && (r < 0) != (*b < 0) { r + b } else { r }),
            ("/", [a, b]) if a % b == 0 => a.checked_div(*b),
            ("/", [_, _]) => return Err(bad(self, "inexact integer division")),
            _ => return Err(bad(self, &format!("unknown function {}/{}", name, vals.len()))),
        };
        r.map(Some).ok_or_else(|| overflow(self))
    }

    fn identical(&self, a: &Rt, b: &Rt) -> bool {
        match (self.deref(a), self.deref(b)) {
            (Rt::Var(x), Rt::Var(y)) => x == y,
            (Rt::G(x), Rt::G(y)) => x == y,
            (Rt::App(f, xs), Rt::App(g, ys)) => {
                f == g && xs.len() == ys.len() && xs.iter().zip(ys.iter()).all(|(x, y)| self.identical(x, y))
            }
            (Rt::G(g), Rt::App(f, xs)) | (Rt::App(f, xs), Rt::G(g)) => match self.store.node(g) {
                GNode::App(gf, gs) if *gf == f && gs.len() == xs.len() => {
                    xs.iter().zip(gs.iter()).all(|(x, g)| self.identical(x, &Rt::G(*g)))
                }
                _ => false,
            },
            _ => false,
        }
    }

    fn builtin(&mut self, b: Builtin, pred: SymId, args: &[Rt]) -> R<bool> {
        let cmp = |e: &mut Self| -> R<Option<(i64, i64)>> {
            let x = e.eval(&args[0], pred, args)?;
            let y = e.eval(&args[1], pred, args)?;
            Ok(x.zip(y))
        };
        Ok(match b {
            Builtin::True => true,
            Builtin::Fail => false,
            Builtin::Unify => self.unify(&args[0], &args[1]),
            Builtin::NotUnify => {
                let mark = self.mark();
                let ok = self.unify(&args[0], &args[1]);
                self.undo(mark);
                !ok
            }
            Builtin::Identical => self.identical(&args[0], &args[1]),
            Builtin::Is => match self.eval(&args[1], pred, args)? {
                Some(v) => {
                    let g = self.store.intern(GNode::Int(v));
                    self.unify(&args[0], &Rt::G(g))
                }
                None => false,
            },
            Builtin::ArithEq => cmp(self)?.is_some_and(|(x, y)| x == y),
            Builtin::ArithNe => cmp(self)?.is_some_and(|(x, y)| x != y),
            Builtin::Lt => cmp(self)?.is_some_and(|(x, y)| x < y),
            Builtin::Gt => cmp(self)?.is_some_and(|(x, y)| x > y),
            Builtin::Le => cmp(self)?.is_some_and(|(x, y)| x <= y),
            Builtin::Ge => cmp(self)?.is_some_and(|(x, y)| x >= y),
        })
    }

    // ---- output ------------------------------------------------------------

    fn finish(mut self, roots: &[GId]) -> R<GroundProgram> {
        let mut defs: FxMap<GId, Vec<Def>> = FxMap::default();
        for (i, (h, _)) in self.rules.iter().enumerate() {
            defs.entry(*h).or_default().push(Def::Rule(i));
        }
        for (i, (_, a)) in self.fact_insts.iter().enumerate() {
            defs.entry(*a).or_default().push(Def::Fact(i));
        }
        let mut ad_seen: Vec<(usize, usize)> = self.ad_heads_seen.iter().copied().collect();
        ad_seen.sort_unstable();
        for (i, j) in ad_seen {
            defs.entry(self.ad_insts[i].heads[j]).or_default().push(Def::AdHead(i, j));
        }
        for (i, inst) in self.nn_insts.iter().enumerate() {
            for (k, h) in inst.heads.iter().enumerate() {
                if let Some(h) = h {
                    defs.entry(*h).or_default().push(Def::NnHead(i, k));
                }
            }
        }

        let mut rule_bodies: Vec<Option<Vec<(GId, bool)>>> =
            self.rules.iter().map(|(_, b)| Some(b.to_vec())).collect();
        let mut ad_bodies: Vec<Option<Vec<(GId, bool)>>> =
            self.ad_insts.iter().map(|a| Some(a.body.to_vec())).collect();
        let mut certain: FxSet<GId> = FxSet::default();
        if self.options.simplify {
            self.simplify(&defs, &mut rule_bodies, &mut ad_bodies, &mut certain);
        }

        let alive = |d: &Def, rb: &[Option<Vec<(GId, bool)>>], ab: &[Option<Vec<(GId, bool)>>]| match d {
            Def::Rule(i) => rb[*i].is_some(),
            Def::AdHead(i, _) => ab[*i].is_some(),
            _ => true,
        };

        // Reachability from the roots.
        let mut keep_rules = vec![!self.options.prune; self.rules.len()];
        let mut keep_facts = vec![!self.options.prune; self.fact_insts.len()];
        let mut keep_ads: Vec<Option<FxSet<usize>>> = vec![None; self.ad_insts.len()];
        let mut keep_nn: Vec<Option<FxSet<usize>>> = vec![None; self.nn_insts.len()];
        let mut order: Vec<GId> = Vec::new();
        let mut visited: FxSet<GId> = FxSet::default();
        let mut stack: Vec<GId> = roots.iter().rev().copied().collect();
        if self.options.prune {
            while let Some(a) = stack.pop() {
                if !visited.insert(a) {
                    continue;
                }
                order.push(a);
                let Some(ds) = defs.get(&a) else { continue };
                if certain.contains(&a) {
                    // One empty-bodied rule stands for the atom.
                    if let Some(Def::Rule(i)) = ds.iter().find(|d| {
                        matches!(d, Def::Rule(i) if rule_bodies[*i].as_ref().is_some_and(|b| b.is_empty()))
                    }) {
                        keep_rules[*i] = true;
                    }
                    continue;
                }
                let mut next = Vec::new();
                for d in ds {
                    if !alive(d, &rule_bodies, &ad_bodies) {
                        continue;
                    }
                    match *d {
                        Def::Rule(i) => {
                            keep_rules[i] = true;
                            next.extend(rule_bodies[i].as_ref().unwrap().iter().map(|l| l.0));
                        }
                        Def::Fact(i) => keep_facts[i] = true,
                        Def::AdHead(i, j) => {
                            keep_ads[i].get_or_insert_with(FxSet::default).insert(j);
                            next.extend(ad_bodies[i].as_ref().unwrap().iter().map(|l| l.0));
                        }
                        Def::NnHead(i, k) => {
                            keep_nn[i].get_or_insert_with(FxSet::default).insert(k);
                        }
                    }
                }
                stack.extend(next.into_iter().rev());
            }
        } else {
            for (i, inst) in self.ad_insts.iter().enumerate() {
                if ad_bodies[i].is_some() {
                    let mut s = FxSet::default();
                    for (j, h) in inst.heads.iter().enumerate() {
                        if defs.get(h).is_some_and(|ds| {
                            ds.iter().any(|d| matches!(d, Def::AdHead(x, y) if *x == i && *y == j))
                        }) {
                            s.insert(j);
                        }
                    }
                    keep_ads[i] = Some(s);
                }
            }
            for (i, inst) in self.nn_insts.iter().enumerate() {
                keep_nn[i] = Some((0..inst.heads.len()).filter(|k| inst.heads[*k].is_some()).collect());
            }
            for (i, b) in rule_bodies.iter().enumerate() {
                keep_rules[i] = b.is_some();
            }
        }

        // Atom numbering: roots and reached atoms first, then every other
        // atom mentioned by a kept record.
        let mut ids: FxMap<GId, AtomId> = FxMap::default();
        let mut atoms: Vec<Atom> = Vec::new();
        let mut id_of = |g: GId, store: &GStore, atoms: &mut Vec<Atom>| -> AtomId {
            *ids.entry(g).or_insert_with(|| {
                atoms.push(Atom::from_term(&store.to_term(g)).expect("callable"));
                (atoms.len() - 1) as AtomId
            })
        };
        for &g in roots.iter().chain(order.iter()) {
            id_of(g, &self.store, &mut atoms);
        }
        let lits = |b: &[(GId, bool)], atoms: &mut Vec<Atom>, id_of: &mut dyn FnMut(GId, &GStore, &mut Vec<Atom>) -> AtomId, store: &GStore| {
            b.iter()
                .map(|&(g, positive)| GroundLiteral {
                    atom: id_of(g, store, atoms),
                    positive,
                })
                .collect::<Vec<_>>()
        };

        let mut out = GroundProgram::default();
        for (i, (h, _)) in self.rules.iter().enumerate() {
            if !keep_rules[i] {
                continue;
            }
            let Some(body) = &rule_bodies[i] else { continue };
            if certain.contains(h) && !body.is_empty() && self.options.prune {
                continue;
            }
            let head = id_of(*h, &self.store, &mut atoms);
            let body = lits(body, &mut atoms, &mut id_of, &self.store);
            out.rules.push(GroundRule { head, body });
        }
        for (i, &(f, a)) in self.fact_insts.iter().enumerate() {
            if keep_facts[i] {
                let atom = id_of(a, &self.store, &mut atoms);
                out.facts.push(GroundFact {
                    label: self.program.facts[f].label,
                    atom,
                });
            }
        }
        for (i, inst) in self.ad_insts.iter().enumerate() {
            let Some(rel) = &keep_ads[i] else { continue };
            let Some(body) = &ad_bodies[i] else { continue };
            let mut relevant: Vec<usize> = rel.iter().copied().collect();
            relevant.sort_unstable();
            let heads = inst
                .heads
                .iter()
                .zip(&self.ads[inst.ad].heads)
                .map(|(&g, (l, _))| (*l, id_of(g, &self.store, &mut atoms)))
                .collect();
            let body = lits(body, &mut atoms, &mut id_of, &self.store);
            out.ads.push(GroundAd {
                heads,
                relevant,
                body,
            });
        }
        for (i, inst) in self.nn_insts.iter().enumerate() {
            let Some(rel) = &keep_nn[i] else { continue };
            let n = &self.neural[inst.nn];
            let inputs = inst.inputs.iter().map(|&g| self.store.to_term(g)).collect();
            let kind = match &n.domain {
                Some(dom) => {
                    let mut relevant: Vec<usize> = rel.iter().copied().collect();
                    relevant.sort_unstable();
                    // Values that cannot produce a head never enter the
                    // ground program; their head slots point at the first
                    // real head and are never marked relevant.
                    let fallback = inst.heads.iter().flatten().next().copied();
                    let heads = inst
                        .heads
                        .iter()
                        .map(|h| id_of(h.or(fallback).expect("some head"), &self.store, &mut atoms))
                        .collect();
                    NeuralKind::Ad {
                        domain: dom.iter().map(|&g| self.store.to_term(g)).collect(),
                        heads,
                        relevant,
                    }
                }
                None => NeuralKind::Fact {
                    atom: id_of(inst.heads[0].expect("head"), &self.store, &mut atoms),
                },
            };
            out.neural.push(GroundNeural {
                model: n.model.clone(),
                inputs,
                kind,
            });
        }
        out.queries = roots.iter().map(|&g| id_of(g, &self.store, &mut atoms)).collect();
        out.atoms = atoms;
        check_acyclic(&out)?;
        Ok(out)
    }

    fn simplify(
        &mut self,
        defs: &FxMap<GId, Vec<Def>>,
        rule_bodies: &mut [Option<Vec<(GId, bool)>>],
        ad_bodies: &mut [Option<Vec<(GId, bool)>>],
        certain: &mut FxSet<GId>,
    ) {
        let possible = |a: &GId, rb: &[Option<Vec<(GId, bool)>>], ab: &[Option<Vec<(GId, bool)>>]| {
            defs.get(a).is_some_and(|ds| {
                ds.iter().any(|d| match d {
                    Def::Rule(i) => rb[*i].is_some(),
                    Def::AdHead(i, _) => ab[*i].is_some(),
                    _ => true,
                })
            })
        };
        loop {
            let mut changed = false;
            for i in 0..rule_bodies.len() {
                let Some(body) = &rule_bodies[i] else { continue };
                let mut dead = false;
                let mut new_body = Vec::with_capacity(body.len());
                for &(a, positive) in body {
                    let is_certain = certain.contains(&a);
                    let is_possible = possible(&a, rule_bodies, ad_bodies);
                    match (positive, is_certain, is_possible) {
                        (true, true, _) => {}
                        (true, _, false) => dead = true,
                        (false, true, _) => dead = true,
                        (false, _, false) => {}
                        _ => new_body.push((a, positive)),
                    }
                }
                if dead {
                    rule_bodies[i] = None;
                    changed = true;
                } else {
                    if new_body.is_empty() && certain.insert(self.rules[i].0) {
                        changed = true;
                    }
                    if new_body.len() != rule_bodies[i].as_ref().unwrap().len() {
                        rule_bodies[i] = Some(new_body);
                        changed = true;
                    }
                }
            }
            for i in 0..ad_bodies.len() {
                let Some(body) = &ad_bodies[i] else { continue };
                let mut dead = false;
                let mut new_body = Vec::with_capacity(body.len());
                for &(a, positive) in body {
                    let is_certain = certain.contains(&a);
                    let is_possible = possible(&a, rule_bodies, ad_bodies);
                    match (positive, is_certain, is_possible) {
                        (true, true, _) => {}
                        (true, _, false) => dead = true,
                        (false, true, _) => dead = true,
                        (false, _, false) => {}
                        _ => new_body.push((a, positive)),
                    }
                }
                if dead {
                    ad_bodies[i] = None;
                    changed = true;
                } else if new_body.len() != ad_bodies[i].as_ref().unwrap().len() {
                    ad_bodies[i] = Some(new_body);
                    changed = true;
                }
            }
            if !changed {
                return;
            }
        }
    }
}

/// Rejects ground programs whose dependency graph has a cycle.
fn check_acyclic(g: &GroundProgram) -> R<()> {
    let n = g.atoms.len();
    let mut edges: Vec<Vec<AtomId>> = vec![Vec::new(); n];
    for r in &g.rules {
        edges[r.head as usize].extend(r.body.iter().map(|l| l.atom));
    }
    for ad in &g.ads {
        for &j in &ad.relevant {
            edges[ad.heads[j].1 as usize].extend(ad.body.iter().map(|l| l.atom));
        }
    }
    // 0 = unseen, 1 = on the stack, 2 = done.
    let mut color = vec![0u8; n];
    for start in 0..n {
        if color[start] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        color[start] = 1;
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            if *i < edges[v].len() {
                let w = edges[v][*i] as usize;
                *i += 1;
                match color[w] {
                    0 => {
                        color[w] = 1;
                        stack.push((w, 0));
                    }
                    1 => {
                        return Err(GroundError::CyclicGroundProgram {
                            atom: g.atoms[w].to_string(),
                        })
                    }
                    _ => {}
                }
            } else {
                color[v] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}
