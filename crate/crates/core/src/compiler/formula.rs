use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use hashbrown::HashMap;
use rustc_hash::FxBuildHasher;

use super::{ChoiceKind, ChoiceValue, ChoiceVariable, CompileError, LeafSource, VarId};
use crate::grounder::{AtomId, GroundLiteral, GroundProgram, NeuralKind};
use crate::syntax::ProbLabel;

/// Index of a formula node.
pub type FId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FNode {
    True,
    False,
    /// The choice variable takes the given value.
    Test(VarId, u32),
    Not(FId),
    And(Box<[FId]>),
    Or(Box<[FId]>),
}

pub(crate) const TRUE: FId = 0;
pub(crate) const FALSE: FId = 1;

/// Propositional definition of the queries over choice variables. Nodes
/// are hash-consed, so equal subformulas share one id.
pub struct Formula {
    nodes: Vec<FNode>,
    index: HashMap<FNode, FId, FxBuildHasher>,
    supports: Vec<Option<Rc<[VarId]>>>,
    pub vars: Vec<ChoiceVariable>,
    /// One formula per query atom of the ground program.
    pub queries: Vec<FId>,
    pub(crate) atom_names: Vec<String>,
}

impl Formula {
    fn new() -> Self {
        let mut f = Formula {
            nodes: Vec::new(),
            index: HashMap::default(),
            supports: Vec::new(),
            vars: Vec::new(),
            queries: Vec::new(),
            atom_names: Vec::new(),
        };
        f.intern(FNode::True);
        f.intern(FNode::False);
        f
    }

    pub fn node(&self, id: FId) -> &FNode {
        &self.nodes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 2
    }

    fn intern(&mut self, n: FNode) -> FId {
        if let Some(&id) = self.index.get(&n) {
            return id;
        }
        let id = self.nodes.len() as FId;
        self.nodes.push(n.clone());
        self.supports.push(None);
        self.index.insert(n, id);
        id
    }

    pub fn test(&mut self, var: VarId, value: u32) -> FId {
        self.intern(FNode::Test(var, value))
    }

    pub fn not(&mut self, a: FId) -> FId {
        match self.nodes[a as usize] {
            FNode::True => FALSE,
            FNode::False => TRUE,
            FNode::Not(b) => b,
            _ => self.intern(FNode::Not(a)),
        }
    }

    pub fn and(&mut self, children: impl IntoIterator<Item = FId>) -> FId {
        let mut cs = Vec::new();
        for c in children {
            match &self.nodes[c as usize] {
                FNode::False => return FALSE,
                FNode::True => {}
                FNode::And(inner) => cs.extend(inner.iter().copied()),
                _ => cs.push(c),
            }
        }
        cs.sort_unstable();
        cs.dedup();
        match cs.len() {
            0 => TRUE,
            1 => cs[0],
            _ => self.intern(FNode::And(cs.into())),
        }
    }

    pub fn or(&mut self, children: impl IntoIterator<Item = FId>) -> FId {
        let mut cs = Vec::new();
        for c in children {
            match &self.nodes[c as usize] {
                FNode::True => return TRUE,
                FNode::False => {}
                FNode::Or(inner) => cs.extend(inner.iter().copied()),
                _ => cs.push(c),
            }
        }
        cs.sort_unstable();
        cs.dedup();
        match cs.len() {
            0 => FALSE,
            1 => cs[0],
            _ => self.intern(FNode::Or(cs.into())),
        }
    }

    /// Choice variables the formula depends on, sorted.
    pub fn support(&mut self, id: FId) -> Rc<[VarId]> {
        if let Some(s) = &self.supports[id as usize] {
            return s.clone();
        }
        // Iterative post-order so deep formulas do not exhaust the stack.
        let mut stack = vec![(id, false)];
        while let Some((n, expanded)) = stack.pop() {
            if self.supports[n as usize].is_some() {
                continue;
            }
            let children: Vec<FId> = match &self.nodes[n as usize] {
                FNode::Not(a) => vec![*a],
                FNode::And(cs) | FNode::Or(cs) => cs.to_vec(),
                _ => Vec::new(),
            };
            if !expanded {
                stack.push((n, true));
                stack.extend(
                    children
                        .iter()
                        .filter(|c| self.supports[**c as usize].is_none())
                        .map(|c| (*c, false)),
                );
                continue;
            }
            let s: Rc<[VarId]> = match &self.nodes[n as usize] {
                FNode::True | FNode::False => Rc::from(Vec::new()),
                FNode::Test(v, _) => Rc::from(vec![*v]),
                FNode::Not(a) => self.supports[*a as usize].clone().expect("child support"),
                _ => {
                    let mut all: Vec<VarId> = children
                        .iter()
                        .flat_map(|c| self.supports[*c as usize].as_ref().expect("child support").iter().copied())
                        .collect();
                    all.sort_unstable();
                    all.dedup();
                    Rc::from(all)
                }
            };
            self.supports[n as usize] = Some(s);
        }
        self.supports[id as usize].clone().expect("support")
    }

    /// The formula with `var` fixed to `value`.
    pub fn condition(&mut self, id: FId, var: VarId, value: u32) -> FId {
        let mut memo: HashMap<FId, FId, FxBuildHasher> = HashMap::default();
        self.condition_rec(id, var, value, &mut memo)
    }

    fn condition_rec(
        &mut self,
        id: FId,
        var: VarId,
        value: u32,
        memo: &mut HashMap<FId, FId, FxBuildHasher>,
    ) -> FId {
        if self.support(id).binary_search(&var).is_err() {
            return id;
        }
        if let Some(&r) = memo.get(&id) {
            return r;
        }
        let r = match self.nodes[id as usize].clone() {
            FNode::Test(v, k) => {
                debug_assert_eq!(v, var);
                if k == value {
                    TRUE
                } else {
                    FALSE
                }
            }
            FNode::Not(a) => {
                let c = self.condition_rec(a, var, value, memo);
                self.not(c)
            }
            FNode::And(cs) => {
                let mut out = Vec::with_capacity(cs.len());
                for &c in cs.iter() {
                    let r = self.condition_rec(c, var, value, memo);
                    if r == FALSE {
                        memo.insert(id, FALSE);
                        return FALSE;
                    }
                    out.push(r);
                }
                self.and(out)
            }
            FNode::Or(cs) => {
                let mut out = Vec::with_capacity(cs.len());
                for &c in cs.iter() {
                    let r = self.condition_rec(c, var, value, memo);
                    if r == TRUE {
                        memo.insert(id, TRUE);
                        return TRUE;
                    }
                    out.push(r);
                }
                self.or(out)
            }
            FNode::True | FNode::False => id,
        };
        memo.insert(id, r);
        r
    }

    /// Choice variables in order of first appearance in a depth-first walk
    /// from `roots`.
    pub fn first_appearance(&self, roots: &[FId]) -> Vec<VarId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut var_seen = vec![false; self.vars.len()];
        let mut order = Vec::new();
        let mut stack: Vec<FId> = roots.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            if core::mem::replace(&mut seen[n as usize], true) {
                continue;
            }
            match &self.nodes[n as usize] {
                FNode::Test(v, _) => {
                    if !core::mem::replace(&mut var_seen[*v as usize], true) {
                        order.push(*v);
                    }
                }
                FNode::Not(a) => stack.push(*a),
                FNode::And(cs) | FNode::Or(cs) => stack.extend(cs.iter().rev()),
                _ => {}
            }
        }
        order
    }

    /// Number of distinct test nodes per variable reachable from `roots`.
    pub fn occurrences(&self, roots: &[FId]) -> Vec<u32> {
        let mut seen = vec![false; self.nodes.len()];
        let mut counts = vec![0u32; self.vars.len()];
        let mut stack: Vec<FId> = roots.to_vec();
        while let Some(n) = stack.pop() {
            if core::mem::replace(&mut seen[n as usize], true) {
                continue;
            }
            match &self.nodes[n as usize] {
                FNode::Test(v, _) => counts[*v as usize] += 1,
                FNode::Not(a) => stack.push(*a),
                FNode::And(cs) | FNode::Or(cs) => stack.extend(cs.iter()),
                _ => {}
            }
        }
        counts
    }

    /// Readable rendering with `∧`, `∨` and `¬`; tests print the chosen
    /// head, or `var=k` for residual values.
    pub fn display(&self, id: FId) -> String {
        let mut s = String::new();
        self.write(&mut s, id, true);
        s
    }

    fn write(&self, out: &mut String, id: FId, top: bool) {
        match &self.nodes[id as usize] {
            FNode::True => out.push_str("true"),
            FNode::False => out.push_str("false"),
            FNode::Test(v, k) => {
                let var = &self.vars[*v as usize];
                match (&var.kind, &var.values[*k as usize].atom) {
                    (ChoiceKind::Fact | ChoiceKind::NeuralFact, _) if *k == 1 => {
                        let name = var.values[0].atom.map(|a| self.atom_names[a as usize].as_str());
                        let _ = write!(out, "¬{}", name.unwrap_or("?"));
                    }
                    (_, Some(a)) => out.push_str(&self.atom_names[*a as usize]),
                    (_, None) => {
                        let _ = write!(out, "c{v}={k}");
                    }
                }
            }
            FNode::Not(a) => {
                out.push('¬');
                self.write(out, *a, false);
            }
            FNode::And(cs) | FNode::Or(cs) => {
                let sep = if matches!(self.nodes[id as usize], FNode::And(_)) {
                    " ∧ "
                } else {
                    " ∨ "
                };
                if !top {
                    out.push('(');
                }
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(sep);
                    }
                    self.write(out, *c, false);
                }
                if !top {
                    out.push(')');
                }
            }
        }
    }
}

struct Completion<'g> {
    g: &'g GroundProgram,
    f: Formula,
    /// Per atom: defining rules, and the (variable, value) tests that make
    /// it true together with the disjunction whose body guards the test.
    rules_of: Vec<Vec<usize>>,
    tests_of: Vec<Vec<(VarId, u32, Option<usize>)>>,
    defs: Vec<Option<FId>>,
}

fn label_source(l: &ProbLabel) -> LeafSource {
    LeafSource::Prob(*l)
}

/// Clark completion of a ground program: every derived atom becomes the
/// disjunction of its rule bodies and of the choice values that make it
/// true, with definitions of other atoms substituted in.
pub fn complete(g: &GroundProgram) -> Result<Formula, CompileError> {
    let n = g.atoms.len();
    let mut c = Completion {
        g,
        f: Formula::new(),
        rules_of: vec![Vec::new(); n],
        tests_of: vec![Vec::new(); n],
        defs: vec![None; n],
    };
    c.f.atom_names = g.atoms.iter().map(ToString::to_string).collect();
    for (i, r) in g.rules.iter().enumerate() {
        c.rules_of[r.head as usize].push(i);
    }
    for fact in &g.facts {
        let v = c.f.vars.len() as VarId;
        let src = label_source(&fact.label);
        c.f.vars.push(ChoiceVariable {
            kind: ChoiceKind::Fact,
            values: vec![
                ChoiceValue {
                    atom: Some(fact.atom),
                    source: src.clone(),
                },
                ChoiceValue {
                    atom: None,
                    source: LeafSource::Residual(vec![src]),
                },
            ],
        });
        c.tests_of[fact.atom as usize].push((v, 0, None));
    }
    for (i, ad) in g.ads.iter().enumerate() {
        let v = c.f.vars.len() as VarId;
        let mut values: Vec<ChoiceValue> = ad
            .relevant
            .iter()
            .map(|&j| ChoiceValue {
                atom: Some(ad.heads[j].1),
                source: label_source(&ad.heads[j].0),
            })
            .collect();
        let learnable = ad
            .relevant
            .iter()
            .any(|&j| matches!(ad.heads[j].0, ProbLabel::Learnable { .. }));
        let mass: f64 = ad.relevant.iter().map(|&j| ad.heads[j].0.initial()).sum();
        if learnable || 1.0 - mass > 0.0 {
            let parts = values.iter().map(|v| v.source.clone()).collect();
            values.push(ChoiceValue {
                atom: None,
                source: LeafSource::Residual(parts),
            });
        }
        for (k, &j) in ad.relevant.iter().enumerate() {
            c.tests_of[ad.heads[j].1 as usize].push((v, k as u32, Some(i)));
        }
        c.f.vars.push(ChoiceVariable {
            kind: ChoiceKind::Ad,
            values,
        });
    }
    for nn in &g.neural {
        let v = c.f.vars.len() as VarId;
        match &nn.kind {
            NeuralKind::Ad { heads, relevant, .. } => {
                let mut values: Vec<ChoiceValue> = relevant
                    .iter()
                    .map(|&k| ChoiceValue {
                        atom: Some(heads[k]),
                        source: LeafSource::Neural {
                            model: nn.model.clone(),
                            inputs: nn.inputs.clone(),
                            output: Some(k),
                        },
                    })
                    .collect();
                let parts = values.iter().map(|v| v.source.clone()).collect();
                values.push(ChoiceValue {
                    atom: None,
                    source: LeafSource::Residual(parts),
                });
                for (i, &k) in relevant.iter().enumerate() {
                    c.tests_of[heads[k] as usize].push((v, i as u32, None));
                }
                c.f.vars.push(ChoiceVariable {
                    kind: ChoiceKind::NeuralAd,
                    values,
                });
            }
            NeuralKind::Fact { atom } => {
                let src = LeafSource::Neural {
                    model: nn.model.clone(),
                    inputs: nn.inputs.clone(),
                    output: None,
                };
                c.f.vars.push(ChoiceVariable {
                    kind: ChoiceKind::NeuralFact,
                    values: vec![
                        ChoiceValue {
                            atom: Some(*atom),
                            source: src.clone(),
                        },
                        ChoiceValue {
                            atom: None,
                            source: LeafSource::Residual(vec![src]),
                        },
                    ],
                });
                c.tests_of[*atom as usize].push((v, 0, None));
            }
        }
    }
    let mut queries = Vec::with_capacity(g.queries.len());
    for &q in &g.queries {
        queries.push(c.definition(q)?);
    }
    c.f.queries = queries;
    Ok(c.f)
}

impl Completion<'_> {
    fn literals(&mut self, body: &[GroundLiteral]) -> Vec<(AtomId, bool)> {
        body.iter().map(|l| (l.atom, l.positive)).collect()
    }

    /// Definition of `root`, computed bottom-up with an explicit stack.
    fn definition(&mut self, root: AtomId) -> Result<FId, CompileError> {
        // 0 = unvisited, 1 = in progress, 2 = done.
        let mut state = vec![0u8; self.g.atoms.len()];
        for (i, d) in self.defs.iter().enumerate() {
            if d.is_some() {
                state[i] = 2;
            }
        }
        let mut stack: Vec<(AtomId, bool)> = vec![(root, false)];
        while let Some((a, ready)) = stack.pop() {
            let ai = a as usize;
            if state[ai] == 2 {
                continue;
            }
            let deps = self.dependencies(a);
            if !ready {
                if state[ai] == 1 {
                    return Err(CompileError::CyclicGroundProgram {
                        atom: self.f.atom_names[ai].clone(),
                    });
                }
                state[ai] = 1;
                stack.push((a, true));
                for d in deps {
                    match state[d as usize] {
                        0 => stack.push((d, false)),
                        1 => {
                            return Err(CompileError::CyclicGroundProgram {
                                atom: self.f.atom_names[d as usize].clone(),
                            })
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if deps.iter().any(|d| state[*d as usize] != 2) {
                // A dependency was pushed after this entry; revisit later.
                stack.push((a, true));
                for d in deps {
                    if state[d as usize] == 0 {
                        stack.push((d, false));
                    }
                }
                continue;
            }
            let def = self.build(a);
            self.defs[ai] = Some(def);
            state[ai] = 2;
        }
        Ok(self.defs[root as usize].expect("definition"))
    }

    fn dependencies(&mut self, a: AtomId) -> Vec<AtomId> {
        let mut deps = Vec::new();
        for &r in &self.rules_of[a as usize] {
            deps.extend(self.g.rules[r].body.iter().map(|l| l.atom));
        }
        for &(_, _, ad) in &self.tests_of[a as usize] {
            if let Some(ad) = ad {
                deps.extend(self.g.ads[ad].body.iter().map(|l| l.atom));
            }
        }
        deps
    }

    fn lit(&mut self, atom: AtomId, positive: bool) -> FId {
        let d = self.defs[atom as usize].expect("dependency defined first");
        if positive {
            d
        } else {
            self.f.not(d)
        }
    }

    fn build(&mut self, a: AtomId) -> FId {
        let mut disjuncts = Vec::new();
        for r in self.rules_of[a as usize].clone() {
            let lits = self.literals(&self.g.rules[r].body);
            let conj: Vec<FId> = lits.into_iter().map(|(x, p)| self.lit(x, p)).collect();
            disjuncts.push(self.f.and(conj));
        }
        for (v, k, ad) in self.tests_of[a as usize].clone() {
            let t = self.f.test(v, k);
            match ad {
                Some(ad) => {
                    let lits = self.literals(&self.g.ads[ad].body);
                    let mut conj: Vec<FId> = lits.into_iter().map(|(x, p)| self.lit(x, p)).collect();
                    conj.push(t);
                    disjuncts.push(self.f.and(conj));
                }
                None => disjuncts.push(t),
            }
        }
        self.f.or(disjuncts)
    }
}
