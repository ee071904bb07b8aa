use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{ChoiceVariable, LeafSource, VarId};
use crate::syntax::ProbLabel;

pub type NodeId = u32;

pub const TRUE_NODE: NodeId = 0;
pub const FALSE_NODE: NodeId = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    TrueLeaf,
    FalseLeaf,
    /// Weight of one value of a choice variable.
    ChoiceLeaf { var: VarId, value: u32 },
    Sum(Box<[NodeId]>),
    Product(Box<[NodeId]>),
    /// Sum over the values of `var` of the value's weight times the child.
    Decision { var: VarId, children: Box<[NodeId]> },
}

/// Arithmetic circuit over choice variables. Nodes are stored children
/// first, so a forward pass over `nodes` is a valid evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub nodes: Vec<Node>,
    /// One root per compiled formula.
    pub roots: Vec<NodeId>,
    pub vars: Vec<ChoiceVariable>,
    /// Printable name of each ground atom the variables refer to.
    pub atom_names: Vec<String>,
}

impl Circuit {
    pub fn root(&self) -> NodeId {
        self.roots[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distinct (model, inputs) pairs read by neural leaves, in variable
    /// order.
    pub fn neural_calls(&self) -> Vec<(crate::syntax::Symbol, Vec<crate::syntax::Term>)> {
        let mut out: Vec<(crate::syntax::Symbol, Vec<crate::syntax::Term>)> = Vec::new();
        for v in &self.vars {
            for val in &v.values {
                if let LeafSource::Neural { model, inputs, .. } = &val.source {
                    if !out.iter().any(|(m, i)| m == model && i == inputs) {
                        out.push((model.clone(), inputs.clone()));
                    }
                }
            }
        }
        out
    }

    /// Sorted variable sets per node.
    pub fn supports(&self) -> Vec<Vec<VarId>> {
        let mut out: Vec<Vec<VarId>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let s = match n {
                Node::TrueLeaf | Node::FalseLeaf => Vec::new(),
                Node::ChoiceLeaf { var, .. } => vec![*var],
                Node::Sum(cs) | Node::Product(cs) => merge(cs.iter().map(|c| &out[*c as usize])),
                Node::Decision { var, children } => {
                    let mut s = merge(children.iter().map(|c| &out[*c as usize]));
                    if let Err(i) = s.binary_search(var) {
                        s.insert(i, *var);
                    }
                    s
                }
            };
            out.push(s);
        }
        out
    }

    /// Checks decomposability of products and that no decision re-tests a
    /// variable decided above it.
    pub fn check_structure(&self) -> Result<(), String> {
        let sup = self.supports();
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                Node::Product(cs) => {
                    let mut seen: Vec<VarId> = Vec::new();
                    for c in cs.iter() {
                        for v in &sup[*c as usize] {
                            if seen.contains(v) {
                                return Err(alloc::format!("product {i} shares variable {v}"));
                            }
                        }
                        seen.extend(&sup[*c as usize]);
                    }
                }
                Node::Decision { var, children } => {
                    if children.len() != self.vars[*var as usize].values.len() {
                        return Err(alloc::format!("decision {i} has the wrong arity"));
                    }
                    if children.iter().any(|c| sup[*c as usize].binary_search(var).is_ok()) {
                        return Err(alloc::format!("decision {i} re-tests variable {var}"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Equivalent circuit without decision nodes: each decision becomes a
    /// sum of products of a choice leaf and a child, skipping false
    /// branches.
    pub fn lower(&self) -> Circuit {
        let mut b = Lowering {
            nodes: vec![Node::TrueLeaf, Node::FalseLeaf],
            index: hashbrown::HashMap::default(),
        };
        let mut map: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let id = match n {
                Node::TrueLeaf => TRUE_NODE,
                Node::FalseLeaf => FALSE_NODE,
                Node::ChoiceLeaf { .. } => b.add(n.clone()),
                Node::Sum(cs) => {
                    let cs: Vec<NodeId> = cs.iter().map(|c| map[*c as usize]).collect();
                    b.add(Node::Sum(cs.into()))
                }
                Node::Product(cs) => {
                    let cs: Vec<NodeId> = cs.iter().map(|c| map[*c as usize]).collect();
                    b.add(Node::Product(cs.into()))
                }
                Node::Decision { var, children } => {
                    let mut terms = Vec::new();
                    for (k, c) in children.iter().enumerate() {
                        let c = map[*c as usize];
                        if c == FALSE_NODE {
                            continue;
                        }
                        let leaf = b.add(Node::ChoiceLeaf {
                            var: *var,
                            value: k as u32,
                        });
                        terms.push(if c == TRUE_NODE {
                            leaf
                        } else {
                            b.add(Node::Product(vec![leaf, c].into()))
                        });
                    }
                    match terms.len() {
                        0 => FALSE_NODE,
                        1 => terms[0],
                        _ => b.add(Node::Sum(terms.into())),
                    }
                }
            };
            map.push(id);
        }
        Circuit {
            nodes: b.nodes,
            roots: self.roots.iter().map(|r| map[*r as usize]).collect(),
            vars: self.vars.clone(),
            atom_names: self.atom_names.clone(),
        }
    }

    /// Human-readable name of one value of a variable.
    pub fn value_name(&self, var: VarId, value: u32) -> String {
        let v = &self.vars[var as usize];
        let val = &v.values[value as usize];
        match val.atom {
            Some(a) => self.atom_names[a as usize].clone(),
            None => {
                let positive = v.values.iter().find_map(|x| x.atom);
                match (v.values.len(), positive) {
                    (2, Some(a)) => alloc::format!("¬{}", self.atom_names[a as usize]),
                    _ => alloc::format!("none#{var}"),
                }
            }
        }
    }

    fn source_text(src: &LeafSource) -> String {
        match src {
            LeafSource::Prob(ProbLabel::Fixed(p)) => alloc::format!("{p}"),
            LeafSource::Prob(ProbLabel::Learnable { init, .. }) => alloc::format!("t({init})"),
            LeafSource::Neural { model, output, .. } => match output {
                Some(k) => alloc::format!("{model}[{k}]"),
                None => alloc::format!("{model}"),
            },
            LeafSource::Residual(parts) => {
                let mut s = String::from("1");
                for p in parts {
                    s.push('-');
                    s.push_str(&Self::source_text(p));
                }
                s
            }
        }
    }

    /// Graphviz rendering. Leaves show the value name and its weight source.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph circuit {\n  node [fontname=\"monospace\"];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let (label, shape) = match n {
                Node::TrueLeaf => (String::from("⊤"), "box"),
                Node::FalseLeaf => (String::from("⊥"), "box"),
                Node::ChoiceLeaf { var, value } => {
                    let src = &self.vars[*var as usize].values[*value as usize].source;
                    (
                        alloc::format!("{}\\n{}", escape(&self.value_name(*var, *value)), escape(&Self::source_text(src))),
                        "box",
                    )
                }
                Node::Sum(_) => (String::from("⊕"), "circle"),
                Node::Product(_) => (String::from("⊗"), "circle"),
                Node::Decision { var, .. } => (alloc::format!("c{var}"), "diamond"),
            };
            let _ = writeln!(out, "  n{i} [label=\"{label}\", shape={shape}];");
            match n {
                Node::Sum(cs) | Node::Product(cs) => {
                    for c in cs.iter() {
                        let _ = writeln!(out, "  n{i} -> n{c};");
                    }
                }
                Node::Decision { var, children } => {
                    for (k, c) in children.iter().enumerate() {
                        let name = escape(&self.value_name(*var, k as u32));
                        let _ = writeln!(out, "  n{i} -> n{c} [label=\"{name}\"];");
                    }
                }
                _ => {}
            }
        }
        for (k, r) in self.roots.iter().enumerate() {
            let _ = writeln!(out, "  root{k} [shape=plaintext, label=\"root {k}\"];\n  root{k} -> n{r};");
        }
        out.push_str("}\n");
        out
    }

    /// One line per node, children before parents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = match n {
                Node::TrueLeaf => writeln!(out, "n{i} = true"),
                Node::FalseLeaf => writeln!(out, "n{i} = false"),
                Node::ChoiceLeaf { var, value } => {
                    let src = &self.vars[*var as usize].values[*value as usize].source;
                    writeln!(out, "n{i} = leaf {} : {}", self.value_name(*var, *value), Self::source_text(src))
                }
                Node::Sum(cs) => writeln!(out, "n{i} = sum {}", ids(cs)),
                Node::Product(cs) => writeln!(out, "n{i} = product {}", ids(cs)),
                Node::Decision { var, children } => {
                    let _ = write!(out, "n{i} = decide c{var}");
                    for (k, c) in children.iter().enumerate() {
                        let _ = write!(out, " [{} -> n{c}]", self.value_name(*var, k as u32));
                    }
                    writeln!(out)
                }
            };
        }
        let _ = writeln!(out, "roots {}", ids(&self.roots));
        out
    }
}

fn ids(cs: &[NodeId]) -> String {
    let mut s = String::new();
    for (i, c) in cs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "n{c}");
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn merge<'a>(sets: impl Iterator<Item = &'a Vec<VarId>>) -> Vec<VarId> {
    let mut all: Vec<VarId> = sets.flat_map(|s| s.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

struct Lowering {
    nodes: Vec<Node>,
    index: hashbrown::HashMap<Node, NodeId, rustc_hash::FxBuildHasher>,
}

impl Lowering {
    fn add(&mut self, n: Node) -> NodeId {
        if let Some(&id) = self.index.get(&n) {
            return id;
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push(n.clone());
        self.index.insert(n, id);
        id
    }
}
