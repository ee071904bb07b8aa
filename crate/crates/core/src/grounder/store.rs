//! Interned symbols and hash-consed ground terms.

use alloc::boxed::Box;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rustc_hash::FxBuildHasher;

use crate::syntax::{Symbol, Term};

pub(crate) type FxMap<K, V> = HashMap<K, V, FxBuildHasher>;
pub(crate) type FxSet<K> = hashbrown::HashSet<K, FxBuildHasher>;

pub(crate) type SymId = u32;
/// Id of an interned ground term.
pub(crate) type GId = u32;

#[derive(Default)]
pub(crate) struct Symbols {
    names: Vec<Symbol>,
    index: FxMap<Symbol, SymId>,
}

impl Symbols {
    pub fn intern(&mut self, s: &Symbol) -> SymId {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.names.len() as SymId;
        self.names.push(s.clone());
        self.index.insert(s.clone(), id);
        id
    }

    pub fn name(&self, id: SymId) -> &Symbol {
        &self.names[id as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum GNode {
    Atom(SymId),
    Int(i64),
    App(SymId, Box<[GId]>),
}

#[derive(Default)]
pub(crate) struct GStore {
    pub syms: Symbols,
    nodes: Vec<GNode>,
    index: FxMap<GNode, GId>,
}

impl GStore {
    pub fn intern(&mut self, node: GNode) -> GId {
        if let Some(&id) = self.index.get(&node) {
            return id;
        }
        let id = self.nodes.len() as GId;
        self.nodes.push(node.clone());
        self.index.insert(node, id);
        id
    }

    pub fn node(&self, id: GId) -> &GNode {
        &self.nodes[id as usize]
    }

    pub fn intern_term(&mut self, t: &Term) -> Option<GId> {
        let node = match t {
            Term::Var(_) => return None,
            Term::Atom(a) => GNode::Atom(self.syms.intern(a)),
            Term::Int(i) => GNode::Int(*i),
            Term::Compound(f, args) => {
                let f = self.syms.intern(f);
                let args = args
                    .iter()
                    .map(|a| self.intern_term(a))
                    .collect::<Option<Box<[GId]>>>()?;
                GNode::App(f, args)
            }
        };
        Some(self.intern(node))
    }

    pub fn to_term(&self, id: GId) -> Term {
        match self.node(id) {
            GNode::Atom(a) => Term::Atom(self.syms.name(*a).clone()),
            GNode::Int(i) => Term::Int(*i),
            GNode::App(f, args) => Term::Compound(
                self.syms.name(*f).clone(),
                args.iter().map(|&a| self.to_term(a)).collect(),
            ),
        }
    }

    /// Arguments of an atom-shaped ground term.
    pub fn args(&self, id: GId) -> &[GId] {
        match self.node(id) {
            GNode::App(_, args) => args,
            _ => &[],
        }
    }
}
