use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rustc_hash::FxBuildHasher;

use super::circuit::{Circuit, Node, NodeId, FALSE_NODE, TRUE_NODE};
use super::formula::{FId, FNode, Formula, FALSE, TRUE};
use super::{CompileError, CompileOptions, VarId, VarOrder};

struct Builder<'f> {
    f: &'f mut Formula,
    nodes: Vec<Node>,
    unique: HashMap<Node, NodeId, FxBuildHasher>,
    memo: HashMap<FId, NodeId, FxBuildHasher>,
    /// Position of each variable in the branching order.
    rank: Vec<u32>,
    max_nodes: usize,
}

/// Compiles the formulas `roots` into one circuit with shared nodes.
pub fn compile(f: &mut Formula, roots: &[FId], options: &CompileOptions) -> Result<Circuit, CompileError> {
    let rank = ranking(f, roots, options.order);
    let mut b = Builder {
        f,
        nodes: vec![Node::TrueLeaf, Node::FalseLeaf],
        unique: HashMap::default(),
        memo: HashMap::default(),
        rank,
        max_nodes: options.max_nodes,
    };
    b.memo.insert(TRUE, TRUE_NODE);
    b.memo.insert(FALSE, FALSE_NODE);
    let mut out = Vec::with_capacity(roots.len());
    for &r in roots {
        out.push(b.build(r)?);
    }
    let circuit = Circuit {
        nodes: b.nodes,
        roots: out,
        vars: b.f.vars.clone(),
        atom_names: b.f.atom_names.clone(),
    };
    #[cfg(debug_assertions)]
    if circuit.nodes.len().saturating_mul(circuit.vars.len()) <= 4_000_000 {
        if let Err(e) = circuit.check_structure() {
            panic!("compiled circuit is malformed: {e}");
        }
    }
    Ok(circuit)
}

fn ranking(f: &Formula, roots: &[FId], order: VarOrder) -> Vec<u32> {
    let first = f.first_appearance(roots);
    let mut seq = first.clone();
    if order == VarOrder::MostOccurring {
        let counts = f.occurrences(roots);
        // Stable sort keeps first-appearance order among equal counts.
        seq.sort_by_key(|v| core::cmp::Reverse(counts[*v as usize]));
    }
    let mut rank = vec![u32::MAX; f.vars.len()];
    for (i, v) in seq.iter().enumerate() {
        rank[*v as usize] = i as u32;
    }
    rank
}

impl Builder<'_> {
    fn add(&mut self, n: Node) -> Result<NodeId, CompileError> {
        if let Some(&id) = self.unique.get(&n) {
            return Ok(id);
        }
        if self.nodes.len() >= self.max_nodes {
            return Err(CompileError::BlowupLimit { limit: self.max_nodes });
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push(n.clone());
        self.unique.insert(n, id);
        Ok(id)
    }

    fn build(&mut self, id: FId) -> Result<NodeId, CompileError> {
        if let Some(&n) = self.memo.get(&id) {
            return Ok(n);
        }
        if self.f.len() > self.max_nodes {
            return Err(CompileError::BlowupLimit { limit: self.max_nodes });
        }
        let n = match self.f.node(id).clone() {
            FNode::And(cs) => match self.components(&cs) {
                Some(groups) => {
                    let mut parts = Vec::with_capacity(groups.len());
                    for g in groups {
                        let sub = self.f.and(g);
                        let c = self.build(sub)?;
                        if c == FALSE_NODE {
                            parts.clear();
                            parts.push(FALSE_NODE);
                            break;
                        }
                        if c != TRUE_NODE {
                            parts.push(c);
                        }
                    }
                    match parts.len() {
                        0 => TRUE_NODE,
                        1 => parts[0],
                        _ => {
                            parts.sort_unstable();
                            self.add(Node::Product(parts.into()))?
                        }
                    }
                }
                None => self.expand(id)?,
            },
            _ => self.expand(id)?,
        };
        self.memo.insert(id, n);
        Ok(n)
    }

    /// Shannon expansion on the earliest-ranked variable of the support.
    fn expand(&mut self, id: FId) -> Result<NodeId, CompileError> {
        let support = self.f.support(id);
        let var = *support
            .iter()
            .min_by_key(|v| (self.rank[**v as usize], **v))
            .expect("non-constant formula has a variable");
        let arity = self.f.vars[var as usize].values.len() as u32;
        let mut children = Vec::with_capacity(arity as usize);
        for k in 0..arity {
            let sub = self.f.condition(id, var, k);
            children.push(self.build(sub)?);
        }
        if children.iter().all(|c| *c == children[0]) {
            return Ok(children[0]);
        }
        self.add(Node::Decision {
            var,
            children: children.into(),
        })
    }

    /// Groups of conjuncts with pairwise disjoint supports, or `None` when
    /// the conjunction does not split.
    fn components(&mut self, cs: &[FId]) -> Option<Vec<Vec<FId>>> {
        let supports: Vec<_> = cs.iter().map(|c| self.f.support(*c)).collect();
        let mut parent: Vec<usize> = (0..cs.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut owner: HashMap<VarId, usize, FxBuildHasher> = HashMap::default();
        for (i, s) in supports.iter().enumerate() {
            for v in s.iter() {
                match owner.get(v) {
                    Some(&j) => {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                    None => {
                        owner.insert(*v, i);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<FId>> = Vec::new();
        let mut slot: HashMap<usize, usize, FxBuildHasher> = HashMap::default();
        for (i, c) in cs.iter().enumerate() {
            let r = find(&mut parent, i);
            let g = *slot.entry(r).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(*c);
        }
        (groups.len() > 1).then_some(groups)
    }
}
