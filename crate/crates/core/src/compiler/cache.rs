use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rustc_hash::FxBuildHasher;

use crate::syntax::{Atom, Term};

/// Constant standing for the `index`-th dataset key of an abstracted query.
pub fn placeholder(index: usize) -> Term {
    Term::atom(&format!("$key{index}"))
}

fn placeholder_index(t: &Term) -> Option<usize> {
    match t {
        Term::Atom(a) => a.strip_prefix("$key")?.parse().ok(),
        _ => None,
    }
}

/// Replaces every subterm accepted by `is_key` with a placeholder. Equal
/// keys share one placeholder. Returns the skeleton and the keys in
/// placeholder order.
pub fn abstract_query(query: &Atom, is_key: &dyn Fn(&Term) -> bool) -> (Atom, Vec<Term>) {
    fn walk(t: &Term, is_key: &dyn Fn(&Term) -> bool, keys: &mut Vec<Term>) -> Term {
        if is_key(t) {
            let i = match keys.iter().position(|k| k == t) {
                Some(i) => i,
                None => {
                    keys.push(t.clone());
                    keys.len() - 1
                }
            };
            return placeholder(i);
        }
        match t {
            Term::Compound(f, args) => Term::Compound(f.clone(), args.iter().map(|a| walk(a, is_key, keys)).collect()),
            _ => t.clone(),
        }
    }
    let mut keys = Vec::new();
    let args = query.args.iter().map(|a| walk(a, is_key, &mut keys)).collect();
    (
        Atom {
            predicate: query.predicate.clone(),
            args,
        },
        keys,
    )
}

/// Substitutes the keys back for placeholders.
pub fn instantiate(t: &Term, keys: &[Term]) -> Term {
    if let Some(i) = placeholder_index(t) {
        if let Some(k) = keys.get(i) {
            return k.clone();
        }
    }
    match t {
        Term::Compound(f, args) => Term::Compound(f.clone(), args.iter().map(|a| instantiate(a, keys)).collect()),
        _ => t.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub skeleton: Atom,
    /// Fingerprint of the program the skeleton is asked against.
    pub program: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Number of times the build closure ran.
    pub compiles: u64,
}

/// Compiled artifacts keyed by abstracted query. When disabled every
/// lookup misses and nothing is stored.
#[derive(Debug)]
pub struct CircuitCache<T> {
    entries: HashMap<CacheKey, Arc<T>, FxBuildHasher>,
    enabled: bool,
    stats: CacheStats,
}

impl<T> Default for CircuitCache<T> {
    fn default() -> Self {
        Self::new(true)
    }
}

impl<T> CircuitCache<T> {
    pub fn new(enabled: bool) -> Self {
        CircuitCache {
            entries: HashMap::default(),
            enabled,
            stats: CacheStats::default(),
        }
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&mut self, key: &CacheKey) -> Option<Arc<T>> {
        let found = if self.enabled { self.entries.get(key).cloned() } else { None };
        match found {
            Some(_) => self.stats.hits += 1,
            None => self.stats.misses += 1,
        }
        found
    }

    /// Returns the stored value for `key`, building and storing it on a miss.
    pub fn get_or_build<E>(&mut self, key: CacheKey, build: impl FnOnce() -> Result<T, E>) -> Result<Arc<T>, E> {
        if let Some(v) = self.lookup(&key) {
            return Ok(v);
        }
        self.stats.compiles += 1;
        let v = Arc::new(build()?);
        if self.enabled {
            self.entries.insert(key, v.clone());
        }
        Ok(v)
    }
}
