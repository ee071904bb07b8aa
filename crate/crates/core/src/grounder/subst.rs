use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::syntax::{Symbol, Term};

/// Variable bindings, kept idempotent: no bound value mentions a bound
/// variable.
pub type Substitution = BTreeMap<Symbol, Term>;

/// Applies `s` to `t` exhaustively.
pub fn apply(t: &Term, s: &Substitution) -> Term {
    match t {
        Term::Var(v) => match s.get(v) {
            Some(b) => apply(b, s),
            None => t.clone(),
        },
        Term::Compound(f, args) => Term::Compound(f.clone(), args.iter().map(|a| apply(a, s)).collect()),
        _ => t.clone(),
    }
}

fn occurs(v: &Symbol, t: &Term) -> bool {
    match t {
        Term::Var(w) => v == w,
        Term::Compound(_, args) => args.iter().any(|a| occurs(v, a)),
        _ => false,
    }
}

/// Most general unifier of `a` and `b` extending `s`, with occurs check.
pub fn unify(a: &Term, b: &Term, s: &Substitution) -> Option<Substitution> {
    let mut s = s.clone();
    let mut work: Vec<(Term, Term)> = alloc::vec![(a.clone(), b.clone())];
    while let Some((x, y)) = work.pop() {
        let x = apply(&x, &s);
        let y = apply(&y, &s);
        match (x, y) {
            (Term::Var(v), Term::Var(w)) if v == w => {}
            (Term::Var(v), t) | (t, Term::Var(v)) => {
                if occurs(&v, &t) {
                    return None;
                }
                let single: Substitution = [(v.clone(), t.clone())].into_iter().collect();
                for val in s.values_mut() {
                    *val = apply(val, &single);
                }
                s.insert(v, t);
            }
            (Term::Compound(f, xs), Term::Compound(g, ys)) => {
                if f != g || xs.len() != ys.len() {
                    return None;
                }
                work.extend(xs.into_iter().zip(ys));
            }
            (x, y) => {
                if x != y {
                    return None;
                }
            }
        }
    }
    Some(s)
}
