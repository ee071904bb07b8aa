//! Brute-force reference semantics.
//!
//! Enumerates every combination of choices of a small ground program,
//! computes the least model of each world by fixpoint iteration and sums
//! the weights of the worlds in which a query holds. Shares no code with the
//! compiler or the semiring evaluator beyond the [`LeafContext`] lookup.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::grounder::{AtomId, GroundOptions, GroundProgram, NeuralKind};
use crate::semiring::{LeafContext, Slot};
use crate::syntax::{print_term, Atom, ParamId, ProbLabel, Program, Term};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("{worlds} worlds exceed the enumeration limit of {limit}")]
    TooManyWorlds { worlds: u128, limit: u64 },
    #[error("ground program has a cycle through negation or recursion")]
    Cyclic,
    #[error("missing value for {0}")]
    MissingValue(String),
    #[error(transparent)]
    Ground(#[from] crate::grounder::GroundError),
}

/// Default cap on the number of enumerated worlds.
pub const DEFAULT_WORLD_LIMIT: u64 = 1 << 20;

/// Step for central finite differences.
pub const FD_STEP: f64 = 1e-6;

/// One probabilistic choice: the atom each alternative makes true (`None`
/// for "nothing") and its weight.
#[derive(Clone, Debug)]
struct Choice {
    alternatives: Vec<(Option<AtomId>, f64)>,
    /// Index of the disjunction whose body guards the choice.
    guard: Option<usize>,
}

/// A possible world with its weight and least model.
#[derive(Clone, Debug)]
pub struct World {
    /// Chosen alternative per choice, in program order.
    pub choice: Vec<u32>,
    pub weight: f64,
    /// Truth value of every atom of the ground program.
    pub model: Vec<bool>,
}

struct Shifted<'a> {
    inner: &'a dyn LeafContext,
    slot: Slot,
    delta: f64,
}

impl LeafContext for Shifted<'_> {
    fn param(&self, id: ParamId) -> Option<f64> {
        let p = self.inner.param(id)?;
        Some(if self.slot == Slot::Param(id) { p + self.delta } else { p })
    }

    fn neural(&self, model: &str, inputs: &[Term], output: Option<usize>) -> Option<(f64, u32)> {
        let (p, eval) = self.inner.neural(model, inputs, output)?;
        let here = Slot::Neural {
            eval,
            output: output.unwrap_or(0) as u32,
        };
        Some((if here == self.slot { p + self.delta } else { p }, eval))
    }
}

fn label_weight(l: &ProbLabel, ctx: &dyn LeafContext) -> Result<f64, OracleError> {
    match l {
        ProbLabel::Fixed(p) => Ok(*p),
        ProbLabel::Learnable { param, .. } => ctx
            .param(*param)
            .ok_or_else(|| OracleError::MissingValue(alloc::format!("parameter {}", param.0))),
    }
}

fn neural_weight(model: &str, inputs: &[Term], k: Option<usize>, ctx: &dyn LeafContext) -> Result<f64, OracleError> {
    ctx.neural(model, inputs, k).map(|(p, _)| p).ok_or_else(|| {
        OracleError::MissingValue(alloc::format!("{model}{}", print_term(&Term::list(inputs.to_vec()))))
    })
}

fn choices(g: &GroundProgram, ctx: &dyn LeafContext) -> Result<Vec<Choice>, OracleError> {
    let mut out = Vec::new();
    for f in &g.facts {
        let p = label_weight(&f.label, ctx)?;
        out.push(Choice {
            alternatives: vec![(Some(f.atom), p), (None, 1.0 - p)],
            guard: None,
        });
    }
    for (i, ad) in g.ads.iter().enumerate() {
        let mut alts = Vec::new();
        let mut rest = 1.0;
        for &j in &ad.relevant {
            let (l, a) = &ad.heads[j];
            let p = label_weight(l, ctx)?;
            rest -= p;
            alts.push((Some(*a), p));
        }
        alts.push((None, rest));
        out.push(Choice {
            alternatives: alts,
            guard: Some(i),
        });
    }
    for n in &g.neural {
        let mut alts = Vec::new();
        match &n.kind {
            NeuralKind::Ad { heads, relevant, .. } => {
                let mut rest = 1.0;
                for &k in relevant {
                    let p = neural_weight(&n.model, &n.inputs, Some(k), ctx)?;
                    rest -= p;
                    alts.push((Some(heads[k]), p));
                }
                alts.push((None, rest));
            }
            NeuralKind::Fact { atom } => {
                let p = neural_weight(&n.model, &n.inputs, None, ctx)?;
                alts.push((Some(*atom), p));
                alts.push((None, 1.0 - p));
            }
        }
        out.push(Choice {
            alternatives: alts,
            guard: None,
        });
    }
    Ok(out)
}

/// Stratum per atom: an atom sits strictly above every atom it depends on
/// negatively and no lower than those it depends on positively.
fn strata(g: &GroundProgram) -> Result<Vec<usize>, OracleError> {
    let n = g.atoms.len();
    let mut level = vec![0usize; n];
    let mut edges: Vec<(AtomId, AtomId, bool)> = Vec::new();
    for r in &g.rules {
        for l in &r.body {
            edges.push((r.head, l.atom, l.positive));
        }
    }
    for ad in &g.ads {
        for (_, h) in &ad.heads {
            for l in &ad.body {
                edges.push((*h, l.atom, l.positive));
            }
        }
    }
    // Bellman-Ford style relaxation; more than n rounds means a cycle
    // through negation.
    for _ in 0..=n {
        let mut changed = false;
        for &(h, b, positive) in &edges {
            let need = level[b as usize] + usize::from(!positive);
            if level[h as usize] < need {
                level[h as usize] = need;
                changed = true;
            }
        }
        if !changed {
            return Ok(level);
        }
    }
    Err(OracleError::Cyclic)
}

/// Least model of the rules given the chosen alternatives.
fn least_model(g: &GroundProgram, choices: &[Choice], pick: &[u32], level: &[usize], top: usize) -> Vec<bool> {
    let mut truth = vec![false; g.atoms.len()];
    let mut guarded: Vec<(AtomId, usize)> = Vec::new();
    for (c, &k) in choices.iter().zip(pick) {
        if let (Some(a), guard) = (c.alternatives[k as usize].0, c.guard) {
            match guard {
                None => truth[a as usize] = true,
                Some(ad) => guarded.push((a, ad)),
            }
        }
    }
    let holds = |body: &[crate::grounder::GroundLiteral], truth: &[bool]| {
        body.iter().all(|l| truth[l.atom as usize] == l.positive)
    };
    for stratum in 0..=top {
        loop {
            let mut changed = false;
            for r in &g.rules {
                if level[r.head as usize] == stratum && !truth[r.head as usize] && holds(&r.body, &truth) {
                    truth[r.head as usize] = true;
                    changed = true;
                }
            }
            for &(a, ad) in &guarded {
                if level[a as usize] == stratum && !truth[a as usize] && holds(&g.ads[ad].body, &truth) {
                    truth[a as usize] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    truth
}

/// Calls `visit` on every world, in lexicographic order of choices.
pub fn for_each_world(
    g: &GroundProgram,
    ctx: &dyn LeafContext,
    limit: u64,
    mut visit: impl FnMut(&World),
) -> Result<(), OracleError> {
    let cs = choices(g, ctx)?;
    let count: u128 = cs.iter().map(|c| c.alternatives.len() as u128).product();
    if count > limit as u128 {
        return Err(OracleError::TooManyWorlds { worlds: count, limit });
    }
    let level = strata(g)?;
    let top = level.iter().copied().max().unwrap_or(0);
    let mut pick = vec![0u32; cs.len()];
    loop {
        let weight = cs
            .iter()
            .zip(&pick)
            .map(|(c, &k)| c.alternatives[k as usize].1)
            .product();
        let model = least_model(g, &cs, &pick, &level, top);
        visit(&World {
            choice: pick.clone(),
            weight,
            model,
        });
        // Odometer increment, last choice fastest.
        let mut i = cs.len();
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            pick[i] += 1;
            if (pick[i] as usize) < cs[i].alternatives.len() {
                break;
            }
            pick[i] = 0;
        }
    }
}

/// Summary of a full enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    /// Probability of each query atom of the ground program.
    pub query_probability: Vec<f64>,
    /// Sum of all world weights.
    pub total_weight: f64,
    pub worlds: u64,
}

pub fn enumerate(g: &GroundProgram, ctx: &dyn LeafContext, limit: u64) -> Result<Enumeration, OracleError> {
    let mut probs = vec![0.0; g.queries.len()];
    let mut total = 0.0;
    let mut worlds = 0;
    for_each_world(g, ctx, limit, |w| {
        total += w.weight;
        worlds += 1;
        for (p, &q) in probs.iter_mut().zip(&g.queries) {
            if w.model[q as usize] {
                *p += w.weight;
            }
        }
    })?;
    Ok(Enumeration {
        query_probability: probs,
        total_weight: total,
        worlds,
    })
}

/// Probability of each query atom of `g`.
pub fn enumerate_probability(g: &GroundProgram, ctx: &dyn LeafContext) -> Result<Vec<f64>, OracleError> {
    Ok(enumerate(g, ctx, DEFAULT_WORLD_LIMIT)?.query_probability)
}

/// Central finite difference of each query probability with respect to
/// `slot`, perturbing every leaf that reads it.
pub fn enumerate_gradient(g: &GroundProgram, ctx: &dyn LeafContext, slot: Slot) -> Result<Vec<f64>, OracleError> {
    let up = enumerate_probability(
        g,
        &Shifted {
            inner: ctx,
            slot,
            delta: FD_STEP,
        },
    )?;
    let down = enumerate_probability(
        g,
        &Shifted {
            inner: ctx,
            slot,
            delta: -FD_STEP,
        },
    )?;
    Ok(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * FD_STEP)).collect())
}

/// Grounds `query` without simplification and enumerates its worlds.
/// Returns one probability per ground instance of the query.
pub fn query_probability(p: &Program, query: &Atom, ctx: &dyn LeafContext) -> Result<Vec<f64>, OracleError> {
    let g = crate::grounder::ground_queries(p, core::slice::from_ref(query), &GroundOptions::full())?;
    enumerate_probability(&g, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounder::ground_queries;
    use crate::semiring::TableContext;
    use crate::syntax::{parse_atom, parse_program};

    const ALARM: &str = include_str!("../../../programs/alarm.pl");

    fn full(src: &str, q: &str) -> (GroundProgram, TableContext) {
        let p = parse_program(src).unwrap();
        let g = ground_queries(&p, &[parse_atom(q).unwrap()], &GroundOptions::full()).unwrap();
        (g, TableContext::from_program(&p))
    }

    #[test]
    fn alarm_world_weight() {
        // Both calls/1 instances bring every fact of the program in.
        let (g, ctx) = full(ALARM, "calls(X)");
        assert_eq!(g.facts.len(), 4);
        let burglary = g.find_atom(&parse_atom("burglary").unwrap()).unwrap();
        let hears = g.find_atom(&parse_atom("hears_alarm(mary)").unwrap()).unwrap();
        let mut found = None;
        for_each_world(&g, &ctx, DEFAULT_WORLD_LIMIT, |w| {
            let chosen: Vec<AtomId> = g.facts.iter().zip(&w.choice).filter(|(_, k)| **k == 0).map(|(f, _)| f.atom).collect();
            if chosen.len() == 2 && chosen.contains(&burglary) && chosen.contains(&hears) {
                found = Some(w.weight);
            }
        })
        .unwrap();
        assert!((found.unwrap() - 0.024).abs() < 1e-12);
    }

    #[test]
    fn alarm_query() {
        let (g, ctx) = full(ALARM, "calls(mary)");
        let e = enumerate(&g, &ctx, DEFAULT_WORLD_LIMIT).unwrap();
        assert!((e.query_probability[0] - 0.14).abs() < 1e-12);
        assert!((e.total_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alarm_gradients() {
        let src = include_str!("../../../programs/alarm_learnable.pl");
        let p = parse_program(src).unwrap();
        let g = ground_queries(&p, &[parse_atom("calls(mary)").unwrap()], &GroundOptions::full()).unwrap();
        let ctx = TableContext::from_program(&p);
        let find = |name: &str| p.params.iter().position(|x| x.name == name).unwrap() as u32;
        let de = enumerate_gradient(&g, &ctx, Slot::Param(ParamId(find("earthquake")))).unwrap()[0];
        let db = enumerate_gradient(&g, &ctx, Slot::Param(ParamId(find("burglary")))).unwrap()[0];
        assert!((de - 0.45).abs() < 1e-4, "{de}");
        assert!((db - 0.40).abs() < 1e-4, "{db}");
        let absent = enumerate_gradient(&g, &ctx, Slot::Param(ParamId(99))).unwrap()[0];
        assert_eq!(absent, 0.0);
    }

    #[test]
    fn impossible_query() {
        let (g, ctx) = full("0.5::a. r :- a, \\+a.", "r");
        assert_eq!(enumerate_probability(&g, &ctx).unwrap(), vec![0.0]);
    }

    #[test]
    fn world_limit() {
        let src = "0.5::a(1). 0.5::a(2). 0.5::a(3). r :- a(X).";
        let (g, ctx) = full(src, "r");
        let e = enumerate(&g, &ctx, 4).unwrap_err();
        assert_eq!(e, OracleError::TooManyWorlds { worlds: 8, limit: 4 });
    }

    #[test]
    fn negation_is_stratified() {
        let (g, ctx) = full("0.3::a. 0.6::b. n :- \\+a. r :- n, b.", "r");
        assert!((enumerate_probability(&g, &ctx).unwrap()[0] - 0.7 * 0.6).abs() < 1e-12);
    }
}
