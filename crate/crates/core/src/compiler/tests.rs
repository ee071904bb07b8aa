use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::grounder::ground_query;
use crate::semiring::{probability, TableContext};
use crate::syntax::{parse_atom, parse_program, Atom};

const ALARM: &str = include_str!("../../../../programs/alarm.pl");

fn compiled(src: &str, q: &str) -> (Formula, Circuit, TableContext) {
    let p = parse_program(src).unwrap();
    let g = ground_query(&p, &parse_atom(q).unwrap()).unwrap();
    let mut f = complete(&g).unwrap();
    let roots = f.queries.clone();
    let c = compile(&mut f, &roots, &CompileOptions::default()).unwrap();
    (f, c, TableContext::from_program(&p))
}

fn prob(src: &str, q: &str) -> f64 {
    let (_, c, ctx) = compiled(src, q);
    probability(&c, &ctx).unwrap()[0]
}

#[test]
fn alarm_completion() {
    let (f, _, _) = compiled(ALARM, "calls(mary)");
    let shown = f.display(f.queries[0]);
    let expected_parts = ["hears_alarm(mary)", "burglary", "earthquake"];
    for part in expected_parts {
        assert!(shown.contains(part), "{shown}");
    }
    let FNode::And(cs) = f.node(f.queries[0]) else {
        panic!("expected a conjunction: {shown}")
    };
    assert_eq!(cs.len(), 2);
    assert!(cs.iter().any(|c| matches!(f.node(*c), FNode::Or(inner) if inner.len() == 2)));
}

#[test]
fn alarm_probability() {
    assert!((prob(ALARM, "calls(mary)") - 0.14).abs() < 1e-12);
}

#[test]
fn true_root_is_single_leaf() {
    let (_, c, ctx) = compiled("a.", "a");
    assert_eq!(c.root(), TRUE_NODE);
    assert_eq!(probability(&c, &ctx).unwrap()[0], 1.0);
}

#[test]
fn undefined_atom_is_false() {
    let (_, c, ctx) = compiled("0.3::a.", "b");
    assert_eq!(c.root(), FALSE_NODE);
    assert_eq!(probability(&c, &ctx).unwrap()[0], 0.0);
}

#[test]
fn single_fact_is_one_decision() {
    let (_, c, ctx) = compiled("0.1::burglary.", "burglary");
    assert!(matches!(c.nodes[c.root() as usize], Node::Decision { var: 0, .. }));
    assert_eq!(c.len(), 3);
    assert!((probability(&c, &ctx).unwrap()[0] - 0.1).abs() < 1e-15);
}

#[test]
fn disjunction_head_with_rule() {
    let src = "0.3::h(a) ; 0.5::h(b). 0.4::e. h(a) :- e.";
    // P(h(a)) = 1 - (1 - 0.3)(1 - 0.4)
    assert!((prob(src, "h(a)") - (1.0 - 0.7 * 0.6)).abs() < 1e-12);
}

#[test]
fn disjunction_heads_are_exclusive() {
    let src = "0.3::h(a) ; 0.5::h(b). both :- h(a), h(b). either :- h(a). either :- h(b).";
    assert_eq!(prob(src, "both"), 0.0);
    assert!((prob(src, "either") - 0.8).abs() < 1e-12);
}

#[test]
fn negated_query_is_complement() {
    let src = format!("{ALARM}\nquiet :- \\+calls(mary).");
    assert!((prob(&src, "quiet") - 0.86).abs() < 1e-12);
}

#[test]
fn lowered_circuit_agrees() {
    let src = format!("{ALARM}\nquiet :- \\+calls(mary).");
    for q in ["calls(mary)", "quiet", "alarm"] {
        let (_, c, ctx) = compiled(&src, q);
        let low = c.lower();
        assert!(low.nodes.iter().all(|n| !matches!(n, Node::Decision { .. })));
        let a = probability(&c, &ctx).unwrap()[0];
        let b = probability(&low, &ctx).unwrap()[0];
        assert!((a - b).abs() < 1e-12, "{q}: {a} vs {b}");
        low.check_structure().unwrap();
    }
}

#[test]
fn independent_parts_become_products() {
    let src = "0.5::a. 0.5::b. 0.5::c. r :- a, b, c.";
    let (_, c, ctx) = compiled(src, "r");
    assert!(matches!(&c.nodes[c.root() as usize], Node::Product(cs) if cs.len() == 3));
    assert!((probability(&c, &ctx).unwrap()[0] - 0.125).abs() < 1e-15);
}

#[test]
fn compilation_is_deterministic() {
    let (_, a, _) = compiled(ALARM, "calls(mary)");
    let (_, b, _) = compiled(ALARM, "calls(mary)");
    assert_eq!(a, b);
    assert_eq!(a.to_dot(), b.to_dot());
}

#[test]
fn variable_orders_agree() {
    let src = include_str!("../../../../programs/poker.pl");
    let p = parse_program(src).unwrap();
    let g = ground_query(&p, &parse_atom("game([c1,c2,c3,c4],win)").unwrap()).unwrap();
    let mut ctx = TableContext::from_program(&p);
    for n in &g.neural {
        let k = match &n.kind {
            crate::grounder::NeuralKind::Ad { domain, .. } => domain.len(),
            crate::grounder::NeuralKind::Fact { .. } => 1,
        };
        ctx.set_output(&n.model, n.inputs.clone(), vec![1.0 / k as f64; k]);
    }
    let mut values = Vec::new();
    for order in [VarOrder::MostOccurring, VarOrder::FirstAppearance] {
        let mut f = complete(&g).unwrap();
        let roots = f.queries.clone();
        let c = compile(&mut f, &roots, &CompileOptions { order, ..Default::default() }).unwrap();
        values.push(probability(&c, &ctx).unwrap()[0]);
    }
    assert!((values[0] - values[1]).abs() < 1e-12, "{values:?}");
}

#[test]
fn node_budget() {
    let src = "0.5::a(1). 0.5::a(2). 0.5::a(3). 0.5::a(4). r :- a(1), a(2). r :- a(3), a(4).";
    let p = parse_program(src).unwrap();
    let g = ground_query(&p, &parse_atom("r").unwrap()).unwrap();
    let mut f = complete(&g).unwrap();
    let roots = f.queries.clone();
    let e = compile(&mut f, &roots, &CompileOptions { max_nodes: 3, ..Default::default() }).unwrap_err();
    assert_eq!(e, CompileError::BlowupLimit { limit: 3 });
}

#[test]
fn dot_dump_names_values() {
    let (_, c, _) = compiled(ALARM, "calls(mary)");
    let dot = c.lower().to_dot();
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("burglary\\n0.1"), "{dot}");
    assert!(dot.contains("¬burglary\\n1-0.1"), "{dot}");
}

fn is_image(t: &crate::syntax::Term) -> bool {
    matches!(t, crate::syntax::Term::Atom(a) if a.starts_with("img"))
}

#[test]
fn abstraction_shares_placeholders() {
    let (a, ka) = abstract_query(&parse_atom("addition(img1,img2,8)").unwrap(), &is_image);
    let (b, kb) = abstract_query(&parse_atom("addition(img3,img4,8)").unwrap(), &is_image);
    let (c, _) = abstract_query(&parse_atom("addition(img3,img4,7)").unwrap(), &is_image);
    let (d, kd) = abstract_query(&parse_atom("addition(img5,img5,8)").unwrap(), &is_image);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
    assert_eq!(kd.len(), 1);
    assert_eq!(ka.len(), 2);
    assert_eq!(instantiate(&b.to_term(), &kb), parse_atom("addition(img3,img4,8)").unwrap().to_term());
}

#[test]
fn cache_counts_hits() {
    let mut cache: CircuitCache<u32> = CircuitCache::default();
    let key = |q: &str| CacheKey {
        skeleton: abstract_query(&parse_atom(q).unwrap(), &is_image).0,
        program: 7,
    };
    for q in ["addition(img1,img2,8)", "addition(img1,img2,8)", "addition(img3,img4,8)", "addition(img3,img4,7)"] {
        cache.get_or_build(key(q), || Ok::<_, ()>(1)).unwrap();
    }
    let s = cache.stats();
    assert_eq!((s.hits, s.misses, s.compiles), (2, 2, 2));

    let mut off: CircuitCache<u32> = CircuitCache::new(false);
    for _ in 0..3 {
        off.get_or_build(key("addition(img1,img2,8)"), || Ok::<_, ()>(1)).unwrap();
    }
    assert_eq!(off.stats().compiles, 3);
    assert!(off.is_empty());
}

#[test]
fn cached_skeleton_compiles_like_the_original() {
    let src = include_str!("../../../../programs/addition.pl");
    let p = parse_program(src).unwrap();
    let (skeleton, keys) = abstract_query(&parse_atom("addition(img1,img2,1)").unwrap(), &is_image);
    let g = ground_query(&p, &skeleton).unwrap();
    let f = complete(&g).unwrap();
    let inputs: Vec<Atom> = g.neural.iter().map(|n| Atom::new("x", n.inputs.clone())).collect();
    assert_eq!(inputs.len(), 2);
    for (n, key) in g.neural.iter().zip(&keys) {
        assert_eq!(&instantiate(&n.inputs[0], &keys), key);
    }
    assert_eq!(f.queries.len(), 1);
}
