use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::syntax::{parse_atom, parse_program, parse_term, sym};

const ALARM: &str = include_str!("../../../../programs/alarm.pl");
const ADDITION: &str = include_str!("../../../../programs/addition.pl");

fn ground(src: &str, q: &str) -> GroundProgram {
    let p = parse_program(src).unwrap();
    ground_query(&p, &parse_atom(q).unwrap()).unwrap_or_else(|e| panic!("{e}"))
}

fn ground_err(src: &str, q: &str) -> GroundError {
    let p = parse_program(src).unwrap();
    ground_query(&p, &parse_atom(q).unwrap()).unwrap_err()
}

#[test]
fn unify_examples() {
    let s = unify(
        &parse_term("digit(X,0)").unwrap(),
        &parse_term("digit(d0,Y)").unwrap(),
        &Substitution::new(),
    )
    .unwrap();
    assert_eq!(s.get(&sym("X")), Some(&Term::atom("d0")));
    assert_eq!(s.get(&sym("Y")), Some(&Term::Int(0)));
    assert!(unify(&parse_term("f(X)").unwrap(), &Term::var("X"), &Substitution::new()).is_none());
    assert!(unify(&Term::atom("a"), &Term::atom("a"), &Substitution::new())
        .unwrap()
        .is_empty());
}

#[test]
fn alarm_relevant_ground_program() {
    let g = ground(ALARM, "calls(mary)");
    assert_eq!(g.facts.len(), 3);
    assert_eq!(g.rules.len(), 3);
    let text = g.to_string();
    assert!(!text.contains("john"), "{text}");
    assert!(text.contains("0.5::hears_alarm(mary)."), "{text}");
    assert!(text.contains("calls(mary) :- alarm, hears_alarm(mary)."), "{text}");
    assert!(text.contains("alarm :- earthquake."), "{text}");
}

#[test]
fn addition_restricts_digits() {
    let g = ground(ADDITION, "addition(d0,d1,1)");
    assert_eq!(g.neural.len(), 2);
    for n in &g.neural {
        let NeuralKind::Ad { relevant, domain, .. } = &n.kind else {
            panic!("expected a neural disjunction")
        };
        assert_eq!(relevant, &vec![0, 1]);
        assert_eq!(domain.len(), 10);
    }
    assert_eq!(g.rules.len(), 2);
    let text = g.to_string();
    assert!(text.contains("nn(m_digit,[d0],0)::digit(d0,0) ; nn(m_digit,[d0],1)::digit(d0,1)."), "{text}");
}

#[test]
fn undefined_predicate_grounds_to_nothing() {
    let g = ground(ALARM, "nothing(here)");
    assert!(g.is_empty());
    assert_eq!(g.queries.len(), 1);
}

#[test]
fn arithmetic_builtins() {
    let g = ground("r(Z) :- Z is 3+5.", "r(Z)");
    assert_eq!(g.atom(g.queries[0]).to_string(), "r(8)");
    let g = ground("r(Z) :- Z is 4//2.", "r(Z)");
    assert_eq!(g.atom(g.queries[0]).to_string(), "r(2)");
    let g = ground("r :- 0 =:= 7 mod 2.", "r");
    assert!(g.rules.is_empty());
    let g = ground("r(Z) :- Z is -7 mod 2, Z > 0.", "r(Z)");
    assert_eq!(g.atom(g.queries[0]).to_string(), "r(1)");
}

#[test]
fn division_by_zero_fails_branch() {
    let src = "d(0). d(2). q(X) :- d(Y), Y > 0, 0 =:= 4 mod Y, X is 4//Y. r(X) :- d(Y), X is 4//Y.";
    let g = ground(src, "q(X)");
    assert_eq!(g.queries.len(), 1);
    let g = ground(src, "r(X)");
    assert_eq!(g.queries.len(), 1);
}

#[test]
fn unbound_arithmetic_is_an_error() {
    assert!(matches!(
        ground_err("r(Z) :- Z is X+1.", "r(Z)"),
        GroundError::UnboundArithmetic { .. }
    ));
    assert!(matches!(
        ground_err("r :- X > 1.", "r"),
        GroundError::UnboundArithmetic { .. }
    ));
}

#[test]
fn negation_requires_ground_goal() {
    assert!(matches!(
        ground_err("0.5::p(a). r :- \\+p(X).", "r"),
        GroundError::NonGroundNegation { .. }
    ));
}

#[test]
fn negation_of_unprovable_atom_is_dropped() {
    let g = ground("0.5::p(a). r :- p(a), \\+p(b).", "r");
    assert_eq!(g.rules.len(), 1);
    assert_eq!(g.rules[0].body.len(), 1);
}

#[test]
fn certain_atoms_are_propagated() {
    let g = ground("e(a). 0.3::p. r :- e(a), p. s :- \\+e(a), p.", "r");
    assert_eq!(g.rules[0].body.len(), 1);
    let g = ground("e(a). 0.3::p. s :- \\+e(a), p.", "s");
    assert!(g.rules.is_empty());
}

#[test]
fn depth_limit() {
    let src = "n(0). n(X) :- n(Y), X is Y+1, X < 1000000.";
    let p = parse_program(src).unwrap();
    let opts = GroundOptions {
        max_steps: 1000,
        ..GroundOptions::default()
    };
    let e = ground_queries(&p, &[parse_atom("n(5)").unwrap()], &opts).unwrap_err();
    assert!(matches!(e, GroundError::DepthLimitExceeded { .. }), "{e}");
}

#[test]
fn unbounded_recursion_hits_nesting_guard() {
    let e = ground_err("p(X) :- p(f(X)).", "p(a)");
    assert!(matches!(e, GroundError::DepthLimitExceeded { .. }), "{e}");
}

#[test]
fn cyclic_ground_program_rejected() {
    let src = "0.5::e(a,b). 0.5::e(b,a). path(X,Y) :- e(X,Y). path(X,Y) :- e(X,Z), path(Z,Y).";
    let e = ground_err(src, "path(a,b)");
    assert!(matches!(e, GroundError::CyclicGroundProgram { .. }), "{e}");
}

#[test]
fn left_recursion_on_acyclic_data() {
    let src = "0.5::e(a,b). 0.5::e(b,c). 0.5::e(c,d).\n\
               path(X,Y) :- path(X,Z), e(Z,Y).\n\
               path(X,Y) :- e(X,Y).";
    let g = ground(src, "path(a,d)");
    let text = g.to_string();
    assert!(text.contains("path(a,d) :- path(a,c), e(c,d)."), "{text}");
    assert_eq!(g.facts.len(), 3);
}

#[test]
fn non_ground_query_collects_answers() {
    let g = ground(ALARM, "hears_alarm(X)");
    let names: Vec<_> = g.queries.iter().map(|&q| g.atom(q).to_string()).collect();
    assert_eq!(names, vec!["hears_alarm(mary)", "hears_alarm(john)"]);
}

#[test]
fn library_member_and_select() {
    let g = ground("0.5::c(b). r(L) :- member(X, L), c(X).", "r([a,b,c])");
    assert_eq!(g.facts.len(), 1);
    let g = ground("s(R) :- select(b, [a,b,c], R).", "s(R)");
    assert_eq!(g.atom(g.queries[0]).to_string(), "s([a,c])");
}

#[test]
fn occurs_check_in_resolution() {
    let g = ground("eq(X,X). r :- eq(Y, f(Y)).", "r");
    assert!(g.rules.is_empty());
}

#[test]
fn neural_inputs_must_be_ground() {
    let e = ground_err(ADDITION, "digit(X,3)");
    assert!(matches!(e, GroundError::UnboundNeuralInput { .. }), "{e}");
}

#[test]
fn disjunction_instances_per_binding() {
    let src = "0.3::c(X,h) ; 0.7::c(X,t) :- item(X). item(a). item(b). r :- c(a,h), c(b,h).";
    let g = ground(src, "r");
    assert_eq!(g.ads.len(), 2);
    for ad in &g.ads {
        assert_eq!(ad.heads.len(), 2);
        assert_eq!(ad.relevant, vec![0]);
        assert!(ad.body.is_empty());
    }
}

#[test]
fn grounding_is_deterministic() {
    let src = include_str!("../../../../programs/poker.pl");
    let p = parse_program(src).unwrap();
    let q = parse_atom("game([c1,c2,c3,c4],win)").unwrap();
    let a = ground_query(&p, &q).unwrap();
    let b = ground_query(&p, &q).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
}
