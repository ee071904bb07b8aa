//! Every program listing parses with the expected clause counts.

use neurlog_core::syntax::{parse_program, ParseError};

struct Counts {
    rules: usize,
    facts: usize,
    ads: usize,
    neural: usize,
}

fn counts(src: &str) -> Counts {
    let p = parse_program(src).unwrap_or_else(|e| panic!("{e}"));
    Counts {
        rules: p.rules.len(),
        facts: p.facts.len(),
        ads: p.ads.len(),
        neural: p.neural.len(),
    }
}

#[track_caller]
fn expect(src: &str, rules: usize, facts: usize, ads: usize, neural: usize) {
    let c = counts(src);
    assert_eq!((c.rules, c.facts, c.ads, c.neural), (rules, facts, ads, neural));
}

#[test]
fn listings() {
    expect(include_str!("../../../programs/alarm.pl"), 3, 4, 0, 0);
    expect(include_str!("../../../programs/alarm_learnable.pl"), 3, 4, 0, 0);
    expect(include_str!("../../../programs/addition.pl"), 1, 0, 0, 1);
    expect(include_str!("../../../programs/all_digit_addition.pl"), 1, 0, 0, 1);
    expect(include_str!("../../../programs/multi_addition.pl"), 4, 0, 0, 1);
    expect(include_str!("../../../programs/noisy_addition.pl"), 2, 1, 1, 1);
    expect(include_str!("../../../programs/coins.pl"), 3, 0, 0, 2);
    expect(include_str!("../../../programs/forth_addition.pl"), 4, 0, 0, 2);
    expect(include_str!("../../../programs/forth_sort.pl"), 7, 0, 0, 1);
    expect(include_str!("../../../programs/wap.pl"), 13, 0, 0, 4);
    // 26 listed clauses plus one auxiliary rule for the negated conjunction.
    expect(include_str!("../../../programs/poker.pl"), 27, 0, 1, 1);
}

#[test]
fn listing_details() {
    let p = parse_program(include_str!("../../../programs/noisy_addition.pl")).unwrap();
    assert_eq!(p.ads[0].heads.len(), 19);
    assert_eq!(p.params.len(), 1);
    assert_eq!(p.neural[0].domain.as_ref().unwrap().len(), 10);

    let p = parse_program(include_str!("../../../programs/poker.pl")).unwrap();
    assert_eq!(p.param_groups.len(), 1);
    assert_eq!(p.param_groups[0].len(), 4);
    assert!(p.params.iter().all(|x| (x.init - 0.25).abs() < 1e-15));

    let p = parse_program(include_str!("../../../programs/forth_sort.pl")).unwrap();
    assert!(p.neural[0].is_fact());
}

#[test]
fn empty_source() {
    let p = parse_program("").unwrap();
    assert!(p.is_empty());
    let p = parse_program("% only a comment\n").unwrap();
    assert!(p.is_empty());
}

#[test]
fn neural_predicate_cannot_have_rules() {
    let src = "nn(m,[X],Y,[0,1]) :: d(X,Y).\nd(a,0).";
    assert!(matches!(
        parse_program(src),
        Err(ParseError::NeuralRedefinition { .. })
    ));
}

#[test]
fn diagnostics_carry_locations() {
    let e = parse_program("a :- b.\nc :- .").unwrap_err();
    let loc = e.location();
    assert_eq!(loc.line, 2);
    assert!(loc.column > 1);
    assert!(matches!(parse_program("1.5::a."), Err(ParseError::ProbOutOfRange { .. })));
    assert!(parse_program("p(a). p(a,b).").is_ok());
    assert!(matches!(parse_program("nn(m,[X],Y,[0,1]) :: d(X)."), Err(ParseError::ArityClash { .. })));
}
