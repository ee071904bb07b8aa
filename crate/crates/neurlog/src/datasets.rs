//! Dataset containers and generators. Every generator is a pure function of
//! its seed and configuration.

use std::collections::HashSet;

use neurlog_core::learning::TrainExample;
use neurlog_core::neural::TableEncoder;
use neurlog_core::syntax::{Atom, Term};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{needed} items needed, {available} available")]
    NotEnoughItems { needed: usize, available: usize },
    #[error("duplicate item key {0}")]
    DuplicateKey(String),
    #[error("example {query} refers to unknown item {key}")]
    UnresolvedKey { query: String, key: String },
    #[error("invalid distribution {0:?}")]
    BadDistribution(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query: Atom,
    pub target: f64,
    pub split: Split,
}

/// A feature vector named by a key constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub key: Term,
    pub features: Vec<f64>,
    /// Class of the item when known, for measuring a network directly.
    pub label: Option<u32>,
    pub split: Split,
}

/// Feature vectors named by key constants, and queries over those keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub examples: Vec<Example>,
    /// Constants starting with this prefix name items.
    pub key_prefix: Option<String>,
}

impl Dataset {
    /// Checks that keys are unique and every key constant in an example
    /// names an item.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut keys = HashSet::new();
        for it in &self.items {
            if !keys.insert(&it.key) {
                return Err(DataError::DuplicateKey(it.key.to_string()));
            }
        }
        let Some(prefix) = &self.key_prefix else {
            return Ok(());
        };
        for ex in &self.examples {
            let mut missing = None;
            for a in &ex.query.args {
                visit_atoms(a, &mut |t| {
                    if let Term::Atom(s) = t {
                        if s.starts_with(prefix.as_str()) && !keys.contains(t) && missing.is_none() {
                            missing = Some(t.to_string());
                        }
                    }
                });
            }
            if let Some(key) = missing {
                return Err(DataError::UnresolvedKey { query: ex.query.to_string(), key });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<TrainExample> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| TrainExample { query: e.query.clone(), target: e.target })
            .collect()
    }

    /// Encoder looking up single-argument inputs among the items.
    pub fn encoder(&self) -> TableEncoder {
        let mut enc = TableEncoder::new(1);
        for it in &self.items {
            enc.insert(it.key.clone(), it.features.clone());
        }
        enc
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.items.first().map(|it| it.features.len())
    }
}

fn visit_atoms(t: &Term, f: &mut impl FnMut(&Term)) {
    match t {
        Term::Compound(_, args) => args.iter().for_each(|a| visit_atoms(a, f)),
        _ => f(t),
    }
}

fn atom(pred: &str, args: Vec<Term>) -> Atom {
    Atom { predicate: pred.into(), args }
}

fn int_list(xs: &[u8]) -> Term {
    Term::list(xs.iter().map(|&x| Term::Int(i64::from(x))).collect())
}

// ---------------------------------------------------------------------------
// Digit pairs

/// Two item indices labeled with a sum, possibly replaced by noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub left: usize,
    pub right: usize,
    pub label: u32,
    pub true_sum: u32,
}

/// `n` pairs of distinct items labeled with the sum of their digit labels.
/// A `noise_fraction` of the pairs gets a label drawn uniformly from 0..=18.
pub fn make_pair_dataset(labels: &[u8], n: usize, seed: u64, noise_fraction: f64) -> Result<Vec<PairExample>, DataError> {
    if 2 * n > labels.len() {
        return Err(DataError::NotEnoughItems { needed: 2 * n, available: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs: Vec<PairExample> = order
        .chunks_exact(2)
        .take(n)
        .map(|c| {
            let s = u32::from(labels[c[0]]) + u32::from(labels[c[1]]);
            PairExample { left: c[0], right: c[1], label: s, true_sum: s }
        })
        .collect();
    let noisy = (noise_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    let mut which: Vec<usize> = (0..n).collect();
    which.shuffle(&mut rng);
    for &i in &which[..noisy] {
        pairs[i].label = rng.random_range(0..=18);
    }
    Ok(pairs)
}

/// Item key of image `index` of a split.
pub fn image_key(split: &str, index: usize) -> Term {
    Term::atom(&format!("img_{split}_{index}"))
}

/// The query `addition(a, b, sum)`.
pub fn addition_query(a: &Term, b: &Term, sum: u32) -> Atom {
    atom("addition", vec![a.clone(), b.clone(), Term::Int(i64::from(sum))])
}

// ---------------------------------------------------------------------------
// Cards

pub const RANKS: [&str; 4] = ["jack", "queen", "king", "ace"];
pub const FEATURE_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Win,
    Loss,
    Draw,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Win, Outcome::Loss, Outcome::Draw];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Win => "win",
            Outcome::Loss => "loss",
            Outcome::Draw => "draw",
        }
    }
}

/// Strength of the best hand in three cards given as rank indices: high
/// card 0..=3, pair 4..=7, three of a kind 8..=11, low straight 12, high
/// straight 13.
pub fn best_hand_rank(cards: [usize; 3]) -> u32 {
    let has = |r: usize| cards.contains(&r);
    let count = |r: usize| cards.iter().filter(|&&c| c == r).count();
    let mut best = *cards.iter().max().unwrap() as u32;
    for r in 0..4 {
        match count(r) {
            3 => best = best.max(8 + r as u32),
            2 => best = best.max(4 + r as u32),
            _ => {}
        }
    }
    if has(0) && has(1) && has(2) {
        best = best.max(12);
    }
    if has(1) && has(2) && has(3) {
        best = best.max(13);
    }
    best
}

/// Result for the first player.
pub fn outcome(first: [usize; 2], second: [usize; 2], house: usize) -> Outcome {
    let a = best_hand_rank([first[0], first[1], house]);
    let b = best_hand_rank([second[0], second[1], house]);
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Outcome::Win,
        std::cmp::Ordering::Less => Outcome::Loss,
        std::cmp::Ordering::Equal => Outcome::Draw,
    }
}

/// Probability of `result` when the community card follows `distribution`.
pub fn outcome_probability(first: [usize; 2], second: [usize; 2], result: Outcome, distribution: &[f64; 4]) -> f64 {
    (0..4).filter(|&h| outcome(first, second, h) == result).map(|h| distribution[h]).sum()
}

/// Noise-free feature vector of a rank.
pub fn prototype(rank: usize) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_WIDTH];
    v[2 * rank] = 1.0;
    v[2 * rank + 1] = 1.0;
    v
}

pub fn prototype_key(rank: usize) -> Term {
    Term::atom(&format!("proto_{}", RANKS[rank]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CardConfig {
    pub train: usize,
    pub test: usize,
    pub sigma: f64,
    /// Fraction of training examples that also name the community card.
    pub labeled_fraction: f64,
}

/// Games between two players holding two cards each. Each game is labeled
/// with an outcome drawn by dealing the community card from
/// `distribution`, and with that outcome's probability as target. A
/// `labeled_fraction` of training games names the community card instead
/// and has target 1. Items also hold one noise-free prototype per rank.
pub fn make_synthetic_cards(seed: u64, distribution: [f64; 4], config: &CardConfig) -> Result<Dataset, DataError> {
    let total: f64 = distribution.iter().sum();
    if distribution.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::BadDistribution(distribution.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.sigma.max(0.0)).map_err(|_| DataError::BadDistribution(vec![config.sigma]))?;
    let house = WeightedIndex::new(distribution).map_err(|_| DataError::BadDistribution(distribution.to_vec()))?;
    let mut ds = Dataset { key_prefix: Some("card_".into()), ..Default::default() };
    for r in 0..4 {
        ds.items.push(Item { key: prototype_key(r), features: prototype(r), label: Some(r as u32), split: Split::Test });
    }
    let mut next = 0usize;
    for (split, count) in [(Split::Train, config.train), (Split::Test, config.test)] {
        for _ in 0..count {
            let ranks: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..4));
            let keys: Vec<Term> = ranks
                .iter()
                .map(|&r| {
                    let key = Term::atom(&format!("card_{next}"));
                    next += 1;
                    let v: Vec<f64> = prototype(r).into_iter().map(|x| x + noise.sample(&mut rng)).collect();
                    ds.items.push(Item { key: key.clone(), features: v, label: Some(r as u32), split });
                    key
                })
                .collect();
            let (first, second) = ([ranks[0], ranks[1]], [ranks[2], ranks[3]]);
            let h = house.sample(&mut rng);
            let result = outcome(first, second, h);
            let labeled = split == Split::Train && rng.random_bool(config.labeled_fraction.clamp(0.0, 1.0));
            let (query, target) = if labeled {
                (game_query(&keys, Some(h), result), 1.0)
            } else {
                (game_query(&keys, None, result), outcome_probability(first, second, result, &distribution))
            };
            ds.examples.push(Example { query, target, split });
        }
    }
    Ok(ds)
}

/// `game([C1,C2,C3,C4], Outcome)` or, with the community card,
/// `game([C1,C2,C3,C4], House, Outcome)`.
pub fn game_query(cards: &[Term], house: Option<usize>, result: Outcome) -> Atom {
    let mut args = vec![Term::list(cards.to_vec())];
    if let Some(h) = house {
        args.push(Term::atom(RANKS[h]));
    }
    args.push(Term::atom(result.name()));
    atom("game", args)
}

// ---------------------------------------------------------------------------
// Forth tasks

/// Digits of `a + b + carry` with the final carry first, for digit lists of
/// equal length written most significant digit first.
pub fn add_digits(a: &[u8], b: &[u8], carry: u8) -> Vec<u8> {
    let mut out = vec![0; a.len() + 1];
    let mut c = carry;
    for i in (0..a.len()).rev() {
        let s = a[i] + b[i] + c;
        out[i + 1] = s % 10;
        c = s / 10;
    }
    out[0] = c;
    out
}

pub fn forth_addition_query(a: &[u8], b: &[u8], carry: u8, result: Option<&[u8]>) -> Atom {
    let r = match result {
        Some(r) => int_list(r),
        None => Term::var("Result"),
    };
    atom("forth_addition", vec![int_list(a), int_list(b), Term::Int(i64::from(carry)), r])
}

/// Random additions of `length`-digit numbers with a random input carry.
pub fn forth_addition_examples(seed: u64, n: usize, length: usize, split: Split) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: Vec<u8> = (0..length).map(|_| rng.random_range(0..10)).collect();
            let b: Vec<u8> = (0..length).map(|_| rng.random_range(0..10)).collect();
            let c: u8 = rng.random_range(0..2);
            let r = add_digits(&a, &b, c);
            Example { query: forth_addition_query(&a, &b, c, Some(&r)), target: 1.0, split }
        })
        .collect()
}

pub fn forth_sort_query(list: &[u8], sorted: Option<&[u8]>) -> Atom {
    let s = match sorted {
        Some(s) => int_list(s),
        None => Term::var("Sorted"),
    };
    atom("forth_sort", vec![int_list(list), s])
}

/// Random lists of digits paired with their sorted version.
pub fn forth_sort_examples(seed: u64, n: usize, length: usize, split: Split) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let l: Vec<u8> = (0..length).map(|_| rng.random_range(0..10)).collect();
            let mut s = l.clone();
            s.sort_unstable();
            Example { query: forth_sort_query(&l, Some(&s)), target: 1.0, split }
        })
        .collect()
}

/// Inverse of [`int_list`] for proper lists of small integers.
pub fn term_digits(t: &Term) -> Option<Vec<u8>> {
    t.as_list()?
        .into_iter()
        .map(|x| match x {
            Term::Int(i) => u8::try_from(*i).ok(),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_disjoint_and_deterministic() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let a = make_pair_dataset(&labels, 50, 7, 0.0).unwrap();
        assert_eq!(a, make_pair_dataset(&labels, 50, 7, 0.0).unwrap());
        let used: HashSet<usize> = a.iter().flat_map(|p| [p.left, p.right]).collect();
        assert_eq!(used.len(), 100);
        assert!(a.iter().all(|p| p.label == u32::from(labels[p.left]) + u32::from(labels[p.right])));
        assert!(matches!(
            make_pair_dataset(&labels, 51, 7, 0.0),
            Err(DataError::NotEnoughItems { needed: 102, available: 100 })
        ));
    }

    #[test]
    fn noise_replaces_a_fraction() {
        let labels: Vec<u8> = (0..2000).map(|i| (i * 7 % 10) as u8).collect();
        let pairs = make_pair_dataset(&labels, 1000, 3, 0.2).unwrap();
        let changed = pairs.iter().filter(|p| p.label != p.true_sum).count();
        // About 1/19 of the replaced labels coincide with the true sum.
        assert!((170..=200).contains(&changed), "{changed}");
        assert!(pairs.iter().all(|p| p.label <= 18));
        let all = make_pair_dataset(&labels, 1000, 3, 1.0).unwrap();
        let same = all.iter().filter(|p| p.label == p.true_sum).count();
        assert!(same < 100, "{same}");
    }

    #[test]
    fn poker_rules() {
        let [j, q, k, a] = [0, 1, 2, 3];
        assert_eq!(best_hand_rank([q, q, a]), 5);
        assert_eq!(best_hand_rank([a, k, a]), 7);
        assert_eq!(outcome([q, q], [a, k], a), Outcome::Loss);
        assert_eq!(best_hand_rank([j, q, k]), 12);
        assert_eq!(best_hand_rank([a, q, k]), 13);
        assert_eq!(best_hand_rank([k, k, k]), 10);
        assert_eq!(best_hand_rank([j, q, a]), 3);
        assert_eq!(outcome([j, a], [a, j], q), Outcome::Draw);
        let d = [0.2, 0.4, 0.15, 0.25];
        let total: f64 = Outcome::ALL.iter().map(|&o| outcome_probability([q, q], [a, k], o, &d)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cards_are_well_formed() {
        let cfg = CardConfig { train: 200, test: 10, sigma: 0.1, labeled_fraction: 0.1 };
        let d = make_synthetic_cards(5, [0.2, 0.4, 0.15, 0.25], &cfg).unwrap();
        d.validate().unwrap();
        assert_eq!(d, make_synthetic_cards(5, [0.2, 0.4, 0.15, 0.25], &cfg).unwrap());
        assert_eq!(d.items.len(), 4 + 4 * 210);
        let labeled = d.examples.iter().filter(|e| e.query.args.len() == 3).count();
        assert!((5..=40).contains(&labeled), "{labeled}");
        assert!(d.examples.iter().all(|e| e.target > 0.0 && e.target <= 1.0));
        assert!(make_synthetic_cards(5, [0.5, 0.5, 0.5, 0.0], &cfg).is_err());
    }

    #[test]
    fn forth_examples() {
        assert_eq!(add_digits(&[4], &[8], 1), vec![1, 3]);
        assert_eq!(add_digits(&[9, 9], &[0, 0], 1), vec![1, 0, 0]);
        let ex = forth_addition_examples(1, 5, 3, Split::Train);
        assert_eq!(ex, forth_addition_examples(1, 5, 3, Split::Train));
        assert_eq!(term_digits(&ex[0].query.args[3]).unwrap().len(), 4);
        let s = forth_sort_examples(2, 5, 4, Split::Test);
        for e in &s {
            let l = term_digits(&e.query.args[1]).unwrap();
            assert!(l.windows(2).all(|w| w[0] <= w[1]));
        }
        assert_eq!(forth_sort_query(&[8, 2, 4], Some(&[2, 4, 8])).to_string(), "forth_sort([8,2,4],[2,4,8])");
    }

    #[test]
    fn unresolved_keys_are_reported() {
        let mut d = Dataset { key_prefix: Some("img_".into()), ..Default::default() };
        let item = Item { key: image_key("train", 0), features: vec![0.0], label: Some(0), split: Split::Train };
        d.items.push(item.clone());
        d.examples.push(Example {
            query: addition_query(&image_key("train", 0), &image_key("train", 1), 3),
            target: 1.0,
            split: Split::Train,
        });
        assert!(matches!(d.validate(), Err(DataError::UnresolvedKey { .. })));
        d.items.push(item);
        assert!(matches!(d.validate(), Err(DataError::DuplicateKey(_))));
    }
}
