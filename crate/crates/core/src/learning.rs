//! Learning from entailment.
//!
//! Each example is a ground query with a target probability. A training
//! step compiles (or fetches from the cache) the circuit of every query,
//! runs the networks the circuit reads, evaluates the gradient semiring,
//! multiplies the circuit gradient by the loss derivative and routes the
//! result to learnable probabilities and, as output seeds, to the networks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compiler::{
    abstract_query, complete, compile, instantiate, CacheKey, CacheStats, Circuit, CircuitCache, CompileOptions,
};
use crate::grounder::{ground_queries, GroundOptions};
use crate::neural::{ModelRegistry, Optimizer};
use crate::semiring::{gradient, probability, LeafContext, Slot};
use crate::syntax::{Atom, ParamId, Program, Term};

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Loss {
    /// `-ln P`, ignoring the target.
    #[default]
    Nll,
    /// Binary cross-entropy against the target.
    CrossEntropy,
    /// `(P - target)^2`.
    Mse,
}

/// Loss value and its derivative with respect to `p`.
pub fn loss(p: f64, target: f64, kind: Loss) -> (f64, f64) {
    match kind {
        Loss::Nll => {
            let q = p.max(LOG_FLOOR);
            (-libm::log(q), -1.0 / q)
        }
        Loss::CrossEntropy => {
            let q = p.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
            (
                -target * libm::log(q) - (1.0 - target) * libm::log(1.0 - q),
                -target / q + (1.0 - target) / (1.0 - q),
            )
        }
        Loss::Mse => ((p - target) * (p - target), 2.0 * (p - target)),
    }
}

/// `1 - H_n(m)` for a mean distribution `m` over `n` classes, with the
/// entropy in base `n`.
pub fn infoloss(mean: &[f64]) -> f64 {
    let n = mean.len() as f64;
    let h: f64 = mean
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| -m * libm::log(*m))
        .sum::<f64>()
        / libm::log(n);
    1.0 - h
}

/// Gradient of `infoloss(mean of outputs)` with respect to each output of
/// each of the `count` averaged distributions.
pub fn infoloss_seed(mean: &[f64], count: usize) -> Vec<f64> {
    let ln_n = libm::log(mean.len() as f64);
    mean.iter()
        .map(|m| (libm::log(m.max(LOG_FLOOR)) + 1.0) / (count as f64 * ln_n))
        .collect()
}

/// Mean of several distributions.
pub fn mean_distribution(outputs: &[&[f64]]) -> Vec<f64> {
    let n = outputs.first().map_or(0, |o| o.len());
    let mut m = vec![0.0; n];
    for o in outputs {
        for (a, b) in m.iter_mut().zip(o.iter()) {
            *a += b;
        }
    }
    let k = outputs.len().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= k);
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub query: Atom,
    pub target: f64,
}

impl TrainExample {
    pub fn positive(query: Atom) -> Self {
        TrainExample { query, target: 1.0 }
    }
}

/// Test item scored by argmax over candidate queries.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationItem {
    pub candidates: Vec<Atom>,
    pub correct: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target {0} outside [0, 1]")]
    BadTarget(f64),
    #[error("query {query}: {message}")]
    Example { query: String, message: String },
}

fn fail(query: &Atom, e: impl ToString) -> LearningError {
    LearningError::Example {
        query: query.to_string(),
        message: e.to_string(),
    }
}

/// Compiles queries against one program, caching circuits per abstracted
/// query.
pub struct Engine {
    pub program: Program,
    fingerprint: u64,
    /// Constants starting with this prefix are dataset keys.
    key_prefix: Option<String>,
    pub ground: GroundOptions,
    pub compile: CompileOptions,
    cache: CircuitCache<Circuit>,
}

impl Engine {
    pub fn new(program: Program, key_prefix: Option<&str>, cache: bool) -> Self {
        Engine {
            fingerprint: program.fingerprint(),
            program,
            key_prefix: key_prefix.map(String::from),
            ground: GroundOptions::default(),
            compile: CompileOptions::default(),
            cache: CircuitCache::new(cache),
        }
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    /// Circuit of `query` and the keys that fill its placeholders.
    pub fn circuit(&mut self, query: &Atom) -> Result<(Arc<Circuit>, Vec<Term>), LearningError> {
        let prefix = self.key_prefix.clone();
        let is_key = |t: &Term| match (t, &prefix) {
            (Term::Atom(a), Some(p)) => a.starts_with(p.as_str()),
            _ => false,
        };
        let (skeleton, keys) = abstract_query(query, &is_key);
        let key = CacheKey {
            skeleton: skeleton.clone(),
            program: self.fingerprint,
        };
        let (program, ground, options) = (&self.program, &self.ground, &self.compile);
        let c = self.cache.get_or_build(key, || {
            let g = ground_queries(program, core::slice::from_ref(&skeleton), ground).map_err(|e| fail(query, e))?;
            let mut f = complete(&g).map_err(|e| fail(query, e))?;
            let roots = f.queries.clone();
            compile(&mut f, &roots, options).map_err(|e| fail(query, e))
        })?;
        if c.roots.len() != 1 {
            return Err(fail(query, format!("query has {} ground instances", c.roots.len())));
        }
        Ok((c, keys))
    }
}

/// Registry lookups with placeholders replaced by the example's keys.
pub struct Bound<'a> {
    pub registry: &'a ModelRegistry,
    pub keys: &'a [Term],
}

impl LeafContext for Bound<'_> {
    fn param(&self, id: ParamId) -> Option<f64> {
        self.registry.param(id)
    }

    fn neural(&self, model: &str, inputs: &[Term], output: Option<usize>) -> Option<(f64, u32)> {
        if self.keys.is_empty() {
            return self.registry.neural(model, inputs, output);
        }
        let bound: Vec<Term> = inputs.iter().map(|t| instantiate(t, self.keys)).collect();
        self.registry.neural(model, &bound, output)
    }
}

/// Runs every network the circuit reads on the example's inputs.
fn run_networks(registry: &mut ModelRegistry, c: &Circuit, keys: &[Term], query: &Atom) -> Result<(), LearningError> {
    for (model, inputs) in c.neural_calls() {
        let bound: Vec<Term> = inputs.iter().map(|t| instantiate(t, keys)).collect();
        registry.forward(&model, &bound).map_err(|e| fail(query, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub neural: Optimizer,
    pub probabilistic: Optimizer,
    pub loss: Loss,
    /// (model, weight) pairs of infoloss regularizers.
    pub infoloss: Vec<(String, f64)>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 2,
            epochs: 1,
            neural: Optimizer::adam(1e-3),
            probabilistic: Optimizer::Sgd { lr: 1e-3 },
            loss: Loss::Nll,
            infoloss: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    /// Mean loss over the batch, regularizers included.
    pub loss: f64,
    pub mean_probability: f64,
    pub cache: CacheStats,
}

pub struct Trainer {
    pub engine: Engine,
    pub registry: ModelRegistry,
    pub config: TrainerConfig,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(engine: Engine, registry: ModelRegistry, config: TrainerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Trainer {
            engine,
            registry,
            config,
            iteration: 0,
            rng,
        }
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<StepMetrics, LearningError> {
        if batch.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        self.registry.clear_batch();
        self.registry.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut seeds: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut total = 0.0;
        let mut mean_p = 0.0;
        for ex in batch {
            if !(0.0..=1.0).contains(&ex.target) {
                return Err(LearningError::BadTarget(ex.target));
            }
            let (c, keys) = self.engine.circuit(&ex.query)?;
            run_networks(&mut self.registry, &c, &keys, &ex.query)?;
            let ctx = Bound {
                registry: &self.registry,
                keys: &keys,
            };
            let d = gradient(&c, &ctx).map_err(|e| fail(&ex.query, e))?.swap_remove(0);
            let (l, dl) = loss(d.p, ex.target, self.config.loss);
            total += l * scale;
            mean_p += d.p * scale;
            for (slot, g) in d.grad {
                let g = g * dl * scale;
                match slot {
                    Slot::Param(id) => self.registry.prob_grads[id.index()] += g,
                    Slot::Neural { eval, output } => {
                        let width = self.registry.output(eval).map_err(|e| fail(&ex.query, e))?.len();
                        seeds.entry(eval).or_insert_with(|| vec![0.0; width])[output as usize] += g;
                    }
                }
            }
        }
        for (model, weight) in self.config.infoloss.clone() {
            total += weight * self.add_infoloss(&model, weight, &mut seeds);
        }
        let seeds: Vec<(u32, Vec<f64>)> = seeds.into_iter().collect();
        self.registry
            .backward(&seeds)
            .map_err(|e| fail(&batch[0].query, e))?;
        self.registry.step(self.config.neural, self.config.probabilistic);
        self.iteration += 1;
        Ok(StepMetrics {
            loss: total,
            mean_probability: mean_p,
            cache: self.engine.cache_stats(),
        })
    }

    /// Adds the infoloss seeds of `model` over this batch's evaluations and
    /// returns the unweighted infoloss.
    fn add_infoloss(&self, model: &str, weight: f64, seeds: &mut BTreeMap<u32, Vec<f64>>) -> f64 {
        let Some(index) = self.registry.models().iter().position(|m| m.name == model) else {
            return 0.0;
        };
        let evals: Vec<(u32, &[f64])> = self
            .registry
            .evaluations()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.model == index)
            .map(|(i, e)| (i as u32, e.output.as_slice()))
            .collect();
        if evals.is_empty() {
            return 0.0;
        }
        let outputs: Vec<&[f64]> = evals.iter().map(|(_, o)| *o).collect();
        let mean = mean_distribution(&outputs);
        let seed = infoloss_seed(&mean, evals.len());
        for (id, o) in &evals {
            let s = seeds.entry(*id).or_insert_with(|| vec![0.0; o.len()]);
            for (a, b) in s.iter_mut().zip(&seed) {
                *a += weight * b;
            }
        }
        infoloss(&mean)
    }

    /// One pass over `data` in a seeded random order, calling `after_step`
    /// after every optimizer step.
    pub fn epoch(
        &mut self,
        data: &[TrainExample],
        mut after_step: impl FnMut(&mut Self, &StepMetrics) -> Result<(), LearningError>,
    ) -> Result<(), LearningError> {
        if data.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        for chunk in self.batches(data.len()) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let m = self.train_step(&batch)?;
            after_step(self, &m)?;
        }
        Ok(())
    }

    /// Example indices of one epoch over `n` examples, shuffled with the
    /// trainer's seeded generator and cut into batches.
    pub fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.config.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Success probability of a ground query under the current parameters.
    pub fn probability(&mut self, query: &Atom) -> Result<f64, LearningError> {
        Ok(self.probabilities(core::slice::from_ref(query))?[0])
    }

    /// Success probabilities of several queries. Network outputs are shared
    /// between queries reading the same inputs.
    pub fn probabilities(&mut self, queries: &[Atom]) -> Result<Vec<f64>, LearningError> {
        self.registry.clear_batch();
        let mut out = Vec::with_capacity(queries.len());
        for query in queries {
            let (c, keys) = self.engine.circuit(query)?;
            run_networks(&mut self.registry, &c, &keys, query)?;
            let ctx = Bound {
                registry: &self.registry,
                keys: &keys,
            };
            out.push(probability(&c, &ctx).map_err(|e| fail(query, e))?[0]);
        }
        Ok(out)
    }

    /// Index of the most probable candidate; ties go to the lowest index.
    pub fn most_probable(&mut self, candidates: &[Atom]) -> Result<usize, LearningError> {
        let ps = self.probabilities(candidates)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in ps.into_iter().enumerate() {
            if p > best.0 {
                best = (p, i);
            }
        }
        Ok(best.1)
    }

    /// Fraction of items whose most probable candidate is the correct one.
    pub fn accuracy_argmax(&mut self, items: &[ClassificationItem]) -> Result<f64, LearningError> {
        if items.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        let mut correct = 0;
        for item in items {
            if self.most_probable(&item.candidates)? == item.correct {
                correct += 1;
            }
        }
        Ok(correct as f64 / items.len() as f64)
    }

    /// Fraction of examples where `P > 0.5` agrees with `target > 0.5`.
    pub fn accuracy_threshold(&mut self, examples: &[TrainExample]) -> Result<f64, LearningError> {
        if examples.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        let mut correct = 0;
        for ex in examples {
            if (self.probability(&ex.query)? > 0.5) == (ex.target > 0.5) {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Head, NetworkSpec, OneHotEncoder};
    use crate::syntax::{parse_atom, parse_program};
    use alloc::boxed::Box;

    #[test]
    fn loss_values() {
        assert_eq!(loss(1.0, 1.0, Loss::Nll).0, 0.0);
        assert_eq!(loss(0.8, 0.8, Loss::Mse).0, 0.0);
        assert!((loss(0.5, 1.0, Loss::CrossEntropy).0 - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss(0.0, 1.0, Loss::Nll).0.is_finite());
    }

    #[test]
    fn loss_derivatives() {
        for kind in [Loss::Nll, Loss::CrossEntropy, Loss::Mse] {
            for (p, t) in [(0.3, 1.0), (0.7, 0.2), (0.5, 0.5)] {
                let h = 1e-6;
                let fd = (loss(p + h, t, kind).0 - loss(p - h, t, kind).0) / (2.0 * h);
                assert!((fd - loss(p, t, kind).1).abs() < 1e-6, "{kind:?} {p} {t}");
            }
        }
    }

    #[test]
    fn infoloss_values() {
        assert!(infoloss(&[0.25; 4]).abs() < 1e-12);
        assert!((infoloss(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        let h2 = -(0.75 * libm::log2(0.75) + 0.25 * libm::log2(0.25));
        assert!((infoloss(&[0.75, 0.25]) - (1.0 - h2)).abs() < 1e-12);
        assert!((infoloss(&[0.75, 0.25]) - 0.1887).abs() < 1e-4);
    }

    #[test]
    fn infoloss_seed_matches_finite_differences() {
        let outs = [vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]];
        let refs: Vec<&[f64]> = outs.iter().map(|o| o.as_slice()).collect();
        let mean = mean_distribution(&refs);
        let seed = infoloss_seed(&mean, 2);
        let h = 1e-6;
        for k in 0..3 {
            let f = |d: f64| {
                let mut o = outs.clone();
                o[0][k] += d;
                let r: Vec<&[f64]> = o.iter().map(|x| x.as_slice()).collect();
                infoloss(&mean_distribution(&r))
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - seed[k]).abs() < 1e-6, "{k}: {fd} vs {}", seed[k]);
        }
    }

    fn trainer(src: &str, lr: f64) -> Trainer {
        let p = parse_program(src).unwrap();
        let reg = ModelRegistry::new(&p, 0);
        let config = TrainerConfig {
            batch_size: 1,
            probabilistic: Optimizer::Sgd { lr },
            ..Default::default()
        };
        Trainer::new(Engine::new(p, None, true), reg, config)
    }

    #[test]
    fn single_learnable_fact_step() {
        let mut t = trainer("t(0.3)::f.", 0.1);
        t.train_step(&[TrainExample::positive(parse_atom("f").unwrap())]).unwrap();
        assert!((t.registry.probs[0] - (0.3 + 0.1 / 0.3)).abs() < 1e-12);
    }

    #[test]
    fn certain_query_leaves_parameters_unchanged() {
        let mut t = trainer("t(0.3)::f. g.", 0.1);
        t.train_step(&[TrainExample::positive(parse_atom("g").unwrap())]).unwrap();
        assert_eq!(t.registry.probs[0], 0.3);
    }

    #[test]
    fn one_step_reduces_loss() {
        for kind in [Loss::Nll, Loss::CrossEntropy, Loss::Mse] {
            let mut t = trainer("t(0.4)::a. t(0.5)::b. q :- a. q :- b.", 0.01);
            t.config.loss = kind;
            let ex = [TrainExample {
                query: parse_atom("q").unwrap(),
                target: 0.95,
            }];
            let before = loss(t.probability(&ex[0].query).unwrap(), 0.95, kind).0;
            t.train_step(&ex).unwrap();
            let after = loss(t.probability(&ex[0].query).unwrap(), 0.95, kind).0;
            assert!(after < before, "{kind:?}: {after} >= {before}");
        }
    }

    #[test]
    fn neural_digit_learning_reduces_loss() {
        let src = include_str!("../../../programs/addition.pl");
        let p = parse_program(src).unwrap();
        let mut reg = ModelRegistry::new(&p, 3);
        let enc = OneHotEncoder {
            domains: vec![(0..10).map(|i| Term::atom(&format!("img{i}"))).collect()],
        };
        reg.register(
            "m_digit",
            NetworkSpec::new(10, &[(16, Activation::Relu)], 10, Head::Softmax),
            Box::new(enc),
        )
        .unwrap();
        let config = TrainerConfig {
            batch_size: 4,
            neural: Optimizer::adam(1e-2),
            ..Default::default()
        };
        let mut t = Trainer::new(Engine::new(p, Some("img"), true), reg, config);
        let data: Vec<TrainExample> = (0..10)
            .flat_map(|a| (0..10).map(move |b| (a, b)))
            .map(|(a, b)| TrainExample::positive(parse_atom(&format!("addition(img{a},img{b},{})", a + b)).unwrap()))
            .collect();
        let mut losses = Vec::new();
        for _ in 0..30 {
            let mut sum = 0.0;
            t.epoch(&data, |_, m| {
                sum += m.loss;
                Ok(())
            })
            .unwrap();
            losses.push(sum);
        }
        assert!(losses[29] < losses[0] * 0.5, "{losses:?}");
        // Sums 1..=17 for distinct images plus 10 even sums for repeated ones.
        assert_eq!(t.engine.cache_stats().compiles, 27);
        let items: Vec<ClassificationItem> = (0..10)
            .map(|a| ClassificationItem {
                candidates: (0..19)
                    .map(|s| parse_atom(&format!("addition(img{a},img{a},{s})")).unwrap())
                    .collect(),
                correct: 2 * a,
            })
            .collect();
        assert!(t.accuracy_argmax(&items).unwrap() > 0.5);
    }

    #[test]
    fn empty_dataset() {
        let mut t = trainer("t(0.3)::f.", 0.1);
        assert_eq!(t.accuracy_argmax(&[]), Err(LearningError::EmptyDataset));
        assert_eq!(t.accuracy_threshold(&[]), Err(LearningError::EmptyDataset));
    }
}
