//! Backpropagation through circuit and network against central differences
//! on every weight of a two-layer digit classifier.

use std::collections::BTreeMap;
use std::time::Instant;

use neurlog_core::learning::{loss, Bound, Engine, Loss};
use neurlog_core::neural::{Activation, Head, ModelRegistry, NetworkSpec, TableEncoder};
use neurlog_core::semiring::{gradient, probability, Slot};
use neurlog_core::syntax::{parse_atom, parse_program, Atom, Term};

const ADDITION: &str = include_str!("../../../programs/addition.pl");
const WIDTH: usize = 12;

fn features(seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    (0..WIDTH)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn setup() -> (Engine, ModelRegistry) {
    let p = parse_program(ADDITION).unwrap();
    let mut registry = ModelRegistry::new(&p, 11);
    let mut enc = TableEncoder::new(1);
    for (i, key) in ["d0", "d1", "d2"].iter().enumerate() {
        enc.insert(Term::atom(key), features(i as u64 + 1));
    }
    let spec = NetworkSpec::new(WIDTH, &[(8, Activation::Tanh)], 10, Head::Softmax);
    registry.register("m_digit", spec, Box::new(enc)).unwrap();
    (Engine::new(p, Some("d"), true), registry)
}

/// Mean negative log-likelihood of `batch`.
fn objective(engine: &mut Engine, registry: &mut ModelRegistry, batch: &[Atom]) -> f64 {
    registry.clear_batch();
    let mut total = 0.0;
    for q in batch {
        let (c, keys) = engine.circuit(q).unwrap();
        for (model, inputs) in c.neural_calls() {
            let bound: Vec<Term> = inputs.iter().map(|t| neurlog_core::compiler::instantiate(t, &keys)).collect();
            registry.forward(&model, &bound).unwrap();
        }
        let p = probability(&c, &Bound { registry, keys: &keys }).unwrap()[0];
        total += loss(p, 1.0, Loss::Nll).0 / batch.len() as f64;
    }
    total
}

/// Analytic gradient of [`objective`] with respect to the network weights.
fn backprop(engine: &mut Engine, registry: &mut ModelRegistry, batch: &[Atom]) -> Vec<f64> {
    registry.clear_batch();
    registry.zero_grad();
    let mut seeds: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for q in batch {
        let (c, keys) = engine.circuit(q).unwrap();
        for (model, inputs) in c.neural_calls() {
            let bound: Vec<Term> = inputs.iter().map(|t| neurlog_core::compiler::instantiate(t, &keys)).collect();
            registry.forward(&model, &bound).unwrap();
        }
        let d = gradient(&c, &Bound { registry, keys: &keys }).unwrap().swap_remove(0);
        let dl = loss(d.p, 1.0, Loss::Nll).1 / batch.len() as f64;
        for (slot, g) in d.grad {
            if let Slot::Neural { eval, output } = slot {
                seeds.entry(eval).or_insert_with(|| vec![0.0; 10])[output as usize] += g * dl;
            }
        }
    }
    let seeds: Vec<(u32, Vec<f64>)> = seeds.into_iter().collect();
    registry.backward(&seeds).unwrap();
    registry.model("m_digit").unwrap().grads.clone()
}

#[test]
fn neural_weights_match_finite_differences() {
    let start = Instant::now();
    let (mut engine, mut registry) = setup();
    let batch: Vec<Atom> = ["addition(d0,d1,7)", "addition(d1,d2,3)", "addition(d2,d2,8)"]
        .iter()
        .map(|q| parse_atom(q).unwrap())
        .collect();
    let analytic = backprop(&mut engine, &mut registry, &batch);
    let n = analytic.len();
    assert_eq!(n, WIDTH * 8 + 8 + 8 * 10 + 10);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let w = registry.model("m_digit").unwrap().params[i];
        registry.model_mut("m_digit").unwrap().params[i] = w + h;
        let up = objective(&mut engine, &mut registry, &batch);
        registry.model_mut("m_digit").unwrap().params[i] = w - h;
        let down = objective(&mut engine, &mut registry, &batch);
        registry.model_mut("m_digit").unwrap().params[i] = w;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        let err = if scale < 1e-7 { 0.0 } else { (analytic[i] - numeric).abs() / scale };
        assert!(err < 1e-3, "weight {i}: backprop {} vs numeric {numeric}", analytic[i]);
        worst = worst.max(err);
    }
    assert!(analytic.iter().any(|g| g.abs() > 1e-4));
    eprintln!("{n} weights, worst relative error {worst:.2e}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}
