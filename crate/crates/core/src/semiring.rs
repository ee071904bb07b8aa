//! Circuit evaluation in the probability and gradient semirings.
//!
//! Leaves are labeled from their [`LeafSource`]; the gradient semiring
//! carries a sparse vector of partial derivatives over [`Slot`]s, one slot
//! per learnable probability and per output of each network evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::compiler::{Circuit, LeafSource, Node};
use crate::syntax::{print_term, ParamId, ProbLabel, Program, Symbol, Term};

/// Commutative semiring used to evaluate a circuit.
pub trait Semiring {
    type Elem: Clone;
    fn zero(&self) -> Self::Elem;
    fn one(&self) -> Self::Elem;
    fn add(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem;
    fn mul(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem;
}

/// Real numbers under `+` and `*`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Probability;

impl Semiring for Probability {
    type Elem = f64;
    fn zero(&self) -> f64 {
        0.0
    }
    fn one(&self) -> f64 {
        1.0
    }
    fn add(&self, a: &f64, b: &f64) -> f64 {
        a + b
    }
    fn mul(&self, a: &f64, b: &f64) -> f64 {
        a * b
    }
}

/// A learnable quantity the gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Param(ParamId),
    /// Output `output` of network evaluation `eval`.
    Neural { eval: u32, output: u32 },
}

/// A probability together with its sparse gradient. `grad` is sorted by
/// slot and holds each slot at most once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualValue {
    pub p: f64,
    pub grad: Vec<(Slot, f64)>,
}

impl DualValue {
    pub fn constant(p: f64) -> Self {
        DualValue { p, grad: Vec::new() }
    }

    pub fn variable(p: f64, slot: Slot) -> Self {
        DualValue {
            p,
            grad: alloc::vec![(slot, 1.0)],
        }
    }

    pub fn partial(&self, slot: Slot) -> f64 {
        self.grad
            .binary_search_by(|(s, _)| s.cmp(&slot))
            .map_or(0.0, |i| self.grad[i].1)
    }
}

/// `a*x + b*y` over sparse sorted vectors.
fn combine(a: f64, x: &[(Slot, f64)], b: f64, y: &[(Slot, f64)]) -> Vec<(Slot, f64)> {
    let mut out = Vec::with_capacity(x.len() + y.len());
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        match x[i].0.cmp(&y[j].0) {
            core::cmp::Ordering::Less => {
                out.push((x[i].0, a * x[i].1));
                i += 1;
            }
            core::cmp::Ordering::Greater => {
                out.push((y[j].0, b * y[j].1));
                j += 1;
            }
            core::cmp::Ordering::Equal => {
                out.push((x[i].0, a * x[i].1 + b * y[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out.extend(x[i..].iter().map(|(s, v)| (*s, a * v)));
    out.extend(y[j..].iter().map(|(s, v)| (*s, b * v)));
    out
}

/// Pairs of probability and gradient with the sum and product rules.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gradient;

impl Semiring for Gradient {
    type Elem = DualValue;
    fn zero(&self) -> DualValue {
        DualValue::constant(0.0)
    }
    fn one(&self) -> DualValue {
        DualValue::constant(1.0)
    }
    fn add(&self, a: &DualValue, b: &DualValue) -> DualValue {
        DualValue {
            p: a.p + b.p,
            grad: combine(1.0, &a.grad, 1.0, &b.grad),
        }
    }
    fn mul(&self, a: &DualValue, b: &DualValue) -> DualValue {
        DualValue {
            p: a.p * b.p,
            grad: combine(b.p, &a.grad, a.p, &b.grad),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("no output of network {model} for inputs {inputs}")]
    MissingNeuralOutput { model: String, inputs: String },
    #[error("learnable parameter {0} is not registered")]
    UnregisteredParameter(u32),
}

/// Supplies current parameter values and network outputs for labeling.
pub trait LeafContext {
    fn param(&self, id: ParamId) -> Option<f64>;
    /// Output `output` of `model` on `inputs` (`None` for a scalar head)
    /// together with the evaluation id of that forward pass.
    fn neural(&self, model: &str, inputs: &[Term], output: Option<usize>) -> Option<(f64, u32)>;
}

/// Parameter values in a vector and network outputs in a map.
#[derive(Clone, Debug, Default)]
pub struct TableContext {
    pub params: Vec<f64>,
    /// Output vector and evaluation id per (model, inputs).
    pub outputs: BTreeMap<(Symbol, Vec<Term>), (Vec<f64>, u32)>,
}

impl TableContext {
    /// Learnable parameters at their initial values, no network outputs.
    pub fn from_program(p: &Program) -> Self {
        TableContext {
            params: p.params.iter().map(|x| x.init).collect(),
            outputs: BTreeMap::new(),
        }
    }

    /// Registers an output vector under a fresh evaluation id.
    pub fn set_output(&mut self, model: &str, inputs: Vec<Term>, values: Vec<f64>) -> u32 {
        let key = (crate::syntax::sym(model), inputs);
        let id = match self.outputs.get(&key) {
            Some((_, id)) => *id,
            None => self.outputs.len() as u32,
        };
        self.outputs.insert(key, (values, id));
        id
    }
}

impl LeafContext for TableContext {
    fn param(&self, id: ParamId) -> Option<f64> {
        self.params.get(id.index()).copied()
    }

    fn neural(&self, model: &str, inputs: &[Term], output: Option<usize>) -> Option<(f64, u32)> {
        let (values, id) = self.outputs.get(&(crate::syntax::sym(model), inputs.to_vec()))?;
        Some((*values.get(output.unwrap_or(0))?, *id))
    }
}

fn missing(model: &str, inputs: &[Term]) -> LabelError {
    LabelError::MissingNeuralOutput {
        model: model.into(),
        inputs: print_term(&Term::list(inputs.to_vec())),
    }
}

/// Label of one leaf source: its probability and gradient.
pub fn leaf_label(src: &LeafSource, ctx: &dyn LeafContext) -> Result<DualValue, LabelError> {
    Ok(match src {
        LeafSource::Prob(ProbLabel::Fixed(p)) => DualValue::constant(*p),
        LeafSource::Prob(ProbLabel::Learnable { param, .. }) => {
            let p = ctx.param(*param).ok_or(LabelError::UnregisteredParameter(param.0))?;
            DualValue::variable(p, Slot::Param(*param))
        }
        LeafSource::Neural { model, inputs, output } => {
            let (p, eval) = ctx.neural(model, inputs, *output).ok_or_else(|| missing(model, inputs))?;
            DualValue::variable(
                p,
                Slot::Neural {
                    eval,
                    output: output.unwrap_or(0) as u32,
                },
            )
        }
        LeafSource::Residual(parts) => {
            let mut sum = DualValue::constant(0.0);
            for part in parts {
                sum = Gradient.add(&sum, &leaf_label(part, ctx)?);
            }
            DualValue {
                p: 1.0 - sum.p,
                grad: sum.grad.into_iter().map(|(s, g)| (s, -g)).collect(),
            }
        }
    })
}

/// Gradient-semiring labels per variable and value. Probabilities are
/// clamped to `[0, 1]`.
pub fn gradient_labels(c: &Circuit, ctx: &dyn LeafContext) -> Result<Vec<Vec<DualValue>>, LabelError> {
    c.vars
        .iter()
        .map(|v| {
            v.values
                .iter()
                .map(|val| {
                    let mut l = leaf_label(&val.source, ctx)?;
                    l.p = l.p.clamp(0.0, 1.0);
                    Ok(l)
                })
                .collect()
        })
        .collect()
}

/// Probability-semiring labels: the first component of [`gradient_labels`].
pub fn probability_labels(c: &Circuit, ctx: &dyn LeafContext) -> Result<Vec<Vec<f64>>, LabelError> {
    Ok(gradient_labels(c, ctx)?
        .into_iter()
        .map(|v| v.into_iter().map(|l| l.p).collect())
        .collect())
}

/// Bottom-up evaluation; returns one value per circuit root.
pub fn evaluate<S: Semiring>(s: &S, c: &Circuit, labels: &[Vec<S::Elem>]) -> Vec<S::Elem> {
    let mut vals: Vec<S::Elem> = Vec::with_capacity(c.nodes.len());
    for n in &c.nodes {
        let v = match n {
            Node::TrueLeaf => s.one(),
            Node::FalseLeaf => s.zero(),
            Node::ChoiceLeaf { var, value } => labels[*var as usize][*value as usize].clone(),
            Node::Sum(cs) => cs.iter().fold(s.zero(), |acc, c| s.add(&acc, &vals[*c as usize])),
            Node::Product(cs) => cs.iter().fold(s.one(), |acc, c| s.mul(&acc, &vals[*c as usize])),
            Node::Decision { var, children } => {
                let weights = &labels[*var as usize];
                let mut acc = s.zero();
                for (k, c) in children.iter().enumerate() {
                    if *c == crate::compiler::FALSE_NODE {
                        continue;
                    }
                    let term = if *c == crate::compiler::TRUE_NODE {
                        weights[k].clone()
                    } else {
                        s.mul(&weights[k], &vals[*c as usize])
                    };
                    acc = s.add(&acc, &term);
                }
                acc
            }
        };
        vals.push(v);
    }
    c.roots.iter().map(|r| vals[*r as usize].clone()).collect()
}

/// Probability of every root.
pub fn probability(c: &Circuit, ctx: &dyn LeafContext) -> Result<Vec<f64>, LabelError> {
    let labels = probability_labels(c, ctx)?;
    let out = evaluate(&Probability, c, &labels);
    debug_assert!(out.iter().all(|p| (-1e-9..=1.0 + 1e-9).contains(p)), "probability out of range: {out:?}");
    Ok(out)
}

/// Probability and gradient of every root.
pub fn gradient(c: &Circuit, ctx: &dyn LeafContext) -> Result<Vec<DualValue>, LabelError> {
    let labels = gradient_labels(c, ctx)?;
    Ok(evaluate(&Gradient, c, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn p(i: u32) -> Slot {
        Slot::Param(ParamId(i))
    }

    #[test]
    fn add_merges_supports() {
        let a = DualValue::variable(0.2, p(1));
        let b = DualValue::variable(0.3, p(2));
        let c = Gradient.add(&a, &b);
        assert!((c.p - 0.5).abs() < 1e-15);
        assert_eq!(c.grad, vec![(p(1), 1.0), (p(2), 1.0)]);
        assert_eq!(Gradient.add(&a, &Gradient.zero()), a);
    }

    #[test]
    fn mul_applies_product_rule() {
        let a = DualValue::variable(0.5, p(1));
        let b = DualValue::constant(0.2);
        let c = Gradient.mul(&a, &b);
        assert!((c.p - 0.1).abs() < 1e-15);
        assert_eq!(c.grad, vec![(p(1), 0.2)]);
        assert_eq!(Gradient.mul(&a, &Gradient.one()), a);
    }

    #[test]
    fn residual_label_negates_gradient() {
        let mut ctx = TableContext::default();
        let eval = ctx.set_output("m_digit", vec![Term::atom("d0")], vec![0.8, 0.2]);
        let src = LeafSource::Residual(vec![LeafSource::Neural {
            model: crate::syntax::sym("m_digit"),
            inputs: vec![Term::atom("d0")],
            output: Some(0),
        }]);
        let l = leaf_label(&src, &ctx).unwrap();
        assert!((l.p - 0.2).abs() < 1e-15);
        assert_eq!(l.grad, vec![(Slot::Neural { eval, output: 0 }, -1.0)]);
    }

    #[test]
    fn learnable_label_is_unit_vector() {
        let ctx = TableContext {
            params: vec![0.2],
            ..Default::default()
        };
        let l = leaf_label(
            &LeafSource::Prob(ProbLabel::Learnable {
                param: ParamId(0),
                init: 0.2,
            }),
            &ctx,
        )
        .unwrap();
        assert_eq!(l, DualValue::variable(0.2, p(0)));
        let fixed = leaf_label(&LeafSource::Prob(ProbLabel::Fixed(0.2)), &ctx).unwrap();
        assert_eq!(fixed, DualValue::constant(0.2));
    }

    #[test]
    fn missing_inputs_are_errors() {
        let ctx = TableContext::default();
        let e = leaf_label(
            &LeafSource::Prob(ProbLabel::Learnable {
                param: ParamId(3),
                init: 0.5,
            }),
            &ctx,
        )
        .unwrap_err();
        assert_eq!(e, LabelError::UnregisteredParameter(3));
        let e = leaf_label(
            &LeafSource::Neural {
                model: crate::syntax::sym("m"),
                inputs: vec![],
                output: None,
            },
            &ctx,
        )
        .unwrap_err();
        assert!(matches!(e, LabelError::MissingNeuralOutput { .. }));
    }
}
