//! Multilayer perceptrons, input encoders and the parameter registry.
//!
//! The registry owns every trainable quantity: network weights (updated by
//! backpropagation) and the learnable probabilities of the program
//! (updated directly from circuit gradients, then clipped and renormalized).

use alloc::format;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxBuildHasher;
use thiserror::Error;

use crate::semiring::LeafContext;
use crate::syntax::{print_term, ParamId, Program, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Normalization of the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Probability vector over the output units.
    Softmax,
    /// Single probability from one output unit.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Dense layers from `input` through `hidden` to a linear output layer of
/// `outputs` units followed by `head`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: usize,
    pub hidden: Vec<LayerSpec>,
    pub outputs: usize,
    pub head: Head,
}

impl NetworkSpec {
    pub fn new(input: usize, hidden: &[(usize, Activation)], outputs: usize, head: Head) -> Self {
        NetworkSpec {
            input,
            hidden: hidden
                .iter()
                .map(|&(width, activation)| LayerSpec { width, activation })
                .collect(),
            outputs,
            head,
        }
    }

    /// (fan-in, fan-out, activation) per dense layer.
    fn layers(&self) -> Vec<(usize, usize, Activation)> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for l in &self.hidden {
            out.push((prev, l.width, l.activation));
            prev = l.width;
        }
        out.push((prev, self.outputs, Activation::Identity));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o, _)| i * o + o).sum()
    }

    /// Shapes of the weight matrix and bias of every layer, in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .iter()
            .flat_map(|&(i, o, _)| [vec![o, i], vec![o]])
            .collect()
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            Head::Softmax => self.outputs,
            Head::Sigmoid => 1,
        }
    }

    /// Fresh parameters with zero biases. Weights feeding a ReLU are uniform
    /// in `±sqrt(6 / fan_in)`, all others in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out, act) in self.layers() {
            let bound = match act {
                Activation::Relu => libm::sqrt(6.0 / fan_in as f64),
                _ => libm::sqrt(6.0 / (fan_in + fan_out) as f64),
            };
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(core::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    /// Activations of every layer (input first) and the head output.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        for (fan_in, fan_out, act) in self.layers() {
            let prev = acts.last().expect("input");
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut y = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *yo += row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                *yo = act.apply(*yo);
            }
            off += fan_in * fan_out + fan_out;
            acts.push(y);
        }
        let logits = acts.last().expect("output");
        let out = match self.head {
            Head::Softmax => softmax(logits),
            Head::Sigmoid => vec![sigmoid(logits[0])],
        };
        (acts, out)
    }

    /// Accumulates into `grads` the gradient of `seed · output` with respect
    /// to the parameters.
    pub fn backward(&self, params: &[f64], acts: &[Vec<f64>], out: &[f64], seed: &[f64], grads: &mut [f64]) {
        let mut delta: Vec<f64> = match self.head {
            Head::Softmax => {
                let dot: f64 = seed.iter().zip(out).map(|(g, p)| g * p).sum();
                out.iter().zip(seed).map(|(p, g)| p * (g - dot)).collect()
            }
            Head::Sigmoid => vec![seed[0] * out[0] * (1.0 - out[0])],
        };
        let layers = self.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(i, o, _) in &layers {
            offsets.push(off);
            off += i * o + o;
        }
        for (l, &(fan_in, fan_out, act)) in layers.iter().enumerate().rev() {
            let y = &acts[l + 1];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= act.derivative(yo);
            }
            let x = &acts[l];
            let off = offsets[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grads[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grads[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wi;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Maps ground input terms to a feature vector.
pub trait InputEncoder {
    fn encode(&self, inputs: &[Term]) -> Option<Vec<f64>>;
    fn width(&self) -> usize;
}

/// Feature vectors looked up per term; several inputs are concatenated.
#[derive(Clone, Debug, Default)]
pub struct TableEncoder {
    table: HashMap<Term, Vec<f64>, FxBuildHasher>,
    width: usize,
    arity: usize,
}

impl TableEncoder {
    pub fn new(arity: usize) -> Self {
        TableEncoder {
            table: HashMap::default(),
            width: 0,
            arity,
        }
    }

    pub fn insert(&mut self, key: Term, features: Vec<f64>) {
        self.width = features.len() * self.arity;
        self.table.insert(key, features);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl InputEncoder for TableEncoder {
    fn encode(&self, inputs: &[Term]) -> Option<Vec<f64>> {
        if inputs.len() != self.arity {
            return None;
        }
        let mut out = Vec::with_capacity(self.width);
        for t in inputs {
            out.extend_from_slice(self.table.get(t)?);
        }
        Some(out)
    }

    fn width(&self) -> usize {
        self.width
    }
}

/// One-hot encoding of each input over its own domain, concatenated.
#[derive(Clone, Debug)]
pub struct OneHotEncoder {
    pub domains: Vec<Vec<Term>>,
}

impl InputEncoder for OneHotEncoder {
    fn encode(&self, inputs: &[Term]) -> Option<Vec<f64>> {
        if inputs.len() != self.domains.len() {
            return None;
        }
        let mut out = vec![0.0; self.width()];
        let mut off = 0;
        for (t, dom) in inputs.iter().zip(&self.domains) {
            out[off + dom.iter().position(|d| d == t)?] = 1.0;
            off += dom.len();
        }
        Some(out)
    }

    fn width(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NeuralError {
    #[error("unknown network {0}")]
    UnknownModel(String),
    #[error("network {model} has no encoding for {inputs}")]
    EncoderMiss { model: String, inputs: String },
    #[error("evaluation {0} is not part of the current batch")]
    StaleEvaluation(u32),
    #[error("network {model} expects {expected} inputs, encoder produces {actual}")]
    WidthMismatch { model: String, expected: usize, actual: usize },
    #[error("checkpoint does not match the registry: {0}")]
    CheckpointMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, opt: Optimizer, params: &mut [f64], grads: &[f64]) {
        match opt {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - libm::pow(beta1, self.t as f64);
                let c2 = 1.0 - libm::pow(beta2, self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
    }
}

pub struct Model {
    pub name: String,
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
    pub state: OptimizerState,
    encoder: Box<dyn InputEncoder>,
}

/// A retained forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: usize,
    pub inputs: Vec<Term>,
    pub activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Name of the checkpoint block holding the learnable probabilities.
pub const PROBABILITY_BLOCK: &str = "probabilities";

/// A named slice of parameters with the shapes it is made of.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<f64>,
}

/// Networks, learnable probabilities and the forward passes of the current
/// batch.
pub struct ModelRegistry {
    models: Vec<Model>,
    by_name: BTreeMap<String, usize>,
    pub probs: Vec<f64>,
    pub prob_grads: Vec<f64>,
    pub prob_names: Vec<String>,
    pub prob_state: OptimizerState,
    /// Parameters of each annotated disjunction, kept summing to one.
    pub groups: Vec<Vec<ParamId>>,
    evals: Vec<Evaluation>,
    memo: HashMap<(usize, Vec<Term>), u32, FxBuildHasher>,
    forward_calls: u64,
    rng: ChaCha8Rng,
}

impl ModelRegistry {
    /// Registry holding the learnable probabilities of `program`; `seed`
    /// drives network initialization.
    pub fn new(program: &Program, seed: u64) -> Self {
        let n = program.params.len();
        ModelRegistry {
            models: Vec::new(),
            by_name: BTreeMap::new(),
            probs: program.params.iter().map(|p| p.init).collect(),
            prob_grads: vec![0.0; n],
            prob_names: program.params.iter().map(|p| p.name.clone()).collect(),
            prob_state: OptimizerState::new(n),
            groups: program.param_groups.clone(),
            evals: Vec::new(),
            memo: HashMap::default(),
            forward_calls: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Adds a network with freshly initialized weights.
    pub fn register(
        &mut self,
        name: &str,
        spec: NetworkSpec,
        encoder: Box<dyn InputEncoder>,
    ) -> Result<(), NeuralError> {
        if encoder.width() != spec.input {
            return Err(NeuralError::WidthMismatch {
                model: name.to_string(),
                expected: spec.input,
                actual: encoder.width(),
            });
        }
        let params = spec.init(&mut self.rng);
        let n = params.len();
        let model = Model {
            name: name.to_string(),
            spec,
            params,
            grads: vec![0.0; n],
            state: OptimizerState::new(n),
            encoder,
        };
        match self.by_name.get(name) {
            Some(&i) => self.models[i] = model,
            None => {
                self.by_name.insert(name.to_string(), self.models.len());
                self.models.push(model);
            }
        }
        Ok(())
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn model(&self, name: &str) -> Option<&Model> {
        self.by_name.get(name).map(|&i| &self.models[i])
    }

    pub fn model_mut(&mut self, name: &str) -> Option<&mut Model> {
        self.by_name.get(name).map(|&i| &mut self.models[i])
    }

    /// Number of forward passes actually computed.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls
    }

    pub fn evaluations(&self) -> &[Evaluation] {
        &self.evals
    }

    /// Forgets the forward passes of the previous batch.
    pub fn clear_batch(&mut self) {
        self.evals.clear();
        self.memo.clear();
    }

    /// Runs `model` on `inputs`, reusing an earlier pass of this batch.
    pub fn forward(&mut self, model: &str, inputs: &[Term]) -> Result<u32, NeuralError> {
        let mi = *self
            .by_name
            .get(model)
            .ok_or_else(|| NeuralError::UnknownModel(model.to_string()))?;
        if let Some(&id) = self.memo.get(&(mi, inputs.to_vec())) {
            return Ok(id);
        }
        let m = &self.models[mi];
        let x = m.encoder.encode(inputs).ok_or_else(|| NeuralError::EncoderMiss {
            model: model.to_string(),
            inputs: print_term(&Term::list(inputs.to_vec())),
        })?;
        let (activations, output) = m.spec.forward(&m.params, &x);
        self.forward_calls += 1;
        let id = self.evals.len() as u32;
        self.evals.push(Evaluation {
            model: mi,
            inputs: inputs.to_vec(),
            activations,
            output,
        });
        self.memo.insert((mi, inputs.to_vec()), id);
        Ok(id)
    }

    pub fn output(&self, eval: u32) -> Result<&[f64], NeuralError> {
        self.evals
            .get(eval as usize)
            .map(|e| e.output.as_slice())
            .ok_or(NeuralError::StaleEvaluation(eval))
    }

    /// Evaluation id of an earlier pass of this batch.
    pub fn lookup(&self, model: &str, inputs: &[Term]) -> Option<u32> {
        let mi = *self.by_name.get(model)?;
        self.memo.get(&(mi, inputs.to_vec())).copied()
    }

    /// Output distribution without retaining the pass.
    pub fn predict(&self, model: &str, inputs: &[Term]) -> Result<Vec<f64>, NeuralError> {
        let m = self.model(model).ok_or_else(|| NeuralError::UnknownModel(model.to_string()))?;
        let x = m.encoder.encode(inputs).ok_or_else(|| NeuralError::EncoderMiss {
            model: model.to_string(),
            inputs: print_term(&Term::list(inputs.to_vec())),
        })?;
        Ok(m.spec.forward(&m.params, &x).1)
    }

    /// Backpropagates `seeds` (loss gradient per output, per evaluation)
    /// into the networks' gradient accumulators.
    pub fn backward(&mut self, seeds: &[(u32, Vec<f64>)]) -> Result<(), NeuralError> {
        for (eval, seed) in seeds {
            let e = self.evals.get(*eval as usize).ok_or(NeuralError::StaleEvaluation(*eval))?;
            let m = &mut self.models[e.model];
            m.spec.backward(&m.params, &e.activations, &e.output, seed, &mut m.grads);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for m in &mut self.models {
            m.grads.iter_mut().for_each(|g| *g = 0.0);
        }
        self.prob_grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Applies one update with the accumulated gradients and clears them.
    /// Probabilities are clipped to `[0, 1]` and groups renormalized.
    pub fn step(&mut self, neural: Optimizer, probabilistic: Optimizer) {
        for m in &mut self.models {
            m.state.apply(neural, &mut m.params, &m.grads);
        }
        self.prob_state.apply(probabilistic, &mut self.probs, &self.prob_grads);
        self.normalize_probs();
        self.zero_grad();
    }

    /// Clips every probability to `[0, 1]` and rescales each group to sum
    /// to one; a group clipped to all zeros becomes uniform.
    pub fn normalize_probs(&mut self) {
        for p in &mut self.probs {
            *p = p.clamp(0.0, 1.0);
        }
        for g in &self.groups {
            let s: f64 = g.iter().map(|id| self.probs[id.index()]).sum();
            for id in g {
                self.probs[id.index()] = if s > 0.0 {
                    self.probs[id.index()] / s
                } else {
                    1.0 / g.len() as f64
                };
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.params.len()).sum::<usize>() + self.probs.len()
    }

    /// Parameter blocks in a fixed order: every network in registration
    /// order, then the learnable probabilities as one block.
    pub fn snapshot(&self) -> Vec<ParamBlock> {
        let mut out: Vec<ParamBlock> = self
            .models
            .iter()
            .map(|m| ParamBlock {
                name: m.name.clone(),
                shapes: m.spec.shapes(),
                values: m.params.clone(),
            })
            .collect();
        out.push(ParamBlock {
            name: String::from(PROBABILITY_BLOCK),
            shapes: vec![vec![self.probs.len()]],
            values: self.probs.clone(),
        });
        out
    }

    /// Loads blocks produced by [`ModelRegistry::snapshot`] on a registry
    /// with the same networks and parameters. Optimizer state is reset.
    pub fn restore(&mut self, blocks: &[ParamBlock]) -> Result<(), NeuralError> {
        let own = self.snapshot();
        if own.len() != blocks.len() {
            return Err(NeuralError::CheckpointMismatch(format!(
                "{} blocks, expected {}",
                blocks.len(),
                own.len()
            )));
        }
        for (a, b) in own.iter().zip(blocks) {
            if a.name != b.name || a.shapes != b.shapes || a.values.len() != b.values.len() {
                return Err(NeuralError::CheckpointMismatch(format!(
                    "block {} {:?} does not match {} {:?}",
                    b.name, b.shapes, a.name, a.shapes
                )));
            }
        }
        let (probs, nets) = blocks.split_last().expect("at least the probability block");
        for (m, b) in self.models.iter_mut().zip(nets) {
            m.params.copy_from_slice(&b.values);
            m.state = OptimizerState::new(m.params.len());
        }
        self.probs.copy_from_slice(&probs.values);
        self.prob_state = OptimizerState::new(self.probs.len());
        Ok(())
    }

    pub fn optimizer_slots(&self) -> usize {
        self.models.iter().map(|m| m.state.m.len()).sum::<usize>() + self.prob_state.m.len()
    }
}

impl LeafContext for ModelRegistry {
    fn param(&self, id: ParamId) -> Option<f64> {
        self.probs.get(id.index()).copied()
    }

    fn neural(&self, model: &str, inputs: &[Term], output: Option<usize>) -> Option<(f64, u32)> {
        let id = self.lookup(model, inputs)?;
        Some((*self.evals[id as usize].output.get(output.unwrap_or(0))?, id))
    }
}

impl core::fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ModelRegistry")
            .field("models", &self.by_name.keys().collect::<Vec<_>>())
            .field("probs", &self.probs)
            .field("evaluations", &self.evals.len())
            .finish()
    }
}
