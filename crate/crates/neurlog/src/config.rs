//! Experiment configuration, one JSON document per experiment. Relative
//! paths resolve against the directory holding the document.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use neurlog_core::compiler::VarOrder;
use neurlog_core::learning::Loss;
use neurlog_core::neural::{Activation, Head, NetworkSpec, Optimizer};
use neurlog_core::syntax::Program;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub program: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub models: Vec<ModelConfig>,
    pub data: DataConfig,
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub engine: EngineSpec,
    /// Evaluate every this many optimizer steps, besides after each epoch.
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub hidden: Vec<LayerConfig>,
    pub outputs: usize,
    pub head: HeadSpec,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub units: usize,
    pub activation: ActivationSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSpec {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    Softmax,
    Sigmoid,
}

/// How ground input terms become feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    /// Feature vectors of the dataset's items.
    Items,
    /// Concatenated one-hot codes of integer inputs, one domain per input.
    OneHot { domains: Vec<Vec<i64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_param_optimizer")]
    pub param_optimizer: OptimizerSpec,
    pub loss: LossSpec,
    #[serde(default)]
    pub infoloss: Vec<InfolossSpec>,
}

fn default_param_optimizer() -> OptimizerSpec {
    OptimizerSpec::Sgd { lr: 1e-3 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    Nll,
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfolossSpec {
    pub model: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSpec {
    pub cache: bool,
    pub max_steps: u64,
    pub max_depth: usize,
    pub var_order: VarOrderSpec,
    pub max_nodes: usize,
}

impl Default for EngineSpec {
    fn default() -> Self {
        EngineSpec { cache: true, max_steps: 100_000, max_depth: 1_000, var_order: VarOrderSpec::MostOccurring, max_nodes: 10_000_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarOrderSpec {
    MostOccurring,
    FirstAppearance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Pairs of MNIST digits labeled with their sum.
    MnistAddition {
        train_pairs: usize,
        test_pairs: usize,
        #[serde(default)]
        noise_fraction: f64,
    },
    ForthAddition {
        train: usize,
        train_length: usize,
        test: usize,
        test_lengths: Vec<usize>,
    },
    ForthSort {
        train: usize,
        train_length: usize,
        test: usize,
        test_lengths: Vec<usize>,
    },
    Poker {
        train: usize,
        test: usize,
        sigma: f64,
        labeled_fraction: f64,
        distribution: [f64; 4],
    },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            anyhow::anyhow!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e)
        })?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        c.check()?;
        Ok(c)
    }

    pub fn program_path(&self) -> PathBuf {
        self.base_dir.join(&self.program)
    }

    pub fn load_program(&self) -> Result<Program> {
        crate::load_program(&self.program_path())
    }

    /// Checks that the program parses and that models, encoders and
    /// regularizers refer to each other consistently.
    pub fn check(&self) -> Result<()> {
        let program = self.load_program().with_context(|| format!("experiment {}", self.name))?;
        for n in &program.neural {
            let Some(m) = self.models.iter().find(|m| *m.name == *n.model) else {
                bail!("experiment {}: no model configured for network {}", self.name, n.model);
            };
            let width = match (&n.domain, m.head) {
                (Some(d), HeadSpec::Softmax) => d.len(),
                (None, HeadSpec::Sigmoid) => 1,
                _ => bail!("experiment {}: head of {} does not fit its annotation", self.name, m.name),
            };
            if m.outputs != width {
                bail!("experiment {}: model {} has {} outputs, annotation needs {width}", self.name, m.name, m.outputs);
            }
            if let EncoderConfig::OneHot { domains } = &m.encoder {
                if domains.len() != n.inputs.len() {
                    bail!("experiment {}: encoder of {} covers {} inputs, annotation has {}", self.name, m.name, domains.len(), n.inputs.len());
                }
            }
        }
        for m in &self.models {
            if !program.neural.iter().any(|n| *n.model == *m.name) {
                bail!("experiment {}: model {} is not used by the program", self.name, m.name);
            }
        }
        for i in &self.trainer.infoloss {
            if !self.models.iter().any(|m| m.name == i.model) {
                bail!("experiment {}: infoloss refers to unknown model {}", self.name, i.model);
            }
        }
        if self.trainer.batch_size == 0 {
            bail!("experiment {}: batch size must be positive", self.name);
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn spec(&self, input: usize) -> NetworkSpec {
        let hidden: Vec<(usize, Activation)> = self.hidden.iter().map(|l| (l.units, l.activation.into())).collect();
        let head = match self.head {
            HeadSpec::Softmax => Head::Softmax,
            HeadSpec::Sigmoid => Head::Sigmoid,
        };
        NetworkSpec::new(input, &hidden, self.outputs, head)
    }
}

impl From<ActivationSpec> for Activation {
    fn from(a: ActivationSpec) -> Self {
        match a {
            ActivationSpec::Identity => Activation::Identity,
            ActivationSpec::Relu => Activation::Relu,
            ActivationSpec::Tanh => Activation::Tanh,
            ActivationSpec::Sigmoid => Activation::Sigmoid,
        }
    }
}

impl From<OptimizerSpec> for Optimizer {
    fn from(o: OptimizerSpec) -> Self {
        match o {
            OptimizerSpec::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => Optimizer::Adam { lr, beta1, beta2, eps },
        }
    }
}

impl From<LossSpec> for Loss {
    fn from(l: LossSpec) -> Self {
        match l {
            LossSpec::Nll => Loss::Nll,
            LossSpec::CrossEntropy => Loss::CrossEntropy,
            LossSpec::Mse => Loss::Mse,
        }
    }
}

impl From<VarOrderSpec> for VarOrder {
    fn from(v: VarOrderSpec) -> Self {
        match v {
            VarOrderSpec::MostOccurring => VarOrder::MostOccurring,
            VarOrderSpec::FirstAppearance => VarOrder::FirstAppearance,
        }
    }
}
