//! Train/evaluate loop shared by all experiments, with one dataset builder
//! and one evaluator per task.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use neurlog_core::compiler::{complete, compile, CompileOptions};
use neurlog_core::grounder::{apply, ground_queries, unify, GroundOptions, Substitution};
use neurlog_core::learning::{ClassificationItem, Engine, Trainer, TrainerConfig};
use neurlog_core::neural::{InputEncoder, ModelRegistry, OneHotEncoder};
use neurlog_core::semiring::{probability, TableContext};
use neurlog_core::syntax::{Atom, Location, Program, Rule, Term};

use crate::config::{DataConfig, EncoderConfig, ExperimentConfig};
use crate::datasets::{
    addition_query, forth_addition_examples, forth_sort_examples, image_key, make_pair_dataset, make_synthetic_cards,
    CardConfig, Dataset, Example, Item, Split, RANKS,
};
use crate::metrics::{MetricsWriter, Record};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replaces the configured seed.
    pub seed: Option<u64>,
    /// Replaces the configured number of epochs.
    pub epochs: Option<usize>,
    /// Metrics file; the summary goes next to it. Defaults to
    /// `<name>.metrics.jsonl` in the working directory.
    pub metrics_out: Option<PathBuf>,
    /// Checkpoint stem written after training.
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Whether a card classifier recovered the intended classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Convergence {
    Converged,
    /// Every class maps to a different class, but not to itself.
    Permuted(Vec<usize>),
    /// Several classes map to the same class.
    Collapsed(Vec<usize>),
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub records: Vec<Record>,
    pub compilations: u64,
    /// Compilations triggered by training steps alone.
    pub train_compilations: u64,
    pub convergence: Option<Convergence>,
}

impl RunResult {
    pub fn last(&self) -> &Record {
        self.records.last().expect("a run writes at least one record")
    }
}

enum Evaluator {
    /// Argmax over candidate sums, plus direct digit accuracy.
    Sums { items: Vec<ClassificationItem> },
    /// Runs the program with every network replaced by its decisions.
    Decoded { tests: Vec<(usize, Vec<Example>)>, domains: BTreeMap<String, Vec<Vec<Term>>> },
    /// Card classification and outcome probabilities.
    Cards { games: Vec<Example> },
}

struct Task {
    dataset: Dataset,
    evaluator: Evaluator,
}

fn prepare(config: &ExperimentConfig, seed: u64, data_dir: &Path) -> Result<Task> {
    let task = match &config.data {
        DataConfig::MnistAddition { train_pairs, test_pairs, noise_fraction } => {
            let (train, test) = crate::load_mnist(data_dir)?;
            let train_pairs = make_pair_dataset(&train.labels, *train_pairs, seed, *noise_fraction)?;
            let test_pairs = make_pair_dataset(&test.labels, *test_pairs, seed.wrapping_add(1), 0.0)?;
            let mut ds = Dataset { key_prefix: Some("img_".into()), ..Default::default() };
            let mut items = Vec::new();
            for (name, split, images, pairs) in
                [("train", Split::Train, &train, &train_pairs), ("test", Split::Test, &test, &test_pairs)]
            {
                for p in pairs.iter() {
                    let (a, b) = (image_key(name, p.left), image_key(name, p.right));
                    for (k, i) in [(&a, p.left), (&b, p.right)] {
                        ds.items.push(Item {
                            key: k.clone(),
                            features: images.images[i].clone(),
                            label: Some(u32::from(images.labels[i])),
                            split,
                        });
                    }
                    ds.examples.push(Example { query: addition_query(&a, &b, p.label), target: 1.0, split });
                    if split == Split::Test {
                        items.push(ClassificationItem {
                            candidates: (0..=18).map(|z| addition_query(&a, &b, z)).collect(),
                            correct: p.label as usize,
                        });
                    }
                }
            }
            Task { dataset: ds, evaluator: Evaluator::Sums { items } }
        }
        DataConfig::ForthAddition { train, train_length, test, test_lengths }
        | DataConfig::ForthSort { train, train_length, test, test_lengths } => {
            let sort = matches!(config.data, DataConfig::ForthSort { .. });
            let generate = if sort { forth_sort_examples } else { forth_addition_examples };
            let ds = Dataset { examples: generate(seed, *train, *train_length, Split::Train), ..Dataset::default() };
            let tests = test_lengths
                .iter()
                .map(|&l| (l, generate(seed.wrapping_add(1000 + l as u64), *test, l, Split::Test)))
                .collect();
            let mut domains = BTreeMap::new();
            for m in &config.models {
                if let EncoderConfig::OneHot { domains: d } = &m.encoder {
                    domains.insert(m.name.clone(), one_hot_domains(d));
                }
            }
            Task { dataset: ds, evaluator: Evaluator::Decoded { tests, domains } }
        }
        DataConfig::Poker { train, test, sigma, labeled_fraction, distribution } => {
            let cfg = CardConfig { train: *train, test: *test, sigma: *sigma, labeled_fraction: *labeled_fraction };
            let ds = make_synthetic_cards(seed, *distribution, &cfg)?;
            let games = ds.examples.iter().filter(|e| e.split == Split::Test).cloned().collect();
            Task { dataset: ds, evaluator: Evaluator::Cards { games } }
        }
    };
    task.dataset.validate()?;
    Ok(task)
}

fn one_hot_domains(d: &[Vec<i64>]) -> Vec<Vec<Term>> {
    d.iter().map(|v| v.iter().map(|&i| Term::Int(i)).collect()).collect()
}

/// Builds the registry with every configured network and its encoder.
pub fn build_registry(config: &ExperimentConfig, program: &Program, dataset: &Dataset, seed: u64) -> Result<ModelRegistry> {
    let mut registry = ModelRegistry::new(program, seed);
    for m in &config.models {
        let encoder: Box<dyn InputEncoder> = match &m.encoder {
            EncoderConfig::Items => Box::new(dataset.encoder()),
            EncoderConfig::OneHot { domains } => Box::new(OneHotEncoder { domains: one_hot_domains(domains) }),
        };
        let spec = m.spec(encoder.width());
        registry.register(&m.name, spec, encoder).with_context(|| format!("registering {}", m.name))?;
    }
    Ok(registry)
}

/// Program and registry of an experiment, with networks freshly
/// initialized for `seed`. Used to evaluate queries against a checkpoint.
pub fn load_models(config: &ExperimentConfig, seed: u64, data_dir: &Path) -> Result<(Program, ModelRegistry)> {
    let program = config.load_program()?;
    let task = prepare(config, seed, data_dir)?;
    let registry = build_registry(config, &program, &task.dataset, seed.wrapping_add(1))?;
    Ok((program, registry))
}

fn ground_options(config: &ExperimentConfig) -> GroundOptions {
    GroundOptions { max_steps: config.engine.max_steps, max_depth: config.engine.max_depth, ..GroundOptions::default() }
}

fn compile_options(config: &ExperimentConfig) -> CompileOptions {
    CompileOptions { order: config.engine.var_order.into(), max_nodes: config.engine.max_nodes }
}

pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult> {
    let seed = opts.seed.unwrap_or(config.seed);
    let epochs = opts.epochs.unwrap_or(config.trainer.epochs);
    let data_dir = opts.data_dir.clone().unwrap_or_else(crate::data_dir);
    let program = config.load_program()?;
    let task = prepare(config, seed, &data_dir).with_context(|| format!("experiment {}: preparing data", config.name))?;
    let registry = build_registry(config, &program, &task.dataset, seed.wrapping_add(1))?;
    let mut engine = Engine::new(program, task.dataset.key_prefix.as_deref(), config.engine.cache);
    engine.ground = ground_options(config);
    engine.compile = compile_options(config);
    let trainer_config = TrainerConfig {
        batch_size: config.trainer.batch_size,
        epochs,
        neural: config.trainer.optimizer.into(),
        probabilistic: config.trainer.param_optimizer.into(),
        loss: config.trainer.loss.into(),
        infoloss: config.trainer.infoloss.iter().map(|i| (i.model.clone(), i.weight)).collect(),
        seed: seed.wrapping_add(2),
    };
    let mut trainer = Trainer::new(engine, registry, trainer_config);
    let train = task.dataset.split(Split::Train);

    let metrics_path = opts.metrics_out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", config.name)));
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut ctx = Evaluation { config, task: &task, verbose: opts.verbose };

    writer.write(ctx.record(&mut trainer, 0, None)?)?;
    let (mut loss_sum, mut loss_steps) = (0.0, 0u64);
    let mut train_compilations = 0;
    for epoch in 1..=epochs {
        if train.is_empty() {
            bail!("experiment {}: no training examples", config.name);
        }
        let batches = trainer.batches(train.len());
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| train[i].clone()).collect();
            let before = trainer.engine.cache_stats().compiles;
            let m = trainer
                .train_step(&batch)
                .with_context(|| format!("experiment {}, iteration {}", config.name, trainer.iteration + 1))?;
            train_compilations += trainer.engine.cache_stats().compiles - before;
            loss_sum += m.loss;
            loss_steps += 1;
            let last = b + 1 == n_batches;
            let due = config.eval_every.is_some_and(|k| k > 0 && trainer.iteration.is_multiple_of(k));
            if last || due {
                let loss = loss_sum / loss_steps as f64;
                (loss_sum, loss_steps) = (0.0, 0);
                writer.write(ctx.record(&mut trainer, epoch, Some(loss))?)?;
            }
        }
    }
    if let Some(stem) = &opts.checkpoint {
        crate::checkpoint::save(stem, &trainer.registry.snapshot())?;
    }
    let convergence = match &task.evaluator {
        Evaluator::Cards { .. } => Some(card_convergence(&trainer.registry, config)?),
        _ => None,
    };
    let compilations = trainer.engine.cache_stats().compiles;
    let (summary_path, records) = writer.finish()?;
    Ok(RunResult { metrics_path, summary_path, records, compilations, train_compilations, convergence })
}

struct Evaluation<'a> {
    config: &'a ExperimentConfig,
    task: &'a Task,
    verbose: bool,
}

impl Evaluation<'_> {
    fn record(&mut self, trainer: &mut Trainer, epoch: usize, loss: Option<f64>) -> Result<Record> {
        let mut extra = BTreeMap::new();
        let accuracy = match &self.task.evaluator {
            Evaluator::Sums { items } => {
                let model = &self.config.models[0].name;
                extra.insert("digit_accuracy".into(), item_accuracy(&trainer.registry, model, &self.task.dataset, "img_")?);
                trainer.accuracy_argmax(items)?
            }
            Evaluator::Decoded { tests, domains } => {
                let decoded = decoded_program(&trainer.engine.program, &trainer.registry, domains)?;
                let mut first = None;
                for (len, examples) in tests {
                    let acc = decoded_accuracy(&decoded, examples, self.config)?;
                    extra.insert(format!("accuracy_len{len}"), acc);
                    first.get_or_insert(acc);
                }
                first.unwrap_or(0.0)
            }
            Evaluator::Cards { games } => {
                let model = &self.config.models[0].name;
                extra.insert("prototype_accuracy".into(), item_accuracy(&trainer.registry, model, &self.task.dataset, "proto_")?);
                if !games.is_empty() {
                    let mut se = 0.0;
                    for g in games {
                        let p = trainer.probability(&g.query)?;
                        se += (p - g.target) * (p - g.target);
                    }
                    extra.insert("game_mse".into(), se / games.len() as f64);
                }
                item_accuracy(&trainer.registry, model, &self.task.dataset, "card_")?
            }
        };
        let params = trainer
            .registry
            .prob_names
            .iter()
            .cloned()
            .zip(trainer.registry.probs.iter().copied())
            .collect();
        let r = Record {
            experiment: self.config.name.clone(),
            iteration: trainer.iteration,
            epoch,
            loss,
            accuracy,
            params,
            extra,
            compilations: trainer.engine.cache_stats().compiles,
        };
        if self.verbose {
            eprintln!(
                "[{}] epoch {} iteration {} loss {} accuracy {:.4} {:?} {:?}",
                r.experiment,
                r.epoch,
                r.iteration,
                r.loss.map_or("-".into(), |l| format!("{l:.5}")),
                r.accuracy,
                r.params,
                r.extra
            );
        }
        Ok(r)
    }
}

/// Fraction of labeled test items whose key starts with `prefix` that the
/// network classifies correctly; ties go to the lowest class.
fn item_accuracy(registry: &ModelRegistry, model: &str, ds: &Dataset, prefix: &str) -> Result<f64> {
    let mut total = 0;
    let mut correct = 0;
    for it in &ds.items {
        let (Term::Atom(k), Some(label), Split::Test) = (&it.key, it.label, it.split) else {
            continue;
        };
        if !k.starts_with(prefix) {
            continue;
        }
        total += 1;
        let out = registry.predict(model, std::slice::from_ref(&it.key))?;
        if argmax(&out) == label as usize {
            correct += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The program with each neural annotation replaced by the facts its
/// network currently asserts: the most probable output of every input
/// combination, or for neural facts the inputs with probability above 1/2.
pub fn decoded_program(
    program: &Program,
    registry: &ModelRegistry,
    domains: &BTreeMap<String, Vec<Vec<Term>>>,
) -> Result<Program> {
    let mut out = program.clone();
    out.neural.clear();
    for n in &program.neural {
        let doms = domains.get(&*n.model).ok_or_else(|| anyhow!("no input domains for network {}", n.model))?;
        for inputs in cartesian(doms) {
            let probs = registry.predict(&n.model, &inputs)?;
            let output = match &n.domain {
                Some(d) => Some(d[argmax(&probs)].clone()),
                None if probs[0] > 0.5 => None,
                None => continue,
            };
            let mut s = unify(&Term::list(n.inputs.clone()), &Term::list(inputs), &Substitution::default())
                .ok_or_else(|| anyhow!("inputs of {} do not match its annotation", n.model))?;
            if let (Some(o), Some(v)) = (&n.output, output) {
                s = unify(o, &v, &s).ok_or_else(|| anyhow!("output of {} does not match its annotation", n.model))?;
            }
            let head = Atom { predicate: n.atom.predicate.clone(), args: n.atom.args.iter().map(|a| apply(a, &s)).collect() };
            out.rules.push(Rule { head, body: Vec::new(), location: Location::default() });
        }
    }
    Ok(out)
}

fn cartesian(domains: &[Vec<Term>]) -> Vec<Vec<Term>> {
    let mut acc: Vec<Vec<Term>> = vec![Vec::new()];
    for d in domains {
        acc = acc
            .into_iter()
            .flat_map(|prefix| {
                d.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect();
    }
    acc
}

/// Answers of `query` in a program without choices: the instances that
/// hold with probability one.
pub fn certain_answers(program: &Program, query: &Atom, ground: &GroundOptions, compile_opts: &CompileOptions) -> Result<Vec<Atom>> {
    let g = ground_queries(program, std::slice::from_ref(query), ground)?;
    let mut f = complete(&g)?;
    let roots = f.queries.clone();
    let c = compile(&mut f, &roots, compile_opts)?;
    let ps = probability(&c, &TableContext::from_program(program))?;
    Ok(g.queries.iter().zip(ps).filter(|(_, p)| *p > 1.0 - 1e-9).map(|(&a, _)| g.atom(a).clone()).collect())
}

/// Fraction of examples whose last argument is the unique answer of the
/// decoded program once that argument is left open.
fn decoded_accuracy(decoded: &Program, examples: &[Example], config: &ExperimentConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let ground = ground_options(config);
    let compile_opts = compile_options(config);
    let mut correct = 0;
    for ex in examples {
        let mut open = ex.query.clone();
        *open.args.last_mut().expect("query has an answer argument") = Term::var("Answer");
        let answers = certain_answers(decoded, &open, &ground, &compile_opts)?;
        if answers.len() == 1 && answers[0] == ex.query {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn card_convergence(registry: &ModelRegistry, config: &ExperimentConfig) -> Result<Convergence> {
    let model = &config.models[0].name;
    let mapping: Vec<usize> = (0..RANKS.len())
        .map(|r| Ok(argmax(&registry.predict(model, &[crate::datasets::prototype_key(r)])?)))
        .collect::<Result<_>>()?;
    let mut seen = mapping.clone();
    seen.sort_unstable();
    seen.dedup();
    Ok(if mapping.iter().enumerate().all(|(i, &m)| i == m) {
        Convergence::Converged
    } else if seen.len() == mapping.len() {
        Convergence::Permuted(mapping)
    } else {
        Convergence::Collapsed(mapping)
    })
}
