use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use neurlog::config::{ExperimentConfig, LossSpec, VarOrderSpec};
use neurlog::experiment::{run_experiment, Convergence, RunOptions};
use neurlog::metrics::{MetricsWriter, Record};
use neurlog_core::compiler::{complete, compile, Circuit, CompileOptions};
use neurlog_core::grounder::{ground_queries, GroundOptions, GroundProgram};
use neurlog_core::learning::{Engine, TrainExample, Trainer, TrainerConfig};
use neurlog_core::neural::{ModelRegistry, Optimizer, PROBABILITY_BLOCK};
use neurlog_core::oracle::{enumerate, DEFAULT_WORLD_LIMIT};
use neurlog_core::semiring::{gradient, probability, LeafContext, Slot, TableContext};
use neurlog_core::syntax::{parse_atom, Atom, Program};

#[derive(Parser)]
#[command(name = "neurlog", version, about = "Probabilistic logic programs with neural predicates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Text,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    MostOccurring,
    FirstAppearance,
}

#[derive(clap::Args)]
struct QueryArgs {
    /// Program file.
    program: PathBuf,
    /// Query atom, possibly with variables.
    query: String,
    /// Variable order for compilation.
    #[arg(long, value_enum, default_value = "most-occurring")]
    order: OrderArg,
    /// Resolution step budget.
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Probability of every ground instance of a query.
    Infer {
        #[command(flatten)]
        q: QueryArgs,
        /// Also print the partial derivative for every learnable slot.
        #[arg(long)]
        grad: bool,
        /// Cross-check against world enumeration.
        #[arg(long)]
        oracle: bool,
        /// Parameter values from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Experiment configuration providing the networks.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the relevant ground program of a query.
    Ground {
        #[command(flatten)]
        q: QueryArgs,
    },
    /// Compile a query and print circuit statistics.
    Compile {
        #[command(flatten)]
        q: QueryArgs,
        /// Print the circuit.
        #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "text")]
        dump: Option<DumpFormat>,
    },
    /// Probabilities by enumerating possible worlds.
    Oracle {
        #[command(flatten)]
        q: QueryArgs,
    },
    /// Learn the probabilities of a program from `p::atom.` examples.
    Learn {
        program: PathBuf,
        /// One example per line: `p::atom.` or `atom.` (target 1).
        examples: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "mse")]
        loss: LossArg,
        /// Seeds the example order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL metrics file; a CSV summary is written next to it.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Checkpoint stem for the learned probabilities.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an experiment described by a JSON configuration.
    Experiment {
        /// JSON configuration; program paths are relative to it.
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// JSONL metrics file; a CSV summary is written next to it.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Checkpoint stem for the final parameters (`.bin` and `.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root; overrides NEURLOG_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// No progress lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Nll,
    CrossEntropy,
    Mse,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Infer { q, grad, oracle, checkpoint, config, seed } => infer(&q, grad, oracle, checkpoint, config, seed),
        Command::Ground { q } => {
            let (program, query) = load(&q)?;
            print!("{}", ground(&program, &query, &q, GroundOptions::default())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Compile { q, dump } => {
            let (program, query) = load(&q)?;
            let (g, c) = compile_query(&program, &query, &q)?;
            println!("instances: {}", g.queries.len());
            println!("nodes: {}", c.len());
            match dump {
                Some(DumpFormat::Text) => print!("{}", c.to_text()),
                Some(DumpFormat::Dot) => print!("{}", c.to_dot()),
                None => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { q } => {
            let (program, query) = load(&q)?;
            if !program.neural.is_empty() {
                bail!("the oracle only handles programs without networks");
            }
            let g = ground(&program, &query, &q, GroundOptions::full())?;
            let e = enumerate(&g, &TableContext::from_program(&program), DEFAULT_WORLD_LIMIT)?;
            for (&a, p) in g.queries.iter().zip(&e.query_probability) {
                println!("{}: {p}", g.atom(a));
            }
            println!("worlds: {} total weight: {}", e.worlds, e.total_weight);
            Ok(ExitCode::SUCCESS)
        }
        Command::Learn { program, examples, epochs, lr, batch_size, loss, seed, metrics_out, checkpoint } => {
            let loss = match loss {
                LossArg::Nll => LossSpec::Nll,
                LossArg::CrossEntropy => LossSpec::CrossEntropy,
                LossArg::Mse => LossSpec::Mse,
            };
            learn(&program, &examples, epochs, lr, batch_size, loss, seed, metrics_out, checkpoint)
        }
        Command::Experiment { config, seed, epochs, metrics_out, checkpoint, data_dir, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions { seed, epochs, metrics_out, checkpoint, data_dir, verbose: !quiet };
            let r = run_experiment(&cfg, &opts)?;
            let last = r.last();
            println!("experiment: {}", cfg.name);
            println!("accuracy: {}", last.accuracy);
            for (k, v) in last.params.iter().chain(&last.extra) {
                println!("{k}: {v}");
            }
            println!("compilations: {}", r.compilations);
            match &r.convergence {
                Some(Convergence::Converged) => println!("convergence: converged"),
                Some(Convergence::Permuted(m)) => println!("convergence: not converged, classes permuted {m:?}"),
                Some(Convergence::Collapsed(m)) => println!("convergence: not converged, classes collapsed {m:?}"),
                None => {}
            }
            println!("metrics: {}", r.metrics_path.display());
            println!("summary: {}", r.summary_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(q: &QueryArgs) -> Result<(Program, Atom)> {
    let program = neurlog::load_program(&q.program)?;
    let query = parse_atom(&q.query).map_err(|e| anyhow!("<query>:{e}"))?;
    Ok((program, query))
}

fn ground(program: &Program, query: &Atom, q: &QueryArgs, base: GroundOptions) -> Result<GroundProgram> {
    let opts = GroundOptions { max_steps: q.max_steps, ..base };
    ground_queries(program, std::slice::from_ref(query), &opts).with_context(|| format!("grounding {query}"))
}

fn compile_query(program: &Program, query: &Atom, q: &QueryArgs) -> Result<(GroundProgram, Circuit)> {
    let g = ground(program, query, q, GroundOptions::default())?;
    let mut f = complete(&g)?;
    let roots = f.queries.clone();
    let order = match q.order {
        OrderArg::MostOccurring => VarOrderSpec::MostOccurring,
        OrderArg::FirstAppearance => VarOrderSpec::FirstAppearance,
    };
    let c = compile(&mut f, &roots, &CompileOptions { order: order.into(), ..CompileOptions::default() })?;
    Ok((g, c))
}

fn load_probabilities(stem: &Path, program: &Program) -> Result<Vec<f64>> {
    let blocks = neurlog::checkpoint::load(stem)?;
    let b = blocks
        .iter()
        .find(|b| b.name == PROBABILITY_BLOCK)
        .ok_or_else(|| anyhow!("{} has no {PROBABILITY_BLOCK} block", stem.display()))?;
    if b.values.len() != program.params.len() {
        bail!("{} holds {} probabilities, the program has {}", stem.display(), b.values.len(), program.params.len());
    }
    Ok(b.values.clone())
}

fn infer(
    q: &QueryArgs,
    grad: bool,
    oracle: bool,
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<ExitCode> {
    let (mut program, query) = load(q)?;
    let mut table = TableContext::from_program(&program);
    let mut registry: Option<ModelRegistry> = None;
    if let Some(path) = &config {
        let cfg = ExperimentConfig::load(path)?;
        let (p, mut r) = neurlog::experiment::load_models(&cfg, seed, &neurlog::data_dir())?;
        if let Some(stem) = &checkpoint {
            r.restore(&neurlog::checkpoint::load(stem)?)?;
        }
        program = p;
        registry = Some(r);
    } else if !program.neural.is_empty() {
        bail!("{} uses networks; pass --config to provide them", q.program.display());
    } else if let Some(stem) = &checkpoint {
        table.params = load_probabilities(stem, &program)?;
    }
    let (g, c) = compile_query(&program, &query, q)?;
    if let Some(r) = registry.as_mut() {
        for (model, inputs) in c.neural_calls() {
            r.forward(&model, &inputs)?;
        }
    }
    let ctx: &dyn LeafContext = match &registry {
        Some(r) => r,
        None => &table,
    };
    let values = gradient(&c, ctx)?;
    for (&a, v) in g.queries.iter().zip(&values) {
        println!("{}: {}", g.atom(a), v.p);
        if grad {
            for (slot, d) in &v.grad {
                println!("  d/d {}: {d}", slot_name(*slot, &program, registry.as_ref()));
            }
        }
    }
    if oracle {
        if registry.is_some() || !program.neural.is_empty() {
            bail!("--oracle only handles programs without networks");
        }
        let full = ground(&program, &query, q, GroundOptions::full())?;
        let e = enumerate(&full, &table, DEFAULT_WORLD_LIMIT)?;
        let circuit = probability(&c, &table)?;
        let mut worst: f64 = 0.0;
        for (&a, p) in full.queries.iter().zip(&e.query_probability) {
            let atom = full.atom(a);
            let compiled = g.queries.iter().position(|&b| g.atom(b) == atom).map_or(0.0, |i| circuit[i]);
            worst = worst.max((compiled - p).abs());
        }
        println!("oracle: {} worlds, largest difference {worst:e}", e.worlds);
        if worst > 1e-9 {
            eprintln!("error: circuit and oracle disagree");
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn slot_name(slot: Slot, program: &Program, registry: Option<&ModelRegistry>) -> String {
    match slot {
        Slot::Param(id) => program.params.get(id.index()).map_or_else(|| format!("param{}", id.0), |p| p.name.clone()),
        Slot::Neural { eval, output } => match registry.and_then(|r| r.evaluations().get(eval as usize).map(|e| (r, e))) {
            Some((r, e)) => {
                let inputs: Vec<String> = e.inputs.iter().map(ToString::to_string).collect();
                format!("{}({})[{output}]", r.models()[e.model].name, inputs.join(","))
            }
            None => format!("eval{eval}[{output}]"),
        },
    }
}

/// Parses `p::atom.` lines. Blank lines and `%` comments are skipped.
fn read_examples(path: &Path) -> Result<Vec<TrainExample>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let col = line.len() - line.trim_start().len() + 1;
        let at = |c: usize, msg: String| anyhow!("{}:{}:{}: {msg}", path.display(), i + 1, c);
        let (target, atom, offset) = match t.split_once("::") {
            Some((p, a)) => {
                let p: f64 = p.trim().parse().map_err(|_| at(col, format!("bad probability `{}`", p.trim())))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(at(col, format!("probability {p} outside [0, 1]")));
                }
                (p, a, col + t.len() - a.len())
            }
            None => (1.0, t, col),
        };
        let src = atom.trim().trim_end_matches('.');
        let query = parse_atom(src).map_err(|e| at(offset, e.to_string()))?;
        out.push(TrainExample { query, target });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn learn(
    program_path: &Path,
    examples_path: &Path,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    loss: LossSpec,
    seed: u64,
    metrics_out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<ExitCode> {
    let program = neurlog::load_program(program_path)?;
    if !program.neural.is_empty() {
        bail!("{} uses networks; use `neurlog experiment`", program_path.display());
    }
    let examples = read_examples(examples_path)?;
    if examples.is_empty() {
        bail!("{}: no examples", examples_path.display());
    }
    let registry = ModelRegistry::new(&program, seed);
    let config = TrainerConfig {
        batch_size: batch_size.max(1),
        epochs,
        neural: Optimizer::Sgd { lr },
        probabilistic: Optimizer::Sgd { lr },
        loss: loss.into(),
        infoloss: Vec::new(),
        seed,
    };
    let mut trainer = Trainer::new(Engine::new(program, None, true), registry, config);
    let metrics = metrics_out.unwrap_or_else(|| PathBuf::from("learn.metrics.jsonl"));
    let mut writer = MetricsWriter::create(&metrics)?;
    let record = |t: &mut Trainer, epoch: usize, loss: Option<f64>| -> Result<Record> {
        Ok(Record {
            experiment: "learn".into(),
            iteration: t.iteration,
            epoch,
            loss,
            accuracy: t.accuracy_threshold(&examples)?,
            params: t.registry.prob_names.iter().cloned().zip(t.registry.probs.iter().copied()).collect(),
            extra: Default::default(),
            compilations: t.engine.cache_stats().compiles,
        })
    };
    writer.write(record(&mut trainer, 0, None)?)?;
    for epoch in 1..=epochs {
        let mut total = 0.0;
        let batches = trainer.batches(examples.len());
        let n = batches.len();
        for idx in batches {
            let batch: Vec<_> = idx.iter().map(|&i| examples[i].clone()).collect();
            total += trainer.train_step(&batch)?.loss;
        }
        writer.write(record(&mut trainer, epoch, Some(total / n as f64))?)?;
    }
    for (name, p) in trainer.registry.prob_names.iter().zip(&trainer.registry.probs) {
        println!("{name}: {p}");
    }
    if let Some(stem) = &checkpoint {
        neurlog::checkpoint::save(stem, &trainer.registry.snapshot())?;
    }
    let (summary, _) = writer.finish()?;
    println!("metrics: {}", metrics.display());
    println!("summary: {}", summary.display());
    Ok(ExitCode::SUCCESS)
}
