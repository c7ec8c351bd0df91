//! `axrx` — train small multi-label classifiers, craft gradient-based
//! adversarial examples against them, evaluate input-transform and
//! adversarial-training defenses, and run the grid experiments (transfer
//! matrix, ensemble hold-out, iteration/epsilon/defense sweeps).
//!
//! Every verb accepts `--config <file.json>` whose fields override the
//! command-line flags (flags supply defaults, the file wins). All outputs
//! (CSV grids, JSON reports, model and dataset files) are deterministic:
//! rerunning a verb with the same inputs produces byte-identical files.
//!
//! Exit codes: 0 on success, 2 when the requested plan fails validation
//! (bad flags, malformed config, missing inputs), 3 when a validated plan
//! aborts at runtime. `AXRX_WORKERS` caps the worker threads used for
//! per-example attack parallelism.

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use axrx_core::attacks::{attack, AttackMethod, AttackSpec};
use axrx_core::data::{generate_synthetic, split_dataset, write_dataset, Dataset, SyntheticConfig};
use axrx_core::defenses::{adversarial_train, defend_pdt, DefenseSpec};
use axrx_core::experiments::{load_eval_dataset, write_csv, ExperimentKind, ExperimentPlan, Row};
use axrx_core::metrics::{l2_distance, mean_auc, EvalReport};
use axrx_core::models::{ArchTag, Model};
use axrx_core::train::{train, TrainConfig};

/// A failed run, tagged with the exit code it should map to.
enum Failure {
    /// The plan never validated: exit code 2.
    Validation(String),
    /// A validated plan aborted while running: exit code 3.
    Runtime(String),
}

type CmdResult = Result<(), Failure>;

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn aborted(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "axrx",
    about = "Adversarial attack and defense experiments on small multi-label classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-label dataset and write it to disk.
    GenData(GenDataArgs),
    /// Train a classifier with mini-batch Adam on clean images.
    Train(TrainArgs),
    /// Adversarially train a classifier (mixed clean/adversarial loss).
    Advtrain(AdvTrainArgs),
    /// Craft adversarial examples against a model and report white-box AUC.
    Attack(AttackCmdArgs),
    /// Evaluate a (possibly defended) model on attacked inputs.
    DefendEval(DefendEvalArgs),
    /// Parameter sweeps: attack iterations, epsilon, or defense robustness.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Full source x method x target transfer matrix.
    Matrix(MatrixArgs),
    /// Leave-one-out ensemble attack with hold-out evaluation.
    Ensemble(EnsembleArgs),
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Sweep the iteration count of one method on a source/target pair.
    Iters(IterSweepArgs),
    /// Sweep epsilon for one or more methods, white box on one model.
    Eps(EpsSweepArgs),
    /// Robustness of three defense setups over an epsilon grid.
    Defense(DefenseSweepArgs),
}

/// Attack hyperparameters shared by every attacking verb. In a JSON config
/// these live under the `"attack"` key.
#[derive(Args, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct AttackFlags {
    /// fgsm | pgd | mifgsm | daa | dii-fgsm
    #[arg(long, default_value = "pgd")]
    method: String,
    /// L-infinity radius in pixel units.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Iteration count T (FGSM always runs one step).
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Step size alpha; defaults to 2.5*epsilon/T (epsilon for FGSM).
    #[arg(long)]
    step_size: Option<f64>,
    /// MIFGSM momentum decay mu.
    #[arg(long, default_value_t = 1.0)]
    momentum: f64,
    /// DII-FGSM input-transform probability p.
    #[arg(long, default_value_t = 0.5)]
    transform_prob: f64,
    /// DAA neighbor-coupling coefficient c.
    #[arg(long, default_value_t = 0.1)]
    daa_coeff: f64,
    /// DAA minibatch size M.
    #[arg(long, default_value_t = 8)]
    daa_batch: usize,
    /// Start from a uniform random point in the ball (defaults to PGD only).
    #[arg(long)]
    random_start: Option<bool>,
    /// Seed for attack-time randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackFlags {
    fn to_spec(&self) -> Result<AttackSpec, Failure> {
        let method = AttackMethod::parse(&self.method).map_err(invalid)?;
        let mut spec = AttackSpec::new(method);
        spec.epsilon = self.epsilon;
        spec.iterations = self.iterations;
        spec.step_size = self.step_size;
        spec.momentum = self.momentum;
        spec.transform_prob = self.transform_prob;
        spec.daa_coeff = self.daa_coeff;
        spec.daa_batch = self.daa_batch;
        if let Some(rs) = self.random_start {
            spec.random_start = rs;
        }
        spec.seed = self.seed;
        spec.validate().map_err(invalid)?;
        Ok(spec)
    }
}

/// Pixel-deflection / non-local-means transform parameters. In a JSON config
/// these live under the `"defense"` key.
#[derive(Args, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct DefenseFlags {
    /// Number of pixel swaps per image.
    #[arg(long, default_value_t = 300)]
    deflections: usize,
    /// Half-width of the window a deflection source is drawn from.
    #[arg(long, default_value_t = 10)]
    window_radius: usize,
    /// Non-local-means bandwidth.
    #[arg(long, default_value_t = 0.1)]
    nlm_h: f64,
    /// Seed for the inference-time deflection randomness.
    #[arg(long, default_value_t = 0)]
    defense_seed: u64,
}

impl DefenseFlags {
    fn to_spec(&self) -> Result<DefenseSpec, Failure> {
        let spec = DefenseSpec {
            deflections: self.deflections,
            window_radius: self.window_radius,
            nlm_h: self.nlm_h,
            seed: self.defense_seed,
            ..DefenseSpec::default()
        };
        spec.validate().map_err(invalid)?;
        Ok(spec)
    }
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 4000)]
    n: usize,
    /// Image side length S (images are S x S).
    #[arg(long, default_value_t = 32)]
    side: usize,
    /// Number of labels per example.
    #[arg(long, default_value_t = 6)]
    labels: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Fraction of labels marked uncertain (resolved downstream by policy).
    #[arg(long, default_value_t = 0.05)]
    uncertainty_rate: f64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// linear | mlp | cnn_small | cnn_wide
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Early-stop patience in epochs; 0 disables early stopping.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Seed for init, shuffling, and the train/val/test split.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output model checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report of clean test AUC.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvTrainArgs {
    #[command(flatten)]
    base: TrainArgs,
    /// Weight on the clean-loss term (the adversarial term gets 1-lambda).
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    /// Epsilon of the training-time PGD attack.
    #[arg(long, default_value_t = 4.0 / 255.0)]
    inner_epsilon: f64,
    /// Iterations of the training-time PGD attack.
    #[arg(long, default_value_t = 10)]
    inner_iterations: usize,
    /// Clean warm-up epochs before the adversarial term is mixed in.
    #[arg(long, default_value_t = 6)]
    pretrain_epochs: usize,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackCmdArgs {
    /// Model checkpoint to craft against and evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file to draw inputs from.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    attack: AttackFlags,
    /// Evaluate only the first N examples.
    #[arg(long)]
    max_examples: Option<usize>,
    /// JSON evaluation report output path.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Single-row CSV output path.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefendEvalArgs {
    /// Model checkpoint doing the final classification.
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint the attack is crafted against (defaults to --model).
    #[arg(long)]
    craft_on: Option<PathBuf>,
    /// Dataset file to draw inputs from.
    #[arg(long)]
    data: PathBuf,
    /// Pass attacked inputs through pixel deflection + non-local means.
    #[arg(long, default_value_t = false)]
    transform: bool,
    #[command(flatten)]
    defense: DefenseFlags,
    #[command(flatten)]
    attack: AttackFlags,
    /// Evaluate only the first N examples.
    #[arg(long)]
    max_examples: Option<usize>,
    /// JSON evaluation report output path.
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IterSweepArgs {
    /// Checkpoint the attack is crafted against.
    #[arg(long)]
    source: PathBuf,
    /// Checkpoint the attack transfers to.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated iteration grid.
    #[arg(long, default_value = "1,2,5,10,20,40,80")]
    grid: String,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpsSweepArgs {
    /// Checkpoint attacked in white box.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated method list, or "all".
    #[arg(long, default_value = "all")]
    methods: String,
    /// Comma-separated epsilon grid.
    #[arg(long, default_value = "0.01,0.05,0.1,0.2,0.3,0.4")]
    grid: String,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefenseSweepArgs {
    /// Standard-trained checkpoint (attack source for the transform series).
    #[arg(long)]
    standard: PathBuf,
    /// Adversarially trained checkpoint.
    #[arg(long)]
    advtrained: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated epsilon grid.
    #[arg(long, default_value = "0.01,0.05,0.1,0.2,0.3")]
    grid: String,
    #[command(flatten)]
    defense: DefenseFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixArgs {
    /// Model checkpoints; every one is both attack source and target.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated method list, or "all".
    #[arg(long, default_value = "all")]
    methods: String,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleArgs {
    /// Model checkpoints; each in turn is held out while the rest form a
    /// uniform logit ensemble the attack is crafted against.
    #[arg(long, num_args = 2.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated method list, or "all".
    #[arg(long, default_value = "all")]
    methods: String,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_workers().and_then(|()| dispatch(cli.command)) {
        match f {
            Failure::Validation(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            Failure::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(3)
            }
        }
    } else {
        ExitCode::SUCCESS
    }
}

/// Cap the worker pool used for per-example attack parallelism.
fn configure_workers() -> CmdResult {
    let Ok(raw) = std::env::var("AXRX_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| invalid(format!("AXRX_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(aborted)
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData(a) => gen_data(with_config(a)?),
        Command::Train(a) => run_train(with_config(a)?, None),
        Command::Advtrain(a) => {
            let a = with_config(a)?;
            let defense = advtrain_defense(&a)?;
            run_train(a.base, Some(defense))
        }
        Command::Attack(a) => run_attack(with_config(a)?),
        Command::DefendEval(a) => run_defend_eval(with_config(a)?),
        Command::Sweep(SweepCommand::Iters(a)) => {
            let a = with_config(a)?;
            let plan = ExperimentPlan {
                kind: ExperimentKind::IterationSweep,
                checkpoints: vec![a.source.clone(), a.target.clone()],
                dataset: a.data.clone(),
                methods: vec![AttackMethod::parse(&a.attack.method).map_err(invalid)?],
                iteration_grid: parse_grid(&a.grid)?,
                epsilon_grid: vec![],
                defense: None,
                attack: a.attack.to_spec()?,
                max_examples: a.max_examples,
                out_csv: a.out_csv.clone(),
            };
            run_plan(plan)
        }
        Command::Sweep(SweepCommand::Eps(a)) => {
            let a = with_config(a)?;
            let plan = ExperimentPlan {
                kind: ExperimentKind::EpsilonSweep,
                checkpoints: vec![a.model.clone()],
                dataset: a.data.clone(),
                methods: parse_methods(&a.methods)?,
                iteration_grid: vec![],
                epsilon_grid: parse_grid(&a.grid)?,
                defense: None,
                attack: a.attack.to_spec()?,
                max_examples: a.max_examples,
                out_csv: a.out_csv.clone(),
            };
            run_plan(plan)
        }
        Command::Sweep(SweepCommand::Defense(a)) => {
            let a = with_config(a)?;
            let plan = ExperimentPlan {
                kind: ExperimentKind::DefenseSweep,
                checkpoints: vec![a.standard.clone(), a.advtrained.clone()],
                dataset: a.data.clone(),
                methods: vec![AttackMethod::Pgd],
                iteration_grid: vec![],
                epsilon_grid: parse_grid(&a.grid)?,
                defense: Some(a.defense.to_spec()?),
                attack: a.attack.to_spec()?,
                max_examples: a.max_examples,
                out_csv: a.out_csv.clone(),
            };
            run_plan(plan)
        }
        Command::Matrix(a) => {
            let a = with_config(a)?;
            let plan = ExperimentPlan {
                kind: ExperimentKind::TransferMatrix,
                checkpoints: a.models.clone(),
                dataset: a.data.clone(),
                methods: parse_methods(&a.methods)?,
                iteration_grid: vec![],
                epsilon_grid: vec![],
                defense: None,
                attack: a.attack.to_spec()?,
                max_examples: a.max_examples,
                out_csv: a.out_csv.clone(),
            };
            run_plan(plan)
        }
        Command::Ensemble(a) => {
            let a = with_config(a)?;
            let plan = ExperimentPlan {
                kind: ExperimentKind::EnsembleHoldout,
                checkpoints: a.models.clone(),
                dataset: a.data.clone(),
                methods: parse_methods(&a.methods)?,
                iteration_grid: vec![],
                epsilon_grid: vec![],
                defense: None,
                attack: a.attack.to_spec()?,
                max_examples: a.max_examples,
                out_csv: a.out_csv.clone(),
            };
            run_plan(plan)
        }
    }
}

/// Overlay the JSON config file (if any) onto the flag-derived arguments.
/// Object fields merge recursively; everything else is replaced wholesale.
fn with_config<T>(args: T) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned + HasConfig,
{
    let Some(path) = args.config_path().cloned() else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| invalid(format!("reading config {}: {e}", path.display())))?;
    let overlay: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("parsing config {}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&args).map_err(invalid)?;
    merge_json(&mut base, &overlay);
    serde_json::from_value(base)
        .map_err(|e| invalid(format!("applying config {}: {e}", path.display())))
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(key) {
                    Some(slot) => merge_json(slot, value),
                    None => {
                        b.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (slot, value) => *slot = value.clone(),
    }
}

/// Access to the (non-serialized) `--config` flag of an argument struct.
trait HasConfig {
    fn config_path(&self) -> Option<&PathBuf>;
}

macro_rules! has_config {
    ($($t:ty => $field:ident),* $(,)?) => {
        $(impl HasConfig for $t {
            fn config_path(&self) -> Option<&PathBuf> {
                self.$field.as_ref()
            }
        })*
    };
}

has_config!(
    GenDataArgs => config,
    TrainArgs => config,
    AttackCmdArgs => config,
    DefendEvalArgs => config,
    IterSweepArgs => config,
    EpsSweepArgs => config,
    DefenseSweepArgs => config,
    MatrixArgs => config,
    EnsembleArgs => config,
);

impl HasConfig for AdvTrainArgs {
    fn config_path(&self) -> Option<&PathBuf> {
        self.base.config.as_ref()
    }
}

fn parse_grid<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, Failure>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|e| invalid(format!("bad grid entry {p:?}: {e}")))
        })
        .collect()
}

fn parse_methods(s: &str) -> Result<Vec<AttackMethod>, Failure> {
    if s.trim() == "all" {
        return Ok(AttackMethod::ALL.to_vec());
    }
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| AttackMethod::parse(p).map_err(invalid))
        .collect()
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SyntheticConfig {
        n: a.n,
        side: a.side,
        num_labels: a.labels,
        seed: a.seed,
        uncertainty_rate: a.uncertainty_rate,
    };
    let ds = generate_synthetic(&cfg).map_err(invalid)?;
    write_dataset(&ds, &a.out).map_err(aborted)?;
    println!(
        "wrote {} examples ({}x{}, {} labels, seed {}) to {}",
        a.n,
        a.side,
        a.side,
        a.labels,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn advtrain_defense(a: &AdvTrainArgs) -> Result<DefenseSpec, Failure> {
    let mut inner = AttackSpec::new(AttackMethod::Pgd);
    inner.epsilon = a.inner_epsilon;
    inner.iterations = a.inner_iterations;
    let spec = DefenseSpec {
        lambda: a.lambda,
        inner_attack: inner,
        pretrain_epochs: a.pretrain_epochs,
        ..DefenseSpec::default()
    };
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

/// Shared train/advtrain body: load and split the dataset, fit, save the
/// checkpoint, optionally write a clean-test-AUC report.
fn run_train(a: TrainArgs, defense: Option<DefenseSpec>) -> CmdResult {
    let arch = ArchTag::parse(&a.arch).map_err(invalid)?;
    if a.epochs == 0 {
        return Err(invalid("epochs must be >= 1"));
    }
    let ds = load_eval_dataset(&a.data, None).map_err(invalid)?;
    let (tr, va, te) = split_dataset(&ds, a.seed);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        patience: if a.patience == 0 {
            None
        } else {
            Some(a.patience)
        },
        ..TrainConfig::default()
    };
    let model = Model::init(arch, ds.side(), ds.num_labels(), a.seed).map_err(invalid)?;
    let (fitted, _history) = match &defense {
        Some(d) => adversarial_train(&model, &tr, Some(&va), d, &cfg).map_err(aborted)?,
        None => train(&model, &tr, Some(&va), &cfg).map_err(aborted)?,
    };
    fitted.save(&a.out).map_err(aborted)?;

    let labels = te.label_tensor().map_err(aborted)?;
    let logits = fitted.forward_logits(&te.images).map_err(aborted)?;
    let (auc, per_label) = mean_auc(&logits, &labels).map_err(aborted)?;
    println!(
        "trained {} on {} examples; clean test AUC {:.4}; saved {}",
        arch.name(),
        tr.n(),
        auc,
        a.out.display()
    );
    if let Some(report) = &a.report {
        let rep = EvalReport {
            per_label_auc: per_label,
            mean_auc: auc,
            mean_l2: 0.0,
            n_examples: te.n(),
            num_labels: te.num_labels(),
            attack: None,
            defense,
            seed: a.seed,
            wall_clock_secs: 0.0,
        };
        write_text(report, &rep.to_json().map_err(aborted)?).map_err(aborted)?;
    }
    Ok(())
}

fn run_attack(a: AttackCmdArgs) -> CmdResult {
    let spec = a.attack.to_spec()?;
    let model = Model::load(&a.model).map_err(invalid)?;
    let ds = load_eval_dataset(&a.data, a.max_examples).map_err(invalid)?;
    let labels = ds.label_tensor().map_err(aborted)?;
    let adv = attack(&model, &ds.images, &labels, &spec).map_err(aborted)?;
    let logits = model.forward_logits(&adv).map_err(aborted)?;
    let (auc, per_label) = mean_auc(&logits, &labels).map_err(aborted)?;
    let l2 = l2_distance(&ds.images, &adv).map_err(aborted)?;
    println!(
        "{} eps {} T {}: white-box AUC {:.4}, mean L2 {:.4} over {} examples",
        spec.method.name(),
        spec.epsilon,
        spec.effective_iterations(),
        auc,
        l2,
        ds.n()
    );
    emit_eval(
        &a.out_json,
        &a.out_csv,
        "attack",
        &a.model,
        &a.model,
        &spec,
        None,
        &ds,
        per_label,
        auc,
        l2,
    )
}

fn run_defend_eval(a: DefendEvalArgs) -> CmdResult {
    let spec = a.attack.to_spec()?;
    let defense = a.defense.to_spec()?;
    let model = Model::load(&a.model).map_err(invalid)?;
    let craft_path = a.craft_on.clone().unwrap_or_else(|| a.model.clone());
    let craft_model = if craft_path == a.model {
        model.clone()
    } else {
        Model::load(&craft_path).map_err(invalid)?
    };
    let ds = load_eval_dataset(&a.data, a.max_examples).map_err(invalid)?;
    let labels = ds.label_tensor().map_err(aborted)?;
    let adv = attack(&craft_model, &ds.images, &labels, &spec).map_err(aborted)?;
    let logits = if a.transform {
        defend_pdt(&model, &adv, &defense).map_err(aborted)?
    } else {
        model.forward_logits(&adv).map_err(aborted)?
    };
    let (auc, per_label) = mean_auc(&logits, &labels).map_err(aborted)?;
    let l2 = l2_distance(&ds.images, &adv).map_err(aborted)?;
    println!(
        "{} eps {} crafted on {} -> {}{}: AUC {:.4}, mean L2 {:.4}",
        spec.method.name(),
        spec.epsilon,
        craft_path.display(),
        a.model.display(),
        if a.transform { " (+transform)" } else { "" },
        auc,
        l2
    );
    emit_eval(
        &a.out_json,
        &None,
        "defend_eval",
        &craft_path,
        &a.model,
        &spec,
        a.transform.then_some(defense),
        &ds,
        per_label,
        auc,
        l2,
    )
}

#[allow(clippy::too_many_arguments)]
fn emit_eval(
    out_json: &Option<PathBuf>,
    out_csv: &Option<PathBuf>,
    experiment: &str,
    source: &Path,
    target: &Path,
    spec: &AttackSpec,
    defense: Option<DefenseSpec>,
    ds: &Dataset,
    per_label: Vec<Option<f64>>,
    auc: f64,
    l2: f64,
) -> CmdResult {
    if let Some(path) = out_json {
        let rep = EvalReport {
            per_label_auc: per_label,
            mean_auc: auc,
            mean_l2: l2,
            n_examples: ds.n(),
            num_labels: ds.num_labels(),
            attack: Some(spec.clone()),
            defense: defense.clone(),
            seed: spec.seed,
            wall_clock_secs: 0.0,
        };
        write_text(path, &rep.to_json().map_err(aborted)?).map_err(aborted)?;
    }
    if let Some(path) = out_csv {
        let row = Row {
            experiment: experiment.to_string(),
            source: stem_of(source),
            target: stem_of(target),
            attack: spec.clone(),
            defense: defense.map(|d| ("pdt".to_string(), d)),
            ensemble_weight: None,
            mean_auc: auc,
            mean_l2: l2,
        };
        write_csv(path, &[row]).map_err(aborted)?;
    }
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_plan(plan: ExperimentPlan) -> CmdResult {
    plan.validate().map_err(invalid)?;
    plan.run().map_err(aborted)?;
    println!("wrote {}", plan.out_csv.display());
    Ok(())
}

/// Atomic text write: temp file in the destination directory, then rename.
fn write_text(path: &Path, text: &str) -> axrx_core::error::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            tempfile::NamedTempFile::new_in(d)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(text.as_bytes())?;
    tmp.write_all(b"\n")?;
    tmp.persist(path).map_err(|e| {
        axrx_core::error::Error::invalid(format!("persisting {}: {}", path.display(), e.error))
    })?;
    Ok(())
}
