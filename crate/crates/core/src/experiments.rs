//! Experiment runners: transfer matrix, ensemble hold-out, iteration and
//! epsilon sweeps, and defense robustness curves. Each runner produces a
//! deterministic list of CSV rows echoing the full configuration of the cell
//! that produced them, so a rerun with the same inputs is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackMethod, AttackSpec};
use crate::data::{read_dataset, resolve_labels, Dataset, LabelPolicy};
use crate::defenses::{defend_pdt, DefenseSpec};
use crate::error::{Error, Result};
use crate::metrics::{l2_distance, mean_auc};
use crate::models::{EnsembleModel, Model};
use crate::rng::mix_seed;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "experiment,source,target,method,epsilon,alpha,iterations,\
momentum,transform_prob,daa_coeff,daa_batch,random_start,attack_seed,defense,lambda,\
deflections,window_radius,nlm_h,ensemble_weight,mean_auc,mean_l2";

/// One evaluation cell: the attack/defense configuration that produced it
/// plus the resulting metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub source: String,
    pub target: String,
    pub attack: AttackSpec,
    pub defense: Option<(String, DefenseSpec)>,
    pub ensemble_weight: Option<f64>,
    pub mean_auc: f64,
    pub mean_l2: f64,
}

impl Row {
    pub fn csv_line(&self) -> String {
        let a = &self.attack;
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.source,
            self.target,
            a.method.name(),
            a.epsilon,
            a.alpha(),
            a.effective_iterations(),
            a.momentum,
            a.transform_prob,
            a.daa_coeff,
            a.daa_batch,
            a.random_start,
            a.seed,
        );
        match &self.defense {
            Some((name, d)) => write!(
                line,
                ",{},{},{},{},{}",
                name, d.lambda, d.deflections, d.window_radius, d.nlm_h
            )
            .unwrap(),
            None => line.push_str(",,,,,"),
        }
        match self.ensemble_weight {
            Some(w) => write!(line, ",{}", w).unwrap(),
            None => line.push(','),
        }
        write!(line, ",{},{}", self.mean_auc, self.mean_l2).unwrap();
        line
    }
}

/// Write rows as CSV, atomically (temp file in the destination directory,
/// then rename over the target path).
pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            tempfile::NamedTempFile::new_in(d)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    writeln!(tmp, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(tmp, "{}", row.csv_line())?;
    }
    tmp.persist(path)
        .map_err(|e| Error::invalid(format!("persisting {}: {}", path.display(), e.error)))?;
    Ok(())
}

fn spec_for(base: &AttackSpec, method: AttackMethod, stream: u64) -> AttackSpec {
    let mut spec = AttackSpec::new(method);
    spec.epsilon = base.epsilon;
    if method != AttackMethod::Fgsm {
        spec.iterations = base.iterations;
    }
    spec.step_size = base.step_size;
    spec.momentum = base.momentum;
    spec.transform_prob = base.transform_prob;
    spec.daa_coeff = base.daa_coeff;
    spec.daa_batch = base.daa_batch;
    spec.seed = mix_seed(base.seed, stream);
    spec
}

fn eval_logits(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    Ok(mean_auc(logits, labels)?.0)
}

/// Craft with every method on every source model, evaluate on every target.
pub fn transfer_matrix(
    models: &[(String, Model)],
    dataset: &Dataset,
    methods: &[AttackMethod],
    base: &AttackSpec,
) -> Result<Vec<Row>> {
    if models.is_empty() || methods.is_empty() {
        return Err(Error::invalid("transfer matrix needs models and methods"));
    }
    let labels = dataset.label_tensor()?;
    let mut rows = Vec::new();
    for (si, (src_name, src)) in models.iter().enumerate() {
        for (mi, &method) in methods.iter().enumerate() {
            let spec = spec_for(base, method, (si as u64) << 16 | mi as u64);
            let adv = attack(src, &dataset.images, &labels, &spec)?;
            let l2 = l2_distance(&dataset.images, &adv)?;
            for (tgt_name, tgt) in models {
                let logits = tgt.forward_logits(&adv)?;
                rows.push(Row {
                    experiment: "transfer_matrix".into(),
                    source: src_name.clone(),
                    target: tgt_name.clone(),
                    attack: spec.clone(),
                    defense: None,
                    ensemble_weight: None,
                    mean_auc: eval_logits(&logits, &labels)?,
                    mean_l2: l2,
                });
            }
        }
    }
    Ok(rows)
}

/// Leave-one-out ensemble attack: craft on a uniform logit ensemble of all
/// models but one, evaluate in white box (the ensemble itself) and black box
/// (the held-out model).
pub fn ensemble_holdout(
    models: &[(String, Model)],
    dataset: &Dataset,
    methods: &[AttackMethod],
    base: &AttackSpec,
) -> Result<Vec<Row>> {
    if models.len() < 2 {
        return Err(Error::invalid("ensemble hold-out needs at least 2 models"));
    }
    let labels = dataset.label_tensor()?;
    let mut rows = Vec::new();
    for (hold_idx, (hold_name, hold)) in models.iter().enumerate() {
        let members: Vec<Model> = models
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != hold_idx)
            .map(|(_, (_, m))| m.clone())
            .collect();
        let weight = 1.0 / members.len() as f64;
        let ensemble = EnsembleModel::uniform(members)?;
        let source = format!("ensemble_without_{hold_name}");
        for (mi, &method) in methods.iter().enumerate() {
            let spec = spec_for(base, method, (hold_idx as u64) << 16 | mi as u64);
            let adv = attack(&ensemble, &dataset.images, &labels, &spec)?;
            let l2 = l2_distance(&dataset.images, &adv)?;
            let white = ensemble.forward_logits(&adv)?;
            let black = hold.forward_logits(&adv)?;
            for (target, logits) in [("ensemble".to_string(), white), (hold_name.clone(), black)] {
                rows.push(Row {
                    experiment: "ensemble_holdout".into(),
                    source: source.clone(),
                    target,
                    attack: spec.clone(),
                    defense: None,
                    ensemble_weight: Some(weight),
                    mean_auc: eval_logits(&logits, &labels)?,
                    mean_l2: l2,
                });
            }
        }
    }
    Ok(rows)
}

/// Sweep the iteration count of one method, reporting white-box (source) and
/// black-box (transfer target) AUC at each T.
pub fn iteration_sweep(
    source: &(String, Model),
    target: &(String, Model),
    dataset: &Dataset,
    method: AttackMethod,
    iteration_grid: &[usize],
    base: &AttackSpec,
) -> Result<Vec<Row>> {
    if iteration_grid.is_empty() {
        return Err(Error::invalid("iteration sweep needs a non-empty grid"));
    }
    let labels = dataset.label_tensor()?;
    let mut rows = Vec::new();
    for (gi, &t) in iteration_grid.iter().enumerate() {
        let mut spec = spec_for(base, method, gi as u64);
        spec.iterations = t;
        spec.validate()?;
        let adv = attack(&source.1, &dataset.images, &labels, &spec)?;
        let l2 = l2_distance(&dataset.images, &adv)?;
        for (name, model) in [source, target] {
            let logits = model.forward_logits(&adv)?;
            rows.push(Row {
                experiment: "iteration_sweep".into(),
                source: source.0.clone(),
                target: name.clone(),
                attack: spec.clone(),
                defense: None,
                ensemble_weight: None,
                mean_auc: eval_logits(&logits, &labels)?,
                mean_l2: l2,
            });
        }
    }
    Ok(rows)
}

/// Sweep epsilon for each method in white box against one model.
pub fn epsilon_sweep(
    model: &(String, Model),
    dataset: &Dataset,
    methods: &[AttackMethod],
    epsilon_grid: &[f64],
    base: &AttackSpec,
) -> Result<Vec<Row>> {
    if epsilon_grid.is_empty() || methods.is_empty() {
        return Err(Error::invalid("epsilon sweep needs methods and a grid"));
    }
    let labels = dataset.label_tensor()?;
    let mut rows = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        for (gi, &eps) in epsilon_grid.iter().enumerate() {
            let mut spec = spec_for(base, method, (mi as u64) << 16 | gi as u64);
            spec.epsilon = eps;
            spec.validate()?;
            let adv = attack(&model.1, &dataset.images, &labels, &spec)?;
            let logits = model.1.forward_logits(&adv)?;
            rows.push(Row {
                experiment: "epsilon_sweep".into(),
                source: model.0.clone(),
                target: model.0.clone(),
                attack: spec.clone(),
                defense: None,
                ensemble_weight: None,
                mean_auc: eval_logits(&logits, &labels)?,
                mean_l2: l2_distance(&dataset.images, &adv)?,
            });
        }
    }
    Ok(rows)
}

/// Robustness curves for three defenses over an epsilon grid. Attacks are
/// white box against the model that will do the final classification for the
/// adversarial-training series, and against the undefended standard model
/// for the two transform-based series (the transform is not differentiated
/// through).
pub fn defense_sweep(
    standard: &(String, Model),
    adv_trained: &(String, Model),
    dataset: &Dataset,
    defense: &DefenseSpec,
    epsilon_grid: &[f64],
    base: &AttackSpec,
) -> Result<Vec<Row>> {
    if epsilon_grid.is_empty() {
        return Err(Error::invalid("defense sweep needs a non-empty grid"));
    }
    defense.validate()?;
    let labels = dataset.label_tensor()?;
    let mut rows = Vec::new();
    for (gi, &eps) in epsilon_grid.iter().enumerate() {
        let mut spec = spec_for(base, AttackMethod::Pgd, gi as u64);
        spec.epsilon = eps;
        spec.validate()?;

        let adv_on_robust = attack(&adv_trained.1, &dataset.images, &labels, &spec)?;
        let adv_on_standard = attack(&standard.1, &dataset.images, &labels, &spec)?;

        let cells: Vec<(&str, &str, &Tensor, Tensor)> = vec![
            (
                "advtrain",
                adv_trained.0.as_str(),
                &adv_on_robust,
                adv_trained.1.forward_logits(&adv_on_robust)?,
            ),
            (
                "pdt",
                standard.0.as_str(),
                &adv_on_standard,
                defend_pdt(&standard.1, &adv_on_standard, defense)?,
            ),
            (
                "combined",
                adv_trained.0.as_str(),
                &adv_on_standard,
                defend_pdt(&adv_trained.1, &adv_on_standard, defense)?,
            ),
        ];
        for (name, model_name, adv, logits) in cells {
            rows.push(Row {
                experiment: "defense_sweep".into(),
                source: standard.0.clone(),
                target: model_name.to_string(),
                attack: spec.clone(),
                defense: Some((name.to_string(), defense.clone())),
                ensemble_weight: None,
                mean_auc: eval_logits(&logits, &labels)?,
                mean_l2: l2_distance(&dataset.images, adv)?,
            });
        }
    }
    Ok(rows)
}

/// A runner plan loaded from disk paths, as driven by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    /// Model checkpoints; meaning depends on `kind` (see `validate`).
    pub checkpoints: Vec<PathBuf>,
    pub dataset: PathBuf,
    pub methods: Vec<AttackMethod>,
    #[serde(default)]
    pub iteration_grid: Vec<usize>,
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    #[serde(default)]
    pub defense: Option<DefenseSpec>,
    pub attack: AttackSpec,
    /// Cap on evaluated examples (taken from the front of the dataset).
    #[serde(default)]
    pub max_examples: Option<usize>,
    pub out_csv: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TransferMatrix,
    EnsembleHoldout,
    IterationSweep,
    EpsilonSweep,
    DefenseSweep,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.exists() {
            return Err(Error::invalid(format!(
                "dataset not found: {}",
                self.dataset.display()
            )));
        }
        for ckpt in &self.checkpoints {
            if !ckpt.exists() {
                return Err(Error::invalid(format!(
                    "checkpoint not found: {}",
                    ckpt.display()
                )));
            }
        }
        self.attack.validate()?;
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        let need = |cond: bool, msg: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::invalid(msg.to_string()))
            }
        };
        match self.kind {
            ExperimentKind::TransferMatrix => {
                need(!self.checkpoints.is_empty(), "transfer matrix needs checkpoints")?;
                need(!self.methods.is_empty(), "transfer matrix needs methods")
            }
            ExperimentKind::EnsembleHoldout => {
                need(self.checkpoints.len() >= 2, "ensemble hold-out needs >= 2 checkpoints")?;
                need(!self.methods.is_empty(), "ensemble hold-out needs methods")
            }
            ExperimentKind::IterationSweep => {
                need(self.checkpoints.len() == 2, "iteration sweep needs exactly 2 checkpoints")?;
                need(self.methods.len() == 1, "iteration sweep takes exactly 1 method")?;
                need(
                    !self.iteration_grid.is_empty() && !self.iteration_grid.contains(&0),
                    "iteration sweep needs a non-empty grid of T >= 1",
                )
            }
            ExperimentKind::EpsilonSweep => {
                need(self.checkpoints.len() == 1, "epsilon sweep needs exactly 1 checkpoint")?;
                need(!self.methods.is_empty(), "epsilon sweep needs methods")?;
                need(
                    !self.epsilon_grid.is_empty()
                        && self.epsilon_grid.iter().all(|e| *e >= 0.0 && e.is_finite()),
                    "epsilon sweep needs a non-empty grid of finite eps >= 0",
                )
            }
            ExperimentKind::DefenseSweep => {
                need(
                    self.checkpoints.len() == 2,
                    "defense sweep needs exactly 2 checkpoints (standard, adversarially trained)",
                )?;
                need(
                    !self.epsilon_grid.is_empty()
                        && self.epsilon_grid.iter().all(|e| *e >= 0.0 && e.is_finite()),
                    "defense sweep needs a non-empty grid of finite eps >= 0",
                )
            }
        }
    }

    pub fn run(&self) -> Result<()> {
        self.validate()?;
        let dataset = load_eval_dataset(&self.dataset, self.max_examples)?;
        let models = self
            .checkpoints
            .iter()
            .map(|p| {
                let m = Model::load(p)?;
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, m))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = match self.kind {
            ExperimentKind::TransferMatrix => {
                transfer_matrix(&models, &dataset, &self.methods, &self.attack)?
            }
            ExperimentKind::EnsembleHoldout => {
                ensemble_holdout(&models, &dataset, &self.methods, &self.attack)?
            }
            ExperimentKind::IterationSweep => iteration_sweep(
                &models[0],
                &models[1],
                &dataset,
                self.methods[0],
                &self.iteration_grid,
                &self.attack,
            )?,
            ExperimentKind::EpsilonSweep => epsilon_sweep(
                &models[0],
                &dataset,
                &self.methods,
                &self.epsilon_grid,
                &self.attack,
            )?,
            ExperimentKind::DefenseSweep => defense_sweep(
                &models[0],
                &models[1],
                &dataset,
                self.defense.as_ref().unwrap_or(&DefenseSpec::default()),
                &self.epsilon_grid,
                &self.attack,
            )?,
        };
        write_csv(&self.out_csv, &rows)
    }
}

/// Load a dataset file for evaluation, resolving uncertain labels with the
/// default policy and optionally truncating to the first `max` examples.
pub fn load_eval_dataset(path: &Path, max: Option<usize>) -> Result<Dataset> {
    let raw = read_dataset(path)?;
    let resolved = if raw.is_resolved() {
        raw
    } else {
        resolve_labels(&raw, &LabelPolicy::chexpert_default(&raw.label_names))?
    };
    Ok(match max {
        Some(m) if m < resolved.n() => {
            let idx: Vec<usize> = (0..m).collect();
            resolved.select(&idx, resolved.split.as_deref())
        }
        _ => resolved,
    })
}
