//! Mini-batch Adam training, shared by standard and adversarial training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::mean_auc;
use crate::models::Model;
use crate::rng::{mix_seed, stream_rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Early stop after this many epochs without validation-AUC improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: Some(5),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
}

/// Clean/adversarial loss mixing for adversarial training.
pub(crate) struct AdvMix<'a> {
    /// Weight on the clean-loss term; the adversarial term gets 1 - lambda.
    pub lambda: f64,
    pub inner: &'a AttackSpec,
    pub pretrain_epochs: usize,
}

/// Standard clean training: mini-batch Adam on mean BCE.
pub fn train(
    model: &Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    fit(model, train_set, val_set, cfg, None)
}

pub(crate) fn fit(
    model: &Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    adv: Option<AdvMix<'_>>,
) -> Result<(Model, TrainHistory)> {
    if train_set.n() == 0 {
        return Err(Error::invalid("train: empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train: batch_size must be >= 1"));
    }
    if train_set.side() != model.side || train_set.num_labels() != model.num_labels {
        return Err(Error::invalid(format!(
            "train: dataset ({}x{}, {} labels) does not match model ({}x{}, {} labels)",
            train_set.side(),
            train_set.side(),
            train_set.num_labels(),
            model.side,
            model.side,
            model.num_labels
        )));
    }
    let labels_all = train_set.label_tensor()?;
    // Per-epoch validation works on a capped prefix so the robust-AUC
    // metric (one attack per epoch) stays cheap relative to training.
    let val_part = val_set
        .map(|v| {
            let take: Vec<usize> = (0..v.n().min(192)).collect();
            let part = v.select(&take, v.split.as_deref());
            part.label_tensor().map(|l| (part, l))
        })
        .transpose()?;

    let n = train_set.n();
    let l = train_set.num_labels();
    let side = train_set.side();
    let per = side * side;

    let mut params: Vec<Tensor> = model.params().to_vec();
    let mut m1: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut m2: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut step = 0u64;

    let pretrain = adv.as_ref().map_or(0, |a| a.pretrain_epochs);
    let total_epochs = cfg.epochs + pretrain;
    let mut shuffle_rng = stream_rng(cfg.seed, 0xF17);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..total_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut img = Vec::with_capacity(b * per);
            let mut lab = Vec::with_capacity(b * l);
            for &i in chunk {
                img.extend_from_slice(&train_set.images.data()[i * per..(i + 1) * per]);
                lab.extend_from_slice(&labels_all.data()[i * l..(i + 1) * l]);
            }
            let images = Tensor::new(vec![b, 1, side, side], img)?;
            let labels = Tensor::new(vec![b, l], lab)?;

            let cur_model = model.with_params(params.clone());
            let mut tape = Tape::new();
            let bound = cur_model.bind(&mut tape, true);

            let x = tape.leaf(images.clone());
            let logits = bound.forward(&mut tape, x)?;
            let loss_clean = tape.bce_with_logits(logits, &labels)?;

            let total_loss = match &adv {
                Some(mix) if epoch >= pretrain => {
                    // Fresh adversarial examples against the current
                    // parameters; their crafting gradients never touch theta.
                    let mut inner = mix.inner.clone();
                    inner.seed = mix_seed(inner.seed, ((epoch as u64) << 24) | batch_idx as u64);
                    let adv_images = attack(&cur_model, &images, &labels, &inner)?;
                    let xa = tape.leaf(adv_images);
                    let adv_logits = bound.forward(&mut tape, xa)?;
                    let loss_adv = tape.bce_with_logits(adv_logits, &labels)?;
                    let c = tape.scale(loss_clean, mix.lambda);
                    let a = tape.scale(loss_adv, 1.0 - mix.lambda);
                    tape.add(c, a)?
                }
                _ => loss_clean,
            };

            let loss_val = tape.value(total_loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;

            tape.backward(total_loss)?;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for (i, var) in bound.param_vars().iter().enumerate() {
                let grad = tape.grad(*var).expect("trainable param has grad");
                let mut data = params[i].to_vec();
                for (k, &g) in grad.data().iter().enumerate() {
                    m1[i][k] = cfg.beta1 * m1[i][k] + (1.0 - cfg.beta1) * g;
                    m2[i][k] = cfg.beta2 * m2[i][k] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m1[i][k] / bc1;
                    let vhat = m2[i][k] / bc2;
                    data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
                params[i] = Tensor::new(params[i].shape().to_vec(), data)?;
            }
        }
        history.epoch_loss.push(loss_sum / batches as f64);

        if let Some((val, vl)) = &val_part {
            let cur_model = model.with_params(params.clone());
            // Adversarial runs select and stop on robust validation AUC;
            // a clean-AUC criterion would just hand the run back to the
            // brittle shortcut features the adversarial term trains away.
            let val_images = match &adv {
                Some(mix) if epoch >= pretrain => {
                    let mut inner = mix.inner.clone();
                    inner.seed = mix_seed(inner.seed, 0x7A1);
                    attack(&cur_model, &val.images, vl, &inner)?
                }
                _ => val.images.clone(),
            };
            let logits = cur_model.forward_logits(&val_images)?;
            let (auc, _) = mean_auc(&logits, vl)?;
            history.val_auc.push(auc);
            // Warm-up epochs train on the clean objective only, so their
            // snapshots must not compete with the mixed-objective epochs.
            if epoch < pretrain {
                continue;
            }
            let improved = best.as_ref().map_or(true, |(b, _)| auc > *b + 1e-9);
            if improved {
                best = Some((auc, params.clone()));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if let Some(patience) = cfg.patience {
                    if epochs_since_best >= patience {
                        break;
                    }
                }
            }
        }
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((model.with_params(final_params), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::models::ArchTag;

    fn toy_dataset(n: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n,
            side: 8,
            num_labels: 2,
            seed: 21,
            uncertainty_rate: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = toy_dataset(32);
        let model = Model::init(ArchTag::Linear, 8, 2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            ..Default::default()
        };
        let (out, _) = train(&model, &ds, None, &cfg).unwrap();
        assert_eq!(out.params(), model.params());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = toy_dataset(48);
        let model = Model::init(ArchTag::Mlp, 8, 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..Default::default()
        };
        let (a, _) = train(&model, &ds, None, &cfg).unwrap();
        let (b, _) = train(&model, &ds, None, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = toy_dataset(4);
        let empty = ds.select(&[], None);
        let model = Model::init(ArchTag::Linear, 8, 2, 0).unwrap();
        assert!(train(&model, &empty, None, &TrainConfig::default()).is_err());
    }

    #[test]
    fn linear_model_learns_the_texture_cue() {
        // The grating cue is linearly decodable, so a linear model must end
        // far above chance on its own training data. A 16x16 image gives the
        // cue enough pixels to rise above the background noise.
        let ds = generate_synthetic(&SyntheticConfig {
            n: 300,
            side: 16,
            num_labels: 2,
            seed: 21,
            uncertainty_rate: 0.0,
        })
        .unwrap();
        let model = Model::init(ArchTag::Linear, 16, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 5e-3,
            patience: None,
            ..Default::default()
        };
        let (trained, _) = train(&model, &ds, None, &cfg).unwrap();
        let logits = trained.forward_logits(&ds.images).unwrap();
        let (auc, _) = mean_auc(&logits, &ds.label_tensor().unwrap()).unwrap();
        assert!(auc >= 0.85, "train mean AUC {auc}");
    }
}
