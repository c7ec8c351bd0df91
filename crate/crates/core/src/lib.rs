//! Gradient-based adversarial attacks and defenses for small multi-label
//! image classifiers, built on a self-contained reverse-mode autodiff tape.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and the differentiable op tape;
//! - [`models`]: four small classifier architectures plus logit ensembles;
//! - [`data`]: a synthetic multi-label dataset with CheXpert-style uncertain
//!   labels, and its on-disk format;
//! - [`train`] / [`defenses`]: Adam training, adversarial training, and the
//!   pixel-deflection input transform;
//! - [`attacks`]: FGSM, PGD, MI-FGSM, DAA, and DII-FGSM under a shared
//!   L-infinity sign-step loop;
//! - [`metrics`]: Mann-Whitney AUC evaluation and perturbation norms;
//! - [`experiments`]: deterministic CSV-producing experiment runners.

pub mod attacks;
mod bytesio;
pub mod data;
pub mod defenses;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attacks::{
    attack, attack_with_trace, clip_ball, loss_and_grad, read_adv_batch, write_adv_batch,
    AttackMethod, AttackSpec, AttackTarget,
};
pub use data::{
    generate_synthetic, read_dataset, resolve_labels, split_dataset, write_dataset, Dataset,
    LabelPolicy, SyntheticConfig,
};
pub use defenses::{
    adversarial_train, defend_combined, defend_pdt, denoise_nlm, pixel_deflect, DefenseSpec,
};
pub use error::{Error, Result};
pub use experiments::{ExperimentKind, ExperimentPlan};
pub use metrics::{auc, l2_distance, mean_auc, EvalReport};
pub use models::{ArchTag, EnsembleModel, Model};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainHistory};
