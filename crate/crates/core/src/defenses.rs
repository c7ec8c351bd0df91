//! Defenses: adversarial training and the pixel-deflection /
//! non-local-means input transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackMethod, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::train::{fit, train, AdvMix, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    /// Weight on the clean-loss term during adversarial training.
    pub lambda: f64,
    /// Attack used to craft training-time adversarial examples.
    pub inner_attack: AttackSpec,
    /// Clean warm-up epochs before mixing in adversarial examples.
    pub pretrain_epochs: usize,
    /// Number of pixel swaps per image in the deflection transform.
    pub deflections: usize,
    /// Half-width of the square window a deflection source is drawn from.
    pub window_radius: usize,
    /// Bandwidth of the non-local-means patch weighting.
    pub nlm_h: f64,
    /// Seed for the inference-time deflection randomness.
    pub seed: u64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        let mut inner = AttackSpec::new(AttackMethod::Pgd);
        inner.epsilon = 4.0 / 255.0;
        inner.iterations = 10;
        DefenseSpec {
            lambda: 0.6,
            inner_attack: inner,
            pretrain_epochs: 6,
            deflections: 300,
            window_radius: 10,
            nlm_h: 0.1,
            seed: 0,
        }
    }
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "defense: lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !self.nlm_h.is_finite() || self.nlm_h < 0.0 {
            return Err(Error::invalid(format!(
                "defense: nlm_h must be a finite non-negative number, got {}",
                self.nlm_h
            )));
        }
        self.inner_attack.validate()
    }
}

/// Adversarial training: clean warm-up, then Adam on
/// `lambda * J(x) + (1 - lambda) * J(x_adv)` with fresh adversarial
/// examples crafted against the current parameters every mini-batch.
pub fn adversarial_train(
    model: &Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    spec: &DefenseSpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    spec.validate()?;
    if spec.lambda == 1.0 {
        // The adversarial term has zero weight, so this is plain training.
        return train(model, train_set, val_set, cfg);
    }
    fit(
        model,
        train_set,
        val_set,
        cfg,
        Some(AdvMix {
            lambda: spec.lambda,
            inner: &spec.inner_attack,
            pretrain_epochs: spec.pretrain_epochs,
        }),
    )
}

/// Pixel deflection: for each image, repeatedly overwrite a uniformly chosen
/// target pixel with the value of a pixel drawn from the surrounding window.
pub fn pixel_deflect(
    images: &Tensor,
    deflections: usize,
    window_radius: usize,
    seed: u64,
) -> Result<Tensor> {
    let (n, side) = image_dims(images)?;
    let per = side * side;
    let mut out = images.to_vec();
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        let img = &mut out[i * per..(i + 1) * per];
        for _ in 0..deflections {
            let ty = rng.gen_range(0..side);
            let tx = rng.gen_range(0..side);
            let r = window_radius as i64;
            let sy = clamp_coord(ty as i64 + rng.gen_range(-r..=r), side);
            let sx = clamp_coord(tx as i64 + rng.gen_range(-r..=r), side);
            img[ty * side + tx] = img[sy * side + sx];
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Non-local-means denoising: each pixel becomes a weighted average of the
/// pixels in an 11x11 search window, weighted by 3x3 patch similarity with
/// `w = exp(-d^2 / h^2)`. Borders use replicate clamping.
pub fn denoise_nlm(images: &Tensor, h: f64) -> Result<Tensor> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::invalid(format!(
            "denoise_nlm: bandwidth must be finite and non-negative, got {h}"
        )));
    }
    let (n, side) = image_dims(images)?;
    let per = side * side;
    let data = images.data();
    let h2 = h * h;
    const PATCH_R: i64 = 1;
    const SEARCH_R: i64 = 5;

    let pixel = |img: &[f64], y: i64, x: i64| -> f64 {
        img[clamp_coord(y, side) * side + clamp_coord(x, side)]
    };
    let patch_d2 = |img: &[f64], ay: i64, ax: i64, by: i64, bx: i64| -> f64 {
        let mut d2 = 0.0;
        for dy in -PATCH_R..=PATCH_R {
            for dx in -PATCH_R..=PATCH_R {
                let diff = pixel(img, ay + dy, ax + dx) - pixel(img, by + dy, bx + dx);
                d2 += diff * diff;
            }
        }
        d2
    };

    let mut out = vec![0.0; n * per];
    for i in 0..n {
        let img = &data[i * per..(i + 1) * per];
        let dst = &mut out[i * per..(i + 1) * per];
        for y in 0..side as i64 {
            for x in 0..side as i64 {
                let mut num = 0.0;
                let mut den = 0.0;
                for dy in -SEARCH_R..=SEARCH_R {
                    for dx in -SEARCH_R..=SEARCH_R {
                        let d2 = patch_d2(img, y, x, y + dy, x + dx);
                        // With h = 0 only identical patches keep weight 1,
                        // which makes the transform an exact identity.
                        let w = if h2 == 0.0 {
                            if d2 == 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            (-d2 / h2).exp()
                        };
                        num += w * pixel(img, y + dy, x + dx);
                        den += w;
                    }
                }
                dst[y as usize * side + x as usize] = num / den;
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Pixel-deflection transform defense: deflect, denoise, then classify.
pub fn defend_pdt(model: &Model, images: &Tensor, spec: &DefenseSpec) -> Result<Tensor> {
    spec.validate()?;
    let deflected = pixel_deflect(images, spec.deflections, spec.window_radius, spec.seed)?;
    let denoised = denoise_nlm(&deflected, spec.nlm_h)?;
    model.forward_logits(&denoised)
}

/// Combined defense: the pixel-deflection transform applied in front of an
/// adversarially trained model.
pub fn defend_combined(
    adv_trained: &Model,
    images: &Tensor,
    spec: &DefenseSpec,
) -> Result<Tensor> {
    defend_pdt(adv_trained, images, spec)
}

fn image_dims(images: &Tensor) -> Result<(usize, usize)> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
        return Err(Error::invalid(format!(
            "expected images of shape [N, 1, S, S], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2]))
}

fn clamp_coord(c: i64, side: usize) -> usize {
    c.clamp(0, side as i64 - 1) as usize
}
