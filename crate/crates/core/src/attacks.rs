//! The unified L-infinity sign-step attack family: FGSM, PGD, MIFGSM, DAA,
//! and DII-FGSM.
//!
//! Every method iterates x_{t+1} = clip(x_t + alpha * sign(G_{t+1})) where
//! the clip keeps iterates inside both the epsilon-ball around the clean
//! image and the [0,1] pixel range. The methods differ only in how G is
//! formed from loss gradients. Generation is parallel over examples
//! (minibatches for DAA) with per-example RNG streams, so results are
//! deterministic and independent of worker count.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bytesio::Reader;
use crate::error::{Error, Result};
use crate::models::{validate_images, EnsembleModel, Model};
use crate::rng::stream_rng;
use crate::tape::{ResizeGeom, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Mifgsm,
    Daa,
    DiiFgsm,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 5] = [
        AttackMethod::Fgsm,
        AttackMethod::Pgd,
        AttackMethod::Mifgsm,
        AttackMethod::Daa,
        AttackMethod::DiiFgsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mifgsm => "mifgsm",
            AttackMethod::Daa => "daa",
            AttackMethod::DiiFgsm => "dii-fgsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "mifgsm" => Ok(AttackMethod::Mifgsm),
            "daa" => Ok(AttackMethod::Daa),
            "dii-fgsm" | "diifgsm" => Ok(AttackMethod::DiiFgsm),
            _ => Err(Error::invalid(format!("unknown attack method {s:?}"))),
        }
    }

    fn byte(self) -> u8 {
        match self {
            AttackMethod::Fgsm => 0,
            AttackMethod::Pgd => 1,
            AttackMethod::Mifgsm => 2,
            AttackMethod::Daa => 3,
            AttackMethod::DiiFgsm => 4,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(AttackMethod::Fgsm),
            1 => Ok(AttackMethod::Pgd),
            2 => Ok(AttackMethod::Mifgsm),
            3 => Ok(AttackMethod::Daa),
            4 => Ok(AttackMethod::DiiFgsm),
            _ => Err(Error::invalid(format!("unknown attack method byte {b}"))),
        }
    }
}

/// All attack hyperparameters. Fields not used by a method are ignored by it
/// but still echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    /// L-infinity radius in pixel units.
    pub epsilon: f64,
    /// Iteration count T; FGSM always runs exactly one step.
    pub iterations: usize,
    /// Step size alpha; `None` resolves to 2.5 * epsilon / T (epsilon for
    /// FGSM).
    pub step_size: Option<f64>,
    /// MIFGSM decay mu.
    pub momentum: f64,
    /// DII-FGSM transform probability p.
    pub transform_prob: f64,
    /// DAA coupling coefficient c.
    pub daa_coeff: f64,
    /// DAA minibatch size M; coupling is intra-minibatch only.
    pub daa_batch: usize,
    /// PGD uniform random start inside the ball.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(method: AttackMethod) -> Self {
        AttackSpec {
            method,
            epsilon: 0.3,
            iterations: if method == AttackMethod::Fgsm { 1 } else { 10 },
            step_size: None,
            momentum: 1.0,
            transform_prob: 0.5,
            daa_coeff: 0.1,
            daa_batch: 8,
            random_start: method == AttackMethod::Pgd,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::invalid("epsilon must be >= 0"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if let Some(a) = self.step_size {
            if a <= 0.0 {
                return Err(Error::invalid("step_size must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::invalid("transform_prob must be in [0,1]"));
        }
        if self.momentum < 0.0 {
            return Err(Error::invalid("momentum must be >= 0"));
        }
        if self.daa_batch < 1 {
            return Err(Error::invalid("daa_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn effective_iterations(&self) -> usize {
        if self.method == AttackMethod::Fgsm {
            1
        } else {
            self.iterations
        }
    }

    pub fn alpha(&self) -> f64 {
        match self.step_size {
            Some(a) => a,
            None if self.method == AttackMethod::Fgsm => self.epsilon,
            None => 2.5 * self.epsilon / self.effective_iterations() as f64,
        }
    }
}

/// Anything an attack can take gradients through.
pub trait AttackTarget: Sync {
    fn input_side(&self) -> usize;
    fn target_labels(&self) -> usize;
    /// Record loss(input) on the tape; `input` is an already-registered
    /// image node, possibly downstream of a transform.
    fn loss_on_tape(&self, tape: &mut Tape, input: Var, labels: &Tensor) -> Result<Var>;
}

impl AttackTarget for Model {
    fn input_side(&self) -> usize {
        self.side
    }

    fn target_labels(&self) -> usize {
        self.num_labels
    }

    fn loss_on_tape(&self, tape: &mut Tape, input: Var, labels: &Tensor) -> Result<Var> {
        let bound = self.bind(tape, false);
        let logits = bound.forward(tape, input)?;
        tape.bce_with_logits(logits, labels)
    }
}

impl AttackTarget for EnsembleModel {
    fn input_side(&self) -> usize {
        self.side()
    }

    fn target_labels(&self) -> usize {
        self.num_labels()
    }

    fn loss_on_tape(&self, tape: &mut Tape, input: Var, labels: &Tensor) -> Result<Var> {
        let logits = self.forward_on_tape(tape, input)?;
        tape.bce_with_logits(logits, labels)
    }
}

/// Project into the epsilon-ball around `origin`, then into [0,1].
pub fn clip_ball(candidate: &Tensor, origin: &Tensor, epsilon: f64) -> Result<Tensor> {
    candidate.zip(origin, "clip_ball", |c, o| {
        c.min(o + epsilon).max(o - epsilon).clamp(0.0, 1.0)
    })
}

fn clip_into(buf: &mut [f64], origin: &[f64], epsilon: f64) {
    for (b, &o) in buf.iter_mut().zip(origin) {
        *b = b.min(o + epsilon).max(o - epsilon).clamp(0.0, 1.0);
    }
}

/// Loss and input gradient of the target at `x` (one example).
pub fn loss_and_grad(target: &dyn AttackTarget, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf_grad(x.clone());
    let loss = target.loss_on_tape(&mut tape, xv, y)?;
    tape.backward(loss)?;
    let grad = tape.grad(xv).expect("input requires grad");
    if !grad.all_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok((tape.value(loss).item()?, grad))
}

fn loss_grad_through_transform(
    target: &dyn AttackTarget,
    x: &Tensor,
    y: &Tensor,
    geom: ResizeGeom,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf_grad(x.clone());
    let tv = tape.resize_pad(xv, geom)?;
    let loss = target.loss_on_tape(&mut tape, tv, y)?;
    tape.backward(loss)?;
    let grad = tape.grad(xv).expect("input requires grad");
    if !grad.all_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok(grad)
}

/// Craft adversarial examples for a whole batch.
pub fn attack(
    target: &dyn AttackTarget,
    images: &Tensor,
    labels: &Tensor,
    spec: &AttackSpec,
) -> Result<Tensor> {
    Ok(attack_impl(target, images, labels, spec, false)?.0)
}

/// As [`attack`], additionally returning every iterate of every example
/// (x_0 after initialization through x_T). Intended for tests and fuzzing on
/// small batches.
pub fn attack_with_trace(
    target: &dyn AttackTarget,
    images: &Tensor,
    labels: &Tensor,
    spec: &AttackSpec,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let (adv, trace) = attack_impl(target, images, labels, spec, true)?;
    Ok((adv, trace))
}

fn attack_impl(
    target: &dyn AttackTarget,
    images: &Tensor,
    labels: &Tensor,
    spec: &AttackSpec,
    trace: bool,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    spec.validate()?;
    let side = target.input_side();
    validate_images(images, side)?;
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::invalid("attack: empty batch"));
    }
    let l = target.target_labels();
    if labels.shape() != [n, l] {
        return Err(Error::ShapeMismatch {
            op: "attack",
            lhs: labels.shape().to_vec(),
            rhs: vec![n, l],
        });
    }

    let per = side * side;
    let label_row = |i: usize| {
        Tensor::new(
            vec![1, l],
            labels.data()[i * l..(i + 1) * l].to_vec(),
        )
        .unwrap()
    };
    let image_row = |i: usize| {
        Tensor::new(
            vec![1, 1, side, side],
            images.data()[i * per..(i + 1) * per].to_vec(),
        )
        .unwrap()
    };

    let results: Vec<Result<(Vec<f64>, Vec<Tensor>)>> = if spec.method == AttackMethod::Daa {
        let chunk_indices: Vec<Vec<usize>> = (0..n)
            .collect::<Vec<_>>()
            .chunks(spec.daa_batch)
            .map(|c| c.to_vec())
            .collect();
        let chunk_results: Vec<Result<Vec<(Vec<f64>, Vec<Tensor>)>>> = chunk_indices
            .par_iter()
            .map(|idxs| {
                let xs: Vec<Tensor> = idxs.iter().map(|&i| image_row(i)).collect();
                let ys: Vec<Tensor> = idxs.iter().map(|&i| label_row(i)).collect();
                daa_minibatch(target, &xs, &ys, spec, trace)
            })
            .collect();
        let mut flat = Vec::with_capacity(n);
        for chunk in chunk_results {
            match chunk {
                Ok(rows) => flat.extend(rows.into_iter().map(Ok)),
                Err(e) => return Err(e),
            }
        }
        flat
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| single_example(target, &image_row(i), &label_row(i), spec, i as u64, trace))
            .collect()
    };

    let mut out = Vec::with_capacity(n * per);
    let mut traces = Vec::with_capacity(if trace { n } else { 0 });
    for r in results {
        let (pixels, t) = r?;
        out.extend(pixels);
        if trace {
            traces.push(t);
        }
    }
    Ok((
        Tensor::new(vec![n, 1, side, side], out)?,
        traces,
    ))
}

/// One example of FGSM / PGD / MIFGSM / DII-FGSM.
fn single_example(
    target: &dyn AttackTarget,
    x: &Tensor,
    y: &Tensor,
    spec: &AttackSpec,
    example_index: u64,
    trace: bool,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut rng = stream_rng(spec.seed, example_index);
    let origin = x.data();
    let side = target.input_side();
    let alpha = spec.alpha();
    let t_max = spec.effective_iterations();

    let mut cur: Vec<f64> = origin.to_vec();
    if spec.method == AttackMethod::Pgd && spec.random_start {
        for px in cur.iter_mut() {
            *px += rng.gen_range(-spec.epsilon..=spec.epsilon);
        }
        clip_into(&mut cur, origin, spec.epsilon);
    }

    let mut iterates = Vec::new();
    let shape = x.shape().to_vec();
    let snapshot = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).unwrap();
    if trace {
        iterates.push(snapshot(&cur));
    }

    let mut momentum_dir: Option<Vec<f64>> = None;
    for _t in 0..t_max {
        let x_t = snapshot(&cur);
        let direction: Vec<f64> = match spec.method {
            AttackMethod::Fgsm | AttackMethod::Pgd => loss_and_grad(target, &x_t, y)?.1.to_vec(),
            AttackMethod::Mifgsm => {
                let (_, grad) = loss_and_grad(target, &x_t, y)?;
                // Degenerate (all-zero) gradients contribute a zero term.
                let (g, _degenerate) = grad.l1_normalize();
                let g = g.data();
                let acc = match momentum_dir.take() {
                    Some(prev) => prev
                        .iter()
                        .zip(g)
                        .map(|(&p, &gi)| spec.momentum * p + gi)
                        .collect(),
                    None => g.to_vec(),
                };
                momentum_dir = Some(acc.clone());
                acc
            }
            AttackMethod::DiiFgsm => {
                if rng.gen::<f64>() < spec.transform_prob {
                    let scale: f64 = rng.gen_range(0.9..1.0);
                    let new = ((side as f64 * scale).floor() as usize).max(1);
                    let off_y = rng.gen_range(0..=side - new);
                    let off_x = rng.gen_range(0..=side - new);
                    let geom = ResizeGeom {
                        new_h: new,
                        new_w: new,
                        off_y,
                        off_x,
                    };
                    loss_grad_through_transform(target, &x_t, y, geom)?.to_vec()
                } else {
                    loss_and_grad(target, &x_t, y)?.1.to_vec()
                }
            }
            AttackMethod::Daa => unreachable!("DAA runs per minibatch"),
        };
        for (px, d) in cur.iter_mut().zip(&direction) {
            *px += alpha * sign(*d);
        }
        clip_into(&mut cur, origin, spec.epsilon);
        if trace {
            iterates.push(snapshot(&cur));
        }
    }
    Ok((cur, iterates))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Kernel-coupled minibatch attack. Per example i:
/// G_i = grad_i + (c/M) * sum_j [ K(x_i,x_j) grad_j + grad_{x_j} K(x_i,x_j) ]
/// with the RBF kernel and bandwidth from the median pairwise distance.
fn daa_minibatch(
    target: &dyn AttackTarget,
    xs: &[Tensor],
    ys: &[Tensor],
    spec: &AttackSpec,
    trace: bool,
) -> Result<Vec<(Vec<f64>, Vec<Tensor>)>> {
    let m = xs.len();
    if m == 0 {
        return Err(Error::invalid("daa: empty minibatch"));
    }
    let alpha = spec.alpha();
    let origins: Vec<&[f64]> = xs.iter().map(|x| x.data()).collect();
    let shape = xs[0].shape().to_vec();
    let mut cur: Vec<Vec<f64>> = origins.iter().map(|o| o.to_vec()).collect();
    let mut traces: Vec<Vec<Tensor>> = vec![Vec::new(); m];
    let snapshot = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).unwrap();
    if trace {
        for (t, c) in traces.iter_mut().zip(&cur) {
            t.push(snapshot(c));
        }
    }

    for _t in 0..spec.iterations {
        let grads: Vec<Vec<f64>> = cur
            .iter()
            .zip(ys)
            .map(|(c, y)| Ok(loss_and_grad(target, &snapshot(c), y)?.1.to_vec()))
            .collect::<Result<_>>()?;

        let directions: Vec<Vec<f64>> = if spec.daa_coeff == 0.0 {
            grads.clone()
        } else {
            // Pairwise Euclidean distances; bandwidth is their median with a
            // small floor so K stays finite on collapsed batches.
            let mut dists = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    dists.push(euclidean(&cur[i], &cur[j]));
                }
            }
            let h = median(&mut dists).max(1e-6);
            let h2 = h * h;
            let c_over_m = spec.daa_coeff / m as f64;
            (0..m)
                .map(|i| {
                    let mut g = grads[i].clone();
                    for j in 0..m {
                        let d2 = squared_distance(&cur[i], &cur[j]);
                        let k = (-d2 / (2.0 * h2)).exp();
                        for (p, gp) in g.iter_mut().enumerate() {
                            // grad_{x_j} K(x_i, x_j) = K * (x_i - x_j) / h^2
                            *gp += c_over_m
                                * (k * grads[j][p] + k * (cur[i][p] - cur[j][p]) / h2);
                        }
                    }
                    g
                })
                .collect()
        };

        for i in 0..m {
            for (px, d) in cur[i].iter_mut().zip(&directions[i]) {
                *px += alpha * sign(*d);
            }
            clip_into(&mut cur[i], origins[i], spec.epsilon);
            if trace {
                traces[i].push(snapshot(&cur[i]));
            }
        }
    }
    Ok(cur.into_iter().zip(traces).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

const AXAD_MAGIC: &[u8; 4] = b"AXAD";
const AXAD_VERSION: u16 = 1;

/// Write an adversarial batch with its full spec echo.
pub fn write_adv_batch(
    path: &Path,
    spec: &AttackSpec,
    clean_indices: &[u32],
    adversarial: &Tensor,
) -> Result<()> {
    let s = adversarial.shape();
    if s.len() != 4 || s[0] != clean_indices.len() {
        return Err(Error::ShapeMismatch {
            op: "write_adv_batch",
            lhs: s.to_vec(),
            rhs: vec![clean_indices.len(), 1, 0, 0],
        });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(AXAD_MAGIC);
    buf.extend_from_slice(&AXAD_VERSION.to_le_bytes());
    buf.push(spec.method.byte());
    let spec_json = serde_json::to_vec(spec)?;
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&(s[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(s[1] as u16).to_le_bytes());
    buf.extend_from_slice(&(s[2] as u16).to_le_bytes());
    buf.extend_from_slice(&(s[3] as u16).to_le_bytes());
    let per = s[1] * s[2] * s[3];
    for (i, &idx) in clean_indices.iter().enumerate() {
        buf.extend_from_slice(&idx.to_le_bytes());
        for &v in &adversarial.data()[i * per..(i + 1) * per] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_adv_batch(path: &Path) -> Result<(AttackSpec, Vec<u32>, Tensor)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != AXAD_MAGIC {
        return Err(r.error("bad magic, not an AXAD batch"));
    }
    let version = r.u16()?;
    if version != AXAD_VERSION {
        return Err(r.error(format!("unsupported AXAD version {version}")));
    }
    let method = AttackMethod::from_byte(r.u8()?)?;
    let spec_len = r.u32()? as usize;
    let spec_bytes = r.take(spec_len)?;
    let spec: AttackSpec = serde_json::from_slice(spec_bytes)
        .map_err(|e| r.error(format!("bad embedded spec: {e}")))?;
    if spec.method != method {
        return Err(r.error("method tag disagrees with embedded spec"));
    }
    let n = r.u32()? as usize;
    let c = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let per = c * h * w;
    let mut indices = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * per);
    for _ in 0..n {
        indices.push(r.u32()?);
        for _ in 0..per {
            pixels.push(r.f64()?);
        }
    }
    r.expect_end()?;
    Ok((spec, indices, Tensor::new(vec![n, c, h, w], pixels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchTag;

    fn logistic_target() -> Model {
        // 1x1 "image", single label, weight 2, bias 0.
        let mut m = Model::init(ArchTag::Linear, 1, 1, 0).unwrap();
        m = m.with_params(vec![
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::zeros(&[1]),
        ]);
        m
    }

    fn one_pixel(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    fn one_label(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn clip_ball_examples() {
        let origin = Tensor::new(vec![1], vec![0.5]).unwrap();
        let candidate = Tensor::new(vec![1], vec![0.9]).unwrap();
        assert_eq!(
            clip_ball(&candidate, &origin, 0.1).unwrap().data(),
            &[0.6]
        );
        // interior point unchanged
        assert_eq!(clip_ball(&origin, &origin, 0.3).unwrap().data(), &[0.5]);
        // [0,1] clamp binds before the ball bound
        let origin = Tensor::new(vec![1], vec![0.95]).unwrap();
        let candidate = Tensor::new(vec![1], vec![1.2]).unwrap();
        assert_eq!(
            clip_ball(&candidate, &origin, 0.1).unwrap().data(),
            &[1.0]
        );
        // shape mismatch rejected
        assert!(clip_ball(&candidate, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let m = logistic_target();
        let mut spec = AttackSpec::new(AttackMethod::Fgsm);
        spec.epsilon = 0.0;
        let x = one_pixel(0.5);
        let adv = attack(&m, &x, &one_label(1.0), &spec).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_analytic_one_pixel() {
        // grad = (sigmoid(1) - 1) * 2 = -0.537883 -> sign -1 -> x* = 0.4
        let m = logistic_target();
        let mut spec = AttackSpec::new(AttackMethod::Fgsm);
        spec.epsilon = 0.1;
        let x = one_pixel(0.5);
        let y = one_label(1.0);
        let (loss_clean, grad) = loss_and_grad(&m, &x, &y).unwrap();
        assert!((grad.item().unwrap() - (-0.5378828427399902)).abs() < 1e-12);
        let adv = attack(&m, &x, &y, &spec).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-15);
        let (loss_adv, _) = loss_and_grad(&m, &adv, &y).unwrap();
        assert!(loss_adv > loss_clean);
    }

    #[test]
    fn fgsm_step_is_exactly_epsilon_on_nonzero_gradient() {
        let m = Model::init(ArchTag::Linear, 4, 2, 7).unwrap();
        let mut spec = AttackSpec::new(AttackMethod::Fgsm);
        spec.epsilon = 0.05;
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (_, grad) = loss_and_grad(&m, &x, &y).unwrap();
        let adv = attack(&m, &x, &y, &spec).unwrap();
        for (i, (&a, &c)) in adv.data().iter().zip(x.data()).enumerate() {
            if grad.data()[i] != 0.0 {
                assert!(((a - c).abs() - 0.05).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pgd_zero_epsilon_is_identity() {
        let m = logistic_target();
        let mut spec = AttackSpec::new(AttackMethod::Pgd);
        spec.epsilon = 0.0;
        spec.iterations = 5;
        spec.step_size = Some(0.1);
        let x = one_pixel(0.5);
        let adv = attack(&m, &x, &one_label(1.0), &spec).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn pgd_single_step_zero_start_equals_fgsm() {
        let m = Model::init(ArchTag::Mlp, 8, 3, 3).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.45);
        let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut pgd = AttackSpec::new(AttackMethod::Pgd);
        pgd.epsilon = 0.2;
        pgd.iterations = 1;
        pgd.random_start = false;
        pgd.step_size = Some(0.2);
        let fgsm = AttackSpec {
            method: AttackMethod::Fgsm,
            iterations: 1,
            step_size: None,
            random_start: false,
            ..pgd.clone()
        };
        assert_eq!(
            attack(&m, &x, &y, &pgd).unwrap(),
            attack(&m, &x, &y, &fgsm).unwrap()
        );
    }

    #[test]
    fn mifgsm_scalar_momentum_accumulation() {
        // 1-pixel logistic target: g_0 = sign of a scalar is +-1 after L1
        // normalization; with mu=1 and the same gradient sign at t=1 the
        // accumulated direction doubles but its sign is unchanged.
        let m = logistic_target();
        let x = one_pixel(0.5);
        let y = one_label(1.0);
        let (_, g) = loss_and_grad(&m, &x, &y).unwrap();
        let (norm, _) = g.l1_normalize();
        assert_eq!(norm.item().unwrap(), -1.0);

        let mut spec = AttackSpec::new(AttackMethod::Mifgsm);
        spec.epsilon = 0.2;
        spec.iterations = 2;
        spec.momentum = 1.0;
        spec.step_size = Some(0.05);
        let (_, traces) = attack_with_trace(&m, &x, &y, &spec).unwrap();
        let t = &traces[0];
        // Steps move down by alpha both iterations (sign stays -1).
        assert!((t[1].data()[0] - 0.45).abs() < 1e-15);
        assert!((t[2].data()[0] - 0.40).abs() < 1e-15);
    }

    #[test]
    fn reduction_mifgsm_mu0_equals_dii_p0() {
        let m = Model::init(ArchTag::CnnSmall, 12, 4, 5).unwrap();
        let x = Tensor::full(&[2, 1, 12, 12], 0.4);
        let y = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut mi = AttackSpec::new(AttackMethod::Mifgsm);
        mi.epsilon = 0.1;
        mi.iterations = 4;
        mi.momentum = 0.0;
        let dii = AttackSpec {
            method: AttackMethod::DiiFgsm,
            transform_prob: 0.0,
            ..mi.clone()
        };
        assert_eq!(
            attack(&m, &x, &y, &mi).unwrap(),
            attack(&m, &x, &y, &dii).unwrap()
        );
    }

    #[test]
    fn reduction_daa_c0_equals_pgd_zero_start() {
        let m = Model::init(ArchTag::Linear, 6, 3, 2).unwrap();
        let x = Tensor::full(&[3, 1, 6, 6], 0.55);
        let y =
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut daa = AttackSpec::new(AttackMethod::Daa);
        daa.epsilon = 0.15;
        daa.iterations = 3;
        daa.daa_coeff = 0.0;
        daa.daa_batch = 3;
        let pgd = AttackSpec {
            method: AttackMethod::Pgd,
            random_start: false,
            ..daa.clone()
        };
        assert_eq!(
            attack(&m, &x, &y, &daa).unwrap(),
            attack(&m, &x, &y, &pgd).unwrap()
        );
    }

    #[test]
    fn reduction_daa_single_example_equals_its_c0_run() {
        let m = Model::init(ArchTag::Mlp, 6, 3, 8).unwrap();
        let x = Tensor::full(&[1, 1, 6, 6], 0.5);
        let y = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let mut daa = AttackSpec::new(AttackMethod::Daa);
        daa.epsilon = 0.1;
        daa.iterations = 4;
        daa.daa_batch = 1;
        daa.daa_coeff = 0.3;
        let c0 = AttackSpec {
            daa_coeff: 0.0,
            ..daa.clone()
        };
        let (_, ta) = attack_with_trace(&m, &x, &y, &daa).unwrap();
        let (_, tb) = attack_with_trace(&m, &x, &y, &c0).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn dii_identity_transform_matches_plain_when_forced() {
        // p=1 but a full-size geometry is an identity transform; compare
        // through the trace of p=0 on a model where every draw is forced to
        // scale 1 by construction: instead assert the transform op itself is
        // identity via reduction p=0 vs p=1 with side so small the resize
        // can only pick the full size is not available, so check gradients
        // directly.
        let m = Model::init(ArchTag::Linear, 5, 2, 4).unwrap();
        let x = Tensor::full(&[1, 1, 5, 5], 0.3);
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let geom = ResizeGeom {
            new_h: 5,
            new_w: 5,
            off_y: 0,
            off_x: 0,
        };
        let g_plain = loss_and_grad(&m, &x, &y).unwrap().1;
        let g_ident = loss_grad_through_transform(&m, &x, &y, geom).unwrap();
        for (a, b) in g_plain.data().iter().zip(g_ident.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_containment_through_trace() {
        let m = Model::init(ArchTag::CnnSmall, 12, 3, 6).unwrap();
        let x = Tensor::full(&[2, 1, 12, 12], 0.2);
        let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        for method in AttackMethod::ALL {
            let mut spec = AttackSpec::new(method);
            spec.epsilon = 0.07;
            spec.iterations = 5;
            spec.daa_batch = 2;
            let (_, traces) = attack_with_trace(&m, &x, &y, &spec).unwrap();
            for (i, trace) in traces.iter().enumerate() {
                let clean = Tensor::new(
                    vec![1, 1, 12, 12],
                    x.data()[i * 144..(i + 1) * 144].to_vec(),
                )
                .unwrap();
                for it in trace {
                    assert!(it.in_unit_range());
                    assert!(it.linf_distance(&clean).unwrap() <= spec.epsilon + 1e-12);
                }
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let m = Model::init(ArchTag::Mlp, 8, 2, 1).unwrap();
        let x = Tensor::full(&[4, 1, 8, 8], 0.6);
        let y = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        for method in AttackMethod::ALL {
            let mut spec = AttackSpec::new(method);
            spec.iterations = 3;
            spec.seed = 99;
            let a = attack(&m, &x, &y, &spec).unwrap();
            let b = attack(&m, &x, &y, &spec).unwrap();
            assert_eq!(a, b, "{method:?}");
        }
    }

    #[test]
    fn adv_batch_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.axad");
        let spec = AttackSpec::new(AttackMethod::Mifgsm);
        let adv = Tensor::full(&[2, 1, 3, 3], 0.25);
        write_adv_batch(&path, &spec, &[4, 9], &adv).unwrap();
        let (spec2, idx, adv2) = read_adv_batch(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(idx, vec![4, 9]);
        assert_eq!(adv, adv2);
    }
}
