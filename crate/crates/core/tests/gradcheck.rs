//! Finite-difference oracle for the reverse-mode gradients: every analytic
//! gradient the tape produces is compared against central differences of the
//! recorded scalar loss.

use axrx_core::models::{ArchTag, Model};
use axrx_core::tape::{ResizeGeom, Tape};
use axrx_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_TOL || diff / analytic.abs().max(numeric.abs()) <= REL_TOL
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_images(n: usize, side: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * side * side)
        .map(|_| r.gen_range(0.05..0.95))
        .collect();
    Tensor::new(vec![n, 1, side, side], data).unwrap()
}

fn random_labels(n: usize, l: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * l).map(|_| f64::from(r.gen_range(0..2u8))).collect();
    Tensor::new(vec![n, l], data).unwrap()
}

fn model_loss(model: &Model, x: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound = model.bind(&mut tape, false);
    let logits = bound.forward(&mut tape, xv).unwrap();
    let loss = tape.bce_with_logits(logits, y).unwrap();
    tape.value(loss).item().unwrap()
}

fn perturbed(t: &Tensor, k: usize, delta: f64) -> Tensor {
    let mut data = t.to_vec();
    data[k] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

const ARCHS: [(ArchTag, usize); 4] = [
    (ArchTag::Linear, 6),
    (ArchTag::Mlp, 6),
    (ArchTag::CnnSmall, 12),
    (ArchTag::CnnWide, 16),
];

#[test]
fn input_gradients_match_finite_differences() {
    for (arch, side) in ARCHS {
        let model = Model::init(arch, side, 2, 9).unwrap();
        let x = random_images(2, side, 100 + side as u64);
        let y = random_labels(2, 2, 200 + side as u64);

        let mut tape = Tape::new();
        let xv = tape.leaf_grad(x.clone());
        let bound = model.bind(&mut tape, false);
        let logits = bound.forward(&mut tape, xv).unwrap();
        let loss = tape.bce_with_logits(logits, &y).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(xv).unwrap();

        for k in 0..x.len() {
            let plus = model_loss(&model, &perturbed(&x, k, H), &y);
            let minus = model_loss(&model, &perturbed(&x, k, -H), &y);
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grad.data()[k];
            assert!(
                close(analytic, numeric),
                "{}: input grad[{k}] analytic {analytic} vs numeric {numeric}",
                arch.name()
            );
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for (arch, side) in ARCHS {
        let model = Model::init(arch, side, 2, 10).unwrap();
        let x = random_images(2, side, 300 + side as u64);
        let y = random_labels(2, 2, 400 + side as u64);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bound = model.bind(&mut tape, true);
        let logits = bound.forward(&mut tape, xv).unwrap();
        let loss = tape.bce_with_logits(logits, &y).unwrap();
        tape.backward(loss).unwrap();

        let mut check_rng = rng(500 + side as u64);
        for (pi, var) in bound.param_vars().iter().enumerate() {
            let grad = tape.grad(*var).unwrap();
            let p = &model.params()[pi];
            // Check every element of small tensors, a random sample of the
            // big ones; the sample is seeded so failures reproduce.
            let indices: Vec<usize> = if p.len() <= 64 {
                (0..p.len()).collect()
            } else {
                (0..64).map(|_| check_rng.gen_range(0..p.len())).collect()
            };
            for k in indices {
                let mut plus_params = model.params().to_vec();
                plus_params[pi] = perturbed(p, k, H);
                let plus_model =
                    Model::from_params(arch, side, 2, plus_params).unwrap();
                let mut minus_params = model.params().to_vec();
                minus_params[pi] = perturbed(p, k, -H);
                let minus_model =
                    Model::from_params(arch, side, 2, minus_params).unwrap();
                let numeric =
                    (model_loss(&plus_model, &x, &y) - model_loss(&minus_model, &x, &y)) / (2.0 * H);
                let analytic = grad.data()[k];
                assert!(
                    close(analytic, numeric),
                    "{}: param {pi} grad[{k}] analytic {analytic} vs numeric {numeric}",
                    arch.name()
                );
            }
        }
    }
}

#[test]
fn resize_pad_gradient_matches_finite_differences() {
    let geom = ResizeGeom {
        new_h: 5,
        new_w: 5,
        off_y: 1,
        off_x: 2,
    };
    let x = random_images(1, 8, 77);
    let loss_of = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let xv = tape.leaf_grad(x.clone());
        let resized = tape.resize_pad(xv, geom).unwrap();
        let sq = tape.mul(resized, resized).unwrap();
        let loss = tape.mean(sq);
        let value = tape.value(loss).item().unwrap();
        tape.backward(loss).unwrap();
        (value, tape.grad(xv))
    };
    let (_, grad) = loss_of(&x);
    let grad = grad.unwrap();
    for k in 0..x.len() {
        let plus = loss_of(&perturbed(&x, k, H)).0;
        let minus = loss_of(&perturbed(&x, k, -H)).0;
        let numeric = (plus - minus) / (2.0 * H);
        assert!(
            close(grad.data()[k], numeric),
            "resize_pad grad[{k}] analytic {} vs numeric {numeric}",
            grad.data()[k]
        );
    }
}

#[test]
fn elementwise_chain_gradient_matches_finite_differences() {
    // sigmoid/relu/mul/sub/scale composed into one scalar.
    let mut r = rng(31);
    let data: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
    // Keep relu inputs away from the kink.
    let data: Vec<f64> = data
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let x = Tensor::new(vec![3, 4], data).unwrap();
    let c = Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();

    let loss_of = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let xv = tape.leaf_grad(x.clone());
        let cv = tape.leaf(c.clone());
        let s = tape.sigmoid(xv);
        let r = tape.relu(xv);
        let prod = tape.mul(s, r).unwrap();
        let diff = tape.sub(prod, cv).unwrap();
        let scaled = tape.scale(diff, 1.7);
        let sq = tape.mul(scaled, scaled).unwrap();
        let total = tape.sum(sq);
        let value = tape.value(total).item().unwrap();
        tape.backward(total).unwrap();
        (value, tape.grad(xv))
    };
    let grad = loss_of(&x).1.unwrap();
    for k in 0..x.len() {
        let numeric =
            (loss_of(&perturbed(&x, k, H)).0 - loss_of(&perturbed(&x, k, -H)).0) / (2.0 * H);
        assert!(
            close(grad.data()[k], numeric),
            "chain grad[{k}] analytic {} vs numeric {numeric}",
            grad.data()[k]
        );
    }
}
