//! Temporary calibration probe: trains one cnn_small and reports clean AUC,
//! white-box AUC at two budgets, and per-cue reliance probes.

use std::time::Instant;

use axrx_core::attacks::{attack, AttackMethod, AttackSpec};
use axrx_core::data::{
    generate_synthetic, label_marker, label_plate, label_stamp, label_texture, resolve_labels,
    split_dataset, LabelPolicy, SyntheticConfig, MARKER_AMPLITUDE, PLATE_AMPLITUDE,
    STAMP_AMPLITUDE, TEXTURE_AMPLITUDE,
};
use axrx_core::metrics::mean_auc;
use axrx_core::models::{ArchTag, Model};
use axrx_core::tensor::Tensor;
use axrx_core::train::{train, TrainConfig};

fn auc_of(m: &Model, x: &Tensor, y: &Tensor) -> f64 {
    mean_auc(&m.forward_logits(x).unwrap(), y).unwrap().0
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(17);
    let epochs: usize = std::env::var("PROBE_EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(60);
    let patience: usize = std::env::var("PROBE_PATIENCE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let lr: f64 = std::env::var("PROBE_LR")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);

    let cfg_d = SyntheticConfig {
        n: 4000,
        side: 32,
        num_labels: 6,
        uncertainty_rate: 0.05,
        seed,
    };
    let raw = generate_synthetic(&cfg_d).unwrap();
    let ds = resolve_labels(&raw, &LabelPolicy::chexpert_default(&raw.label_names)).unwrap();
    let (tr, va, te) = split_dataset(&ds, seed);
    let te_small = te.select(&(0..200).collect::<Vec<_>>(), None);
    let ty = te_small.label_tensor().unwrap();

    let cfg = TrainConfig {
        epochs,
        lr,
        seed,
        patience: Some(patience),
        ..Default::default()
    };
    let t = Instant::now();
    let m = Model::init(ArchTag::CnnSmall, 32, 6, seed).unwrap();
    let m = train(&m, &tr, Some(&va), &cfg).unwrap().0;
    println!(
        "cnn_small epochs={epochs} patience={patience} lr={lr}: clean {:.4} ({:?})",
        auc_of(&m, &te_small.images, &ty),
        t.elapsed()
    );

    for (label, eps) in [("0.3", 0.3), ("4/255", 4.0 / 255.0)] {
        let mut spec = AttackSpec::new(AttackMethod::Pgd);
        spec.epsilon = eps;
        spec.seed = seed;
        let adv = attack(&m, &te_small.images, &ty, &spec).unwrap();
        println!("white-box pgd eps={label}: {:.4}", auc_of(&m, &adv, &ty));
    }

    let per = 32 * 32;
    let l = 6;
    let yv = ty.data();
    for name in ["stamp", "marker", "grating", "plate"] {
        let mut buf = Vec::with_capacity(200 * per);
        for i in 0..200 {
            let mut img = vec![0.12f64; per];
            for lab in 0..l {
                let pos = yv[i * l + lab] > 0.5;
                match name {
                    "stamp" if pos => {
                        for (px, p) in img.iter_mut().zip(label_stamp(lab, l, 32)) {
                            *px += STAMP_AMPLITUDE * p;
                        }
                    }
                    "marker" if pos => {
                        for (px, p) in img.iter_mut().zip(label_marker(lab, l, 32)) {
                            *px += MARKER_AMPLITUDE * p;
                        }
                    }
                    "plate" if pos => {
                        for (px, p) in img.iter_mut().zip(label_plate(lab, l, 32)) {
                            *px += PLATE_AMPLITUDE * p;
                        }
                    }
                    "grating" => {
                        let sgn = if pos { 1.0 } else { -1.0 };
                        for (px, p) in img.iter_mut().zip(label_texture(lab, 32)) {
                            *px += sgn * TEXTURE_AMPLITUDE * p;
                        }
                    }
                    _ => {}
                }
            }
            buf.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        let x = Tensor::new(vec![200, 1, 32, 32], buf).unwrap();
        println!("probe {name}: {:.3}", auc_of(&m, &x, &ty));
    }
}
