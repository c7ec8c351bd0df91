//! Scratch calibration runs (not part of the library).

use std::time::Instant;

use axrx_core::attacks::{attack, AttackMethod, AttackSpec};
use axrx_core::data::{generate_synthetic, split_dataset, SyntheticConfig};
use axrx_core::defenses::{adversarial_train, defend_pdt, DefenseSpec};
use axrx_core::metrics::{l2_distance, mean_auc};
use axrx_core::models::{ArchTag, EnsembleModel, Model};
use axrx_core::tensor::Tensor;
use axrx_core::train::{train, TrainConfig};

fn auc_of(m: &Model, x: &Tensor, y: &Tensor) -> f64 {
    mean_auc(&m.forward_logits(x).unwrap(), y).unwrap().0
}

const METHODS: [AttackMethod; 5] = [
    AttackMethod::Fgsm,
    AttackMethod::Pgd,
    AttackMethod::Mifgsm,
    AttackMethod::Daa,
    AttackMethod::DiiFgsm,
];

const MULTI: [AttackMethod; 4] = [
    AttackMethod::Pgd,
    AttackMethod::Mifgsm,
    AttackMethod::Daa,
    AttackMethod::DiiFgsm,
];

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(17);
    let ds = generate_synthetic(&SyntheticConfig {
        n: 4000,
        side: 32,
        num_labels: 6,
        seed,
        uncertainty_rate: 0.05,
    })
    .unwrap();
    let ds = axrx_core::data::resolve_labels(
        &ds,
        &axrx_core::data::LabelPolicy::chexpert_default(&ds.label_names),
    )
    .unwrap();
    let (tr, va, te) = split_dataset(&ds, seed);
    let te_small = te.select(&(0..200).collect::<Vec<_>>(), None);
    let ty = te_small.label_tensor().unwrap();

    let std_epochs: usize = std::env::var("SCRATCH_EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let std_patience: Option<usize> = std::env::var("SCRATCH_PATIENCE")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut cfg = TrainConfig {
        epochs: std_epochs,
        lr: 1e-3,
        seed,
        ..Default::default()
    };
    if std_patience.is_some() {
        cfg.patience = std_patience;
    }
    let mut trained = Vec::new();
    for arch in [
        ArchTag::Linear,
        ArchTag::Mlp,
        ArchTag::CnnSmall,
        ArchTag::CnnWide,
    ] {
        let t = Instant::now();
        let cache = std::path::PathBuf::from(format!(
            "/tmp/std_{}_{seed}_{std_epochs}.bin",
            arch.name()
        ));
        let m = if cache.exists() && std::env::var("SCRATCH_NOCACHE").is_err() {
            Model::load(&cache).unwrap()
        } else {
            let m = Model::init(arch, 32, 6, seed).unwrap();
            let m = train(&m, &tr, Some(&va), &cfg).unwrap().0;
            m.save(&cache).unwrap();
            m
        };
        println!(
            "{}: clean {:.4} ({:?})",
            arch.name(),
            auc_of(&m, &te_small.images, &ty),
            t.elapsed()
        );
        trained.push((arch, m));
    }

    // Criterion 4: white-box efficacy at eps=0.3 on cnn_small.
    let cnn = trained[2].1.clone();
    for method in METHODS {
        let mut spec = AttackSpec::new(method);
        spec.epsilon = 0.3;
        spec.seed = seed;
        let adv = attack(&cnn, &te_small.images, &ty, &spec).unwrap();
        println!(
            "c4 white-box {}: auc {:.4}",
            method.name(),
            auc_of(&cnn, &adv, &ty)
        );
    }

    let fast = std::env::var("SCRATCH_FAST").is_ok();
    // Criterion 5: PGD transfer matrix.
    if !fast {
    let mut pgd3 = AttackSpec::new(AttackMethod::Pgd);
    pgd3.epsilon = 0.3;
    pgd3.seed = seed;
    for (src_arch, src) in &trained {
        let adv = attack(src, &te_small.images, &ty, &pgd3).unwrap();
        let mut line = format!("c5 pgd from {}:", src_arch.name());
        for (tgt_arch, tgt) in &trained {
            line += &format!(" {}={:.3}", tgt_arch.name(), auc_of(tgt, &adv, &ty));
        }
        println!("{line}");
    }

    // Criterion 6: ensemble hold-out, multi-step methods, two eps levels.
    for eps in [0.05, 0.1, 0.2, 0.3] {
        for hold in 0..4 {
            let members: Vec<Model> = trained
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != hold)
                .map(|(_, (_, m))| m.clone())
                .collect();
            let ens = EnsembleModel::uniform(members).unwrap();
            for method in MULTI {
                let mut spec = AttackSpec::new(method);
                spec.epsilon = eps;
                spec.seed = seed;
                let adv = attack(&ens, &te_small.images, &ty, &spec).unwrap();
                let white = mean_auc(&ens.forward_logits(&adv).unwrap(), &ty).unwrap().0;
                let black = auc_of(&trained[hold].1, &adv, &ty);
                println!(
                    "c6 eps {eps} hold {} {}: white {:.3} black {:.3} {}",
                    trained[hold].0.name(),
                    method.name(),
                    white,
                    black,
                    if white <= black { "ok" } else { "VIOLATED" }
                );
            }
        }
    }

    // Criterion 10: L2 distance vs eps at T=40, per architecture.
    for (arch, m) in &trained {
        for method in METHODS {
            let mut line = format!("c10 {} {}:", arch.name(), method.name());
            for eps in [0.01, 0.05, 0.1, 0.3] {
                let mut spec = AttackSpec::new(method);
                spec.epsilon = eps;
                spec.iterations = 40;
                spec.seed = seed;
                let adv = attack(m, &te_small.images, &ty, &spec).unwrap();
                line += &format!(" {eps}:{:.3}", l2_distance(&te_small.images, &adv).unwrap());
            }
            println!("{line}");
        }
    }

    // c10 on the full four-model ensemble.
    let ens4 = EnsembleModel::uniform(trained.iter().map(|(_, m)| m.clone()).collect()).unwrap();
    for method in METHODS {
        let mut line = format!("c10 ens4 {}:", method.name());
        for eps in [0.01, 0.05, 0.1, 0.3] {
            let mut spec = AttackSpec::new(method);
            spec.epsilon = eps;
            spec.iterations = 40;
            spec.seed = seed;
            let adv = attack(&ens4, &te_small.images, &ty, &spec).unwrap();
            line += &format!(" {eps}:{:.3}", l2_distance(&te_small.images, &adv).unwrap());
        }
        println!("{line}");
    }

    }

    // Criterion 8: standard vs adversarially trained cnn_small at eps=4/255.
    let adv_path = std::path::PathBuf::from(format!("/tmp/adv_cnn_small_{seed}.bin"));
    let adv_model = if adv_path.exists() {
        Model::load(&adv_path).unwrap()
    } else {
        let t = Instant::now();
        let m = Model::init(ArchTag::CnnSmall, 32, 6, seed).unwrap();
        let advcfg = TrainConfig {
            epochs: 48,
            lr: 1e-3,
            seed,
            patience: Some(12),
            ..Default::default()
        };
        let m = adversarial_train(&m, &tr, Some(&va), &DefenseSpec::default(), &advcfg)
            .unwrap()
            .0;
        println!("adversarial train: {:?}", t.elapsed());
        m.save(&adv_path).unwrap();
        m
    };
    // c10 on the adversarially trained model as well.
    if !fast {
    for method in METHODS {
        let mut line = format!("c10 adv-cnn {}:", method.name());
        for eps in [0.01, 0.05, 0.1, 0.3] {
            let mut spec = AttackSpec::new(method);
            spec.epsilon = eps;
            spec.iterations = 40;
            spec.seed = seed;
            let adv = attack(&adv_model, &te_small.images, &ty, &spec).unwrap();
            line += &format!(" {eps}:{:.3}", l2_distance(&te_small.images, &adv).unwrap());
        }
        println!("{line}");
    }
    }

    let mut small = AttackSpec::new(AttackMethod::Pgd);
    small.epsilon = 4.0 / 255.0;
    small.seed = seed;
    let on_std = attack(&cnn, &te_small.images, &ty, &small).unwrap();
    let on_adv = attack(&adv_model, &te_small.images, &ty, &small).unwrap();
    println!(
        "c8: std clean {:.4} robust {:.4} | adv clean {:.4} robust {:.4}",
        auc_of(&cnn, &te_small.images, &ty),
        auc_of(&cnn, &on_std, &ty),
        auc_of(&adv_model, &te_small.images, &ty),
        auc_of(&adv_model, &on_adv, &ty)
    );

    // Cue-reliance probes: images rendered from a single cue family, with
    // the test split's labels. AUC ~0.5 means the model ignores that cue.
    {
        use axrx_core::data::{
            label_marker, label_plate, label_stamp, label_texture, MARKER_AMPLITUDE,
            PLATE_AMPLITUDE, STAMP_AMPLITUDE, TEXTURE_AMPLITUDE,
        };
        let per = 32 * 32;
        let l = 6;
        let mut probes: Vec<(&str, Vec<f64>)> = vec![
            ("stamp", vec![]),
            ("marker", vec![]),
            ("grating", vec![]),
            ("plate", vec![]),
        ];
        let yv = ty.data();
        for i in 0..200 {
            for (name, buf) in probes.iter_mut() {
                let mut img = vec![0.12f64; per];
                for lab in 0..l {
                    let pos = yv[i * l + lab] > 0.5;
                    match *name {
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
        }
        for (name, buf) in probes {
            let x = Tensor::new(vec![200, 1, 32, 32], buf).unwrap();
            println!(
                "probe {name}: std_cnn {:.3} adv_cnn {:.3} mlp {:.3} cnn_wide {:.3}",
                auc_of(&cnn, &x, &ty),
                auc_of(&adv_model, &x, &ty),
                auc_of(&trained[1].1, &x, &ty),
                auc_of(&trained[3].1, &x, &ty)
            );
        }
    }

    // Criterion 9: defense sweep.
    let dspec = DefenseSpec::default();
    for eps in [0.01, 0.05, 0.1, 0.2, 0.3] {
        let mut spec = AttackSpec::new(AttackMethod::Pgd);
        spec.epsilon = eps;
        spec.seed = seed;
        let on_adv = attack(&adv_model, &te_small.images, &ty, &spec).unwrap();
        let on_std = attack(&cnn, &te_small.images, &ty, &spec).unwrap();
        let advtrain = auc_of(&adv_model, &on_adv, &ty);
        let pdt = mean_auc(&defend_pdt(&cnn, &on_std, &dspec).unwrap(), &ty)
            .unwrap()
            .0;
        let combined = mean_auc(&defend_pdt(&adv_model, &on_std, &dspec).unwrap(), &ty)
            .unwrap()
            .0;
        let raw_transfer = auc_of(&adv_model, &on_std, &ty);
        println!(
            "c9 eps {eps}: advtrain {advtrain:.3} pdt {pdt:.3} combined {combined:.3} (adv-no-pdt {raw_transfer:.3})"
        );
    }
}
