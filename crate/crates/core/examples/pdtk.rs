//! Temporary calibration probe: defense-sweep endpoints as a function of the
//! default deflection count.

use axrx_core::attacks::{attack, AttackMethod, AttackSpec};
use axrx_core::data::{generate_synthetic, resolve_labels, split_dataset, LabelPolicy, SyntheticConfig};
use axrx_core::defenses::{defend_pdt, DefenseSpec};
use axrx_core::metrics::mean_auc;
use axrx_core::models::Model;
use axrx_core::tensor::Tensor;

fn auc_of(m: &Model, x: &Tensor, y: &Tensor) -> f64 {
    mean_auc(&m.forward_logits(x).unwrap(), y).unwrap().0
}

fn main() {
    let seed: u64 = 17;
    let raw = generate_synthetic(&SyntheticConfig {
        n: 4000,
        side: 32,
        num_labels: 6,
        seed,
        uncertainty_rate: 0.05,
    })
    .unwrap();
    let ds = resolve_labels(&raw, &LabelPolicy::chexpert_default(&raw.label_names)).unwrap();
    let (_, _, te) = split_dataset(&ds, seed);
    let te_small = te.select(&(0..200).collect::<Vec<_>>(), None);
    let ty = te_small.label_tensor().unwrap();

    let std_m = Model::load(std::path::Path::new("/tmp/std_cnn_small_17_80.bin")).unwrap();
    let adv_m = Model::load(std::path::Path::new("/tmp/adv_cnn_small_17.bin")).unwrap();
    println!(
        "clean: std {:.3} adv {:.3}",
        auc_of(&std_m, &te_small.images, &ty),
        auc_of(&adv_m, &te_small.images, &ty)
    );

    for eps in [0.01, 0.3] {
        let mut spec = AttackSpec::new(AttackMethod::Pgd);
        spec.epsilon = eps;
        spec.seed = seed;
        let on_adv = attack(&adv_m, &te_small.images, &ty, &spec).unwrap();
        let on_std = attack(&std_m, &te_small.images, &ty, &spec).unwrap();
        let advtrain = auc_of(&adv_m, &on_adv, &ty);
        let raw_tr = auc_of(&adv_m, &on_std, &ty);
        println!("eps {eps}: advtrain {advtrain:.3} adv-no-pdt {raw_tr:.3}");
        for k in [100usize, 200, 300, 500, 800] {
            let dspec = DefenseSpec {
                deflections: k,
                ..Default::default()
            };
            let pdt = mean_auc(&defend_pdt(&std_m, &on_std, &dspec).unwrap(), &ty)
                .unwrap()
                .0;
            let combined = mean_auc(&defend_pdt(&adv_m, &on_std, &dspec).unwrap(), &ty)
                .unwrap()
                .0;
            println!("  K={k}: pdt {pdt:.3} combined {combined:.3}");
        }
    }
}
