//! Per-label diagnostics for the white-box floor of the linear model.

use axrx_core::attacks::{attack, AttackMethod, AttackSpec};
use axrx_core::data::{generate_synthetic, split_dataset, SyntheticConfig};
use axrx_core::metrics::mean_auc;
use axrx_core::models::{ArchTag, Model};
use axrx_core::train::{train, TrainConfig};

fn main() {
    let ds = generate_synthetic(&SyntheticConfig {
        n: 4000,
        side: 32,
        num_labels: 6,
        seed: 17,
        uncertainty_rate: 0.05,
    })
    .unwrap();
    let ds = axrx_core::data::resolve_labels(
        &ds,
        &axrx_core::data::LabelPolicy::chexpert_default(&ds.label_names),
    )
    .unwrap();
    let (tr, va, te) = split_dataset(&ds, 17);
    let te = te.select(&(0..200).collect::<Vec<_>>(), None);
    let ty = te.label_tensor().unwrap();

    let cfg = TrainConfig { epochs: 20, lr: 1e-3, ..Default::default() };
    for arch in [ArchTag::Linear, ArchTag::Mlp] {
        let m = Model::init(arch, 32, 6, 17).unwrap();
        let m = train(&m, &tr, Some(&va), &cfg).unwrap().0;
        let (clean, clean_per) = mean_auc(&m.forward_logits(&te.images).unwrap(), &ty).unwrap();
        let mut spec = AttackSpec::new(AttackMethod::Pgd);
        spec.epsilon = 0.3;
        spec.seed = 17;
        let adv = attack(&m, &te.images, &ty, &spec).unwrap();
        let (white, white_per) = mean_auc(&m.forward_logits(&adv).unwrap(), &ty).unwrap();
        println!("{}: clean {clean:.3} {clean_per:?}", arch.name());
        println!("{}: white {white:.3} {white_per:?}", arch.name());
    }
}
