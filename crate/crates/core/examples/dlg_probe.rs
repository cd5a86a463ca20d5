//! Scratch probe for attack calibration; run with
//! `cargo run --release -p flpl-core --example dlg_probe`.

use flpl_core::data::{synth_dataset, DatasetKind, Label};
use flpl_core::dlg::{attack_under_defense, AttackConfig};
use flpl_core::defenses::DefenseConfig;
use flpl_core::models::build_classifier;

use flpl_core::defenses::DefenseMode;

fn median_psnr(defense: &DefenseConfig, label: &str) -> f64 {
    let t0 = std::time::Instant::now();
    let mut psnrs = Vec::new();
    for seed in 0..10u64 {
        let (spec, params) = build_classifier(16, 1, 100 + seed).unwrap();
        let ds = synth_dataset(DatasetKind::Classifier, 1, 16, 200 + seed);
        let Label::Class(_) = ds[0].label else { panic!() };
        let cfg = AttackConfig {
            max_outer_iters: 15,
            lbfgs_max_inner: 20,
            seed,
            ..AttackConfig::default()
        };
        let mut d = defense.clone();
        d.seed = 900 + seed;
        let (res, _) =
            attack_under_defense(&spec, &params, &ds[0].input, &ds[0].label, &d, &cfg).unwrap();
        psnrs.push(res.psnr_to_truth.unwrap());
    }
    psnrs.sort_by(f64::total_cmp);
    let med = (psnrs[4] + psnrs[5]) / 2.0;
    println!(
        "{label}: median {med:.2} dB  all {:?}  ({:?})",
        psnrs.iter().map(|p| (p * 10.0).round() / 10.0).collect::<Vec<_>>(),
        t0.elapsed()
    );
    med
}

fn main() {
    let none = median_psnr(&DefenseConfig::none(), "no defense          ");
    for ratio in [0.5, 0.87, 0.905] {
        median_psnr(
            &DefenseConfig { mode: DefenseMode::CompressRatio { target_ratio: ratio }, seed: 0 },
            &format!("prune ratio {ratio:<7}"),
        );
    }
    for var in [0.001, 0.007] {
        median_psnr(
            &DefenseConfig { mode: DefenseMode::Noise { variance: var }, seed: 0 },
            &format!("noise var {var:<9}"),
        );
    }
    println!("baseline median: {none:.2}");
}
