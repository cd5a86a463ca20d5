//! Prune ordering at sigma_init=0.2 and segmenter input-only vs joint probe.

use flpl_core::data::{synth_dataset, DatasetKind, Label};
use flpl_core::defenses::{DefenseConfig, DefenseMode};
use flpl_core::dlg::{
    attack_under_defense, dlg_input_only, dlg_reconstruct, label_to_target, AttackConfig,
    AttackObjective,
};
use flpl_core::models::{build_classifier, build_segmenter, compute_gradient_soft};
use flpl_core::ModelParams;

fn scaled(p: &ModelParams, s: f64) -> ModelParams {
    ModelParams {
        values: p.values.iter().map(|v| v * s).collect(),
        layout: p.layout.clone(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
}

fn main() {
    println!("== prune sweep at sigma_init 0.2");
    for ratio in [0.0, 0.5, 0.87, 0.905] {
        let mut psnrs = Vec::new();
        for seed in 0..10u64 {
            let (spec, p0) = build_classifier(16, 1, 100 + seed).unwrap();
            let params = scaled(&p0, 2.0);
            let ds = synth_dataset(DatasetKind::Classifier, 1, 16, 200 + seed);
            let cfg = AttackConfig {
                max_outer_iters: 15,
                lbfgs_max_inner: 20,
                seed,
                ..AttackConfig::default()
            };
            let defense = if ratio == 0.0 {
                DefenseConfig::none()
            } else {
                DefenseConfig {
                    mode: DefenseMode::CompressRatio { target_ratio: ratio },
                    seed: 0,
                }
            };
            let (res, _) =
                attack_under_defense(&spec, &params, &ds[0].input, &ds[0].label, &defense, &cfg)
                    .unwrap();
            psnrs.push(res.psnr_to_truth.unwrap());
        }
        println!("  ratio {ratio}: median {:.2}", median(psnrs));
    }

    println!("== segmenter joint vs input-only (neg_cosine, sigma 0.2)");
    let t0 = std::time::Instant::now();
    let (mut joint, mut input_only) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let (spec, p0) = build_segmenter(16, 300 + seed).unwrap();
        let params = scaled(&p0, 2.0);
        let ds = synth_dataset(DatasetKind::Segmenter, 1, 16, 400 + seed);
        let Label::Mask(mask) = &ds[0].label else { panic!() };
        let target_t = label_to_target(&spec, &ds[0].label).unwrap();
        let (_, grad) = compute_gradient_soft(&spec, &params, &ds[0].input, &target_t).unwrap();
        let cfg = AttackConfig {
            objective: AttackObjective::NegCosine,
            max_outer_iters: 15,
            lbfgs_max_inner: 20,
            seed,
            ..AttackConfig::default()
        };
        let mut r1 = dlg_reconstruct(&spec, &params, &grad, &cfg).unwrap();
        r1.add_truth_metrics(&ds[0].input).unwrap();
        let mut r2 = dlg_input_only(&spec, &params, &grad, mask.clone(), &cfg).unwrap();
        r2.add_truth_metrics(&ds[0].input).unwrap();
        println!(
            "  seed {seed}: joint {:.2} dB (loss {:.2e}, div {}), input-only {:.2} dB (loss {:.2e}, div {})",
            r1.psnr_to_truth.unwrap(),
            r1.final_grad_match_loss,
            r1.diverged,
            r2.psnr_to_truth.unwrap(),
            r2.final_grad_match_loss,
            r2.diverged
        );
        joint.push(r1.psnr_to_truth.unwrap());
        input_only.push(r2.psnr_to_truth.unwrap());
    }
    println!(
        "  joint median {:.2}, input-only median {:.2} ({:?})",
        median(joint),
        median(input_only),
        t0.elapsed()
    );
}
