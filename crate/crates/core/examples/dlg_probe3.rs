//! Noise-sweep calibration across init scales.

use flpl_core::data::{synth_dataset, Batch, DatasetKind};
use flpl_core::defenses::{DefenseConfig, DefenseMode};
use flpl_core::dlg::{attack_under_defense, AttackConfig};
use flpl_core::models::{build_classifier, compute_gradient};
use flpl_core::ModelParams;

fn main() {
    for sigma_scale in [1.0f64, 2.0, 3.0] {
        println!("== sigma_init = {}", 0.1 * sigma_scale);
        let mut meds = Vec::new();
        for var in [0.0, 0.001, 0.007] {
            let mut psnrs = Vec::new();
            for seed in 0..10u64 {
                let (spec, p0) = build_classifier(16, 1, 100 + seed).unwrap();
                let params = ModelParams {
                    values: p0.values.iter().map(|v| v * sigma_scale).collect(),
                    layout: p0.layout.clone(),
                };
                let ds = synth_dataset(DatasetKind::Classifier, 1, 16, 200 + seed);
                let cfg = AttackConfig {
                    max_outer_iters: 15,
                    lbfgs_max_inner: 20,
                    seed,
                    ..AttackConfig::default()
                };
                let defense = if var == 0.0 {
                    DefenseConfig::none()
                } else {
                    DefenseConfig { mode: DefenseMode::Noise { variance: var }, seed: 900 + seed }
                };
                let (res, _) = attack_under_defense(
                    &spec, &params, &ds[0].input, &ds[0].label, &defense, &cfg,
                )
                .unwrap();
                psnrs.push(res.psnr_to_truth.unwrap());
            }
            psnrs.sort_by(f64::total_cmp);
            let med = (psnrs[4] + psnrs[5]) / 2.0;
            meds.push(med);
            println!(
                "  var {var:<6}: median {med:.2}  all {:?}",
                psnrs.iter().map(|p| (p * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
        // gradient scale at this init
        let (spec, p0) = build_classifier(16, 1, 100).unwrap();
        let params = ModelParams {
            values: p0.values.iter().map(|v| v * sigma_scale).collect(),
            layout: p0.layout.clone(),
        };
        let ds = synth_dataset(DatasetKind::Classifier, 1, 16, 200);
        let batch = Batch::from_samples(&ds).unwrap();
        let (_, g) = compute_gradient(&spec, &params, &batch).unwrap();
        let rms = (g.values.iter().map(|v| v * v).sum::<f64>() / g.values.len() as f64).sqrt();
        println!("  grad rms {rms:.4}; monotone: {}", meds[0] >= meds[1] && meds[1] >= meds[2]);
    }
}
