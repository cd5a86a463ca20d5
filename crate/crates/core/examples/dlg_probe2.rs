//! Gradient-magnitude probe for noise-sweep calibration.

use flpl_core::data::{synth_dataset, DatasetKind, Label};
use flpl_core::models::{build_classifier, compute_gradient};
use flpl_core::data::Batch;

fn main() {
    for (size, ch) in [(16usize, 1usize), (32, 3)] {
        let (spec, params) = build_classifier(size, ch, 101).unwrap();
        let ds = synth_dataset(DatasetKind::Classifier, 1, size, 201);
        let Label::Class(_) = ds[0].label else { panic!() };
        let batch = Batch::from_samples(&ds).unwrap();
        let (loss, g) = compute_gradient(&spec, &params, &batch).unwrap();
        let n = g.values.len() as f64;
        let rms = (g.values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let linf = g.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // Per-entry RMS
        print!("size {size} ch {ch}: loss {loss:.3} n {n} rms {rms:.4} linf {linf:.4} | ");
        for e in g.layout.entries() {
            let s: f64 = g.values[e.offset..e.offset + e.size()]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                / e.size() as f64;
            print!("{} {:.4} ", e.name, s.sqrt());
        }
        println!();
    }
}
