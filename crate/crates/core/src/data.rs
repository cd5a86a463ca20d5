//! Synthetic datasets for the two reference tasks, plus an optional reader
//! for externally supplied CIFAR-10 binary batches. Synthetic data keeps the
//! repository hermetic: classification uses class-conditional Gaussian blobs,
//! segmentation uses piecewise-constant normal-map-like images whose region
//! boundaries define the ground-truth mask.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Ground-truth label of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// Binary mask shaped `[1, H, W]`.
    Mask(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`
    pub input: Tensor,
    pub label: Label,
}

pub type Dataset = Vec<Sample>;

/// A stacked mini-batch: inputs `[B,C,H,W]`, labels either `[B]` class
/// indices or `[B,1,H,W]` binary masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Tensor,
    classifier: bool,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self> {
        if inputs.shape.len() != 4 {
            return Err(CoreError::InvalidShape {
                op: "batch",
                shape: inputs.shape,
                reason: "inputs must be [B,C,H,W]".into(),
            });
        }
        let b = inputs.shape[0];
        let classifier = labels.shape.len() == 1;
        if labels.shape.first().copied() != Some(b) {
            return Err(CoreError::ShapeMismatch {
                op: "batch",
                lhs: inputs.shape,
                rhs: labels.shape,
            });
        }
        if !classifier {
            if labels.shape.len() != 4 || labels.shape[1] != 1 {
                return Err(CoreError::InvalidShape {
                    op: "batch",
                    shape: labels.shape,
                    reason: "mask labels must be [B,1,H,W]".into(),
                });
            }
            if labels.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(CoreError::InvalidArgument(
                    "mask labels must contain only 0 and 1".into(),
                ));
            }
        }
        Ok(Self {
            inputs,
            labels,
            classifier,
        })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::InvalidArgument("empty batch".into()));
        }
        let in_shape = samples[0].input.shape.clone();
        let mut inputs = Vec::new();
        for s in samples {
            if s.input.shape != in_shape {
                return Err(CoreError::ShapeMismatch {
                    op: "batch",
                    lhs: in_shape,
                    rhs: s.input.shape.clone(),
                });
            }
            inputs.extend_from_slice(&s.input.data);
        }
        let mut full_in = vec![samples.len()];
        full_in.extend_from_slice(&in_shape);
        let inputs = Tensor::new(full_in, inputs)?;

        let labels = match &samples[0].label {
            Label::Class(_) => {
                let data = samples
                    .iter()
                    .map(|s| match &s.label {
                        Label::Class(c) => Ok(*c as f64),
                        Label::Mask(_) => {
                            Err(CoreError::InvalidArgument("mixed label kinds in batch".into()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::from_vec(data)
            }
            Label::Mask(m0) => {
                let mshape = m0.shape.clone();
                let mut data = Vec::new();
                for s in samples {
                    match &s.label {
                        Label::Mask(m) if m.shape == mshape => data.extend_from_slice(&m.data),
                        _ => {
                            return Err(CoreError::InvalidArgument(
                                "mixed label kinds or shapes in batch".into(),
                            ))
                        }
                    }
                }
                let mut full = vec![samples.len()];
                full.extend_from_slice(&mshape);
                Tensor::new(full, data)?
            }
        };
        Self::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_classifier(&self) -> bool {
        self.classifier
    }

    pub fn sample_input(&self, i: usize) -> Tensor {
        let shape = self.inputs.shape[1..].to_vec();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: self.inputs.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn sample_label(&self, i: usize) -> Label {
        if self.classifier {
            Label::Class(self.labels.data[i] as usize)
        } else {
            let shape = self.labels.shape[1..].to_vec();
            let n: usize = shape.iter().product();
            Label::Mask(Tensor {
                shape,
                data: self.labels.data[i * n..(i + 1) * n].to_vec(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Classifier,
    Segmenter,
}

/// Deterministic synthetic dataset of `n` samples at spatial size `size`.
pub fn synth_dataset(kind: DatasetKind, n: usize, size: usize, seed: u64) -> Dataset {
    match kind {
        DatasetKind::Classifier => (0..n)
            .map(|i| synth_classifier_sample(size, rng::derive(seed, "cls"), i as u64))
            .collect(),
        DatasetKind::Segmenter => (0..n)
            .map(|i| synth_segmenter_sample(size, rng::derive(seed, "seg"), i as u64))
            .collect(),
    }
}

/// One grayscale image whose class decides a Gaussian blob's position.
fn synth_classifier_sample(size: usize, seed: u64, index: u64) -> Sample {
    let mut r = rng::stream(seed, index);
    let class = r.gen_range(0..NUM_CLASSES);
    let (gx, gy) = (class % 5, class / 5);
    let cx = (gx as f64 + 0.5) / 5.0 * size as f64;
    let cy = (gy as f64 + 0.5) / 2.0 * size as f64;
    let sigma = size as f64 / 7.0;

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp() + 0.05 * rng::normal(&mut r);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Sample {
        input: Tensor {
            shape: vec![1, size, size],
            data,
        },
        label: Label::Class(class),
    }
}

/// One synthetic normal map: 2-4 planar regions split by random lines, each
/// colored by a unit 3-vector; the mask marks region boundaries.
fn synth_segmenter_sample(size: usize, seed: u64, index: u64) -> Sample {
    let mut r = rng::stream(seed, index);
    let num_lines = r.gen_range(1..=2usize);
    let lines: Vec<(f64, f64, f64)> = (0..num_lines)
        .map(|_| {
            // Point in the central half of the image plus a direction.
            let px = size as f64 * r.gen_range(0.25..0.75);
            let py = size as f64 * r.gen_range(0.25..0.75);
            let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
            (px, py, theta)
        })
        .collect();

    let region_of = |x: f64, y: f64| -> usize {
        let mut id = 0;
        for (i, (px, py, theta)) in lines.iter().enumerate() {
            let nx = -theta.sin();
            let ny = theta.cos();
            if (x - px) * nx + (y - py) * ny > 0.0 {
                id |= 1 << i;
            }
        }
        id
    };

    let colors: Vec<[f64; 3]> = (0..(1usize << num_lines))
        .map(|_| {
            // Random unit vector mapped into [0,1] per channel.
            let v = [rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [
                (v[0] / n + 1.0) / 2.0,
                (v[1] / n + 1.0) / 2.0,
                (v[2] / n + 1.0) / 2.0,
            ]
        })
        .collect();

    let mut regions = vec![0usize; size * size];
    for y in 0..size {
        for x in 0..size {
            regions[y * size + x] = region_of(x as f64 + 0.5, y as f64 + 0.5);
        }
    }

    let mut input = vec![0.0; 3 * size * size];
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let id = regions[y * size + x];
            let col = colors[id];
            for c in 0..3 {
                let v = col[c] + 0.02 * rng::normal(&mut r);
                input[c * size * size + y * size + x] = v.clamp(0.0, 1.0);
            }
            let mut boundary = false;
            if x + 1 < size && regions[y * size + x + 1] != id {
                boundary = true;
            }
            if y + 1 < size && regions[(y + 1) * size + x] != id {
                boundary = true;
            }
            if x > 0 && regions[y * size + x - 1] != id {
                boundary = true;
            }
            if y > 0 && regions[(y - 1) * size + x] != id {
                boundary = true;
            }
            if boundary {
                mask[y * size + x] = 1.0;
            }
        }
    }

    Sample {
        input: Tensor {
            shape: vec![3, size, size],
            data: input,
        },
        label: Label::Mask(Tensor {
            shape: vec![1, size, size],
            data: mask,
        }),
    }
}

/// Record size of one CIFAR-10 binary-batch entry: 1 label byte followed by
/// 3072 pixel bytes (row-major R, G, B planes of a 32x32 image).
pub const CIFAR_RECORD_BYTES: usize = 3073;

/// Parses CIFAR-10 binary-batch bytes into samples with inputs in [0,1].
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "CIFAR batch must be a positive multiple of {CIFAR_RECORD_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(CoreError::InvalidArgument(format!(
                    "CIFAR label {label} out of range"
                )));
            }
            let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Sample {
                input: Tensor {
                    shape: vec![3, 32, 32],
                    data,
                },
                label: Label::Class(label),
            })
        })
        .collect()
}

/// Reads a CIFAR-10 binary batch file from disk.
pub fn load_cifar_file(path: &std::path::Path) -> Result<Dataset> {
    parse_cifar_batch(&std::fs::read(path)?)
}

/// Splits a dataset into `k` disjoint equal-size shards (remainder dropped).
pub fn shard_dataset(data: &Dataset, k: usize) -> Vec<Dataset> {
    let per = data.len() / k;
    (0..k)
        .map(|i| data[i * per..(i + 1) * per].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_dataset() {
        let a = synth_dataset(DatasetKind::Classifier, 12, 16, 3);
        let b = synth_dataset(DatasetKind::Classifier, 12, 16, 3);
        assert_eq!(a, b);
        let c = synth_dataset(DatasetKind::Segmenter, 6, 16, 3);
        let d = synth_dataset(DatasetKind::Segmenter, 6, 16, 3);
        assert_eq!(c, d);
    }

    #[test]
    fn segmenter_masks_have_both_values() {
        for seed in 0..20 {
            let ds = synth_dataset(DatasetKind::Segmenter, 4, 8, seed);
            for s in &ds {
                let Label::Mask(m) = &s.label else { panic!() };
                assert!(m.data.iter().any(|&v| v == 0.0), "seed {seed}: no zeros");
                assert!(m.data.iter().any(|&v| v == 1.0), "seed {seed}: no ones");
            }
        }
    }

    #[test]
    fn class_labels_roughly_uniform() {
        let n = 5000;
        let ds = synth_dataset(DatasetKind::Classifier, n, 8, 9);
        let mut counts = [0usize; NUM_CLASSES];
        for s in &ds {
            let Label::Class(c) = s.label else { panic!() };
            counts[c] += 1;
        }
        // Binomial(5000, 0.1): sd ~ 21, allow 5 sd.
        for (c, &k) in counts.iter().enumerate() {
            assert!(
                (k as f64 - 500.0).abs() < 110.0,
                "class {c} count {k} outside tolerance"
            );
        }
    }

    #[test]
    fn batch_stacks_and_unstacks() {
        let ds = synth_dataset(DatasetKind::Classifier, 3, 8, 1);
        let b = Batch::from_samples(&ds).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.sample_input(2), ds[2].input);
        assert_eq!(b.sample_label(1), ds[1].label);
    }

    #[test]
    fn batch_rejects_nonbinary_masks() {
        let inputs = Tensor::zeros(vec![1, 1, 2, 2]);
        let labels = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(Batch::new(inputs, labels).is_err());
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_RECORD_BYTES] = 2;
        let ds = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].label, Label::Class(7));
        assert_eq!(ds[0].input.data[0], 1.0);
        assert_eq!(ds[1].label, Label::Class(2));
        assert!(parse_cifar_batch(&bytes[..10]).is_err());
        // Out-of-range label.
        bytes[0] = 10;
        assert!(parse_cifar_batch(&bytes).is_err());
    }
}
