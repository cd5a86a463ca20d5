//! Flat parameter and gradient vectors with a shared named layout.
//!
//! Model parameters and the gradients extracted from training share one
//! `Layout`, so defenses, encryption and aggregation can all treat a model as
//! a single flat vector and still recover per-layer structure when needed.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    /// Builds a layout from (name, shape) pairs with contiguous offsets.
    pub fn new(parts: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, shape) in parts {
            let size: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name,
                shape,
                offset,
            });
            offset += size;
        }
        Self {
            entries,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Slices `values` into the per-entry tensors.
    pub fn unflatten(&self, values: &[f64]) -> Result<Vec<Tensor>> {
        if values.len() != self.total {
            return Err(CoreError::LayoutMismatch(format!(
                "layout holds {} values, vector has {}",
                self.total,
                values.len()
            )));
        }
        self.entries
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), values[e.offset..e.offset + e.size()].to_vec()))
            .collect()
    }

    /// Concatenates per-entry tensors back into one flat vector.
    pub fn flatten(&self, tensors: &[Tensor]) -> Result<Vec<f64>> {
        if tensors.len() != self.entries.len() {
            return Err(CoreError::LayoutMismatch(format!(
                "layout has {} entries, got {} tensors",
                self.entries.len(),
                tensors.len()
            )));
        }
        let mut out = vec![0.0; self.total];
        for (e, t) in self.entries.iter().zip(tensors) {
            if t.shape != e.shape {
                return Err(CoreError::LayoutMismatch(format!(
                    "entry {} expects shape {:?}, got {:?}",
                    e.name, e.shape, t.shape
                )));
            }
            out[e.offset..e.offset + e.size()].copy_from_slice(&t.data);
        }
        Ok(out)
    }
}

/// Flattened gradient of every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(CoreError::LayoutMismatch(format!(
                "gradient has {} values, layout wants {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &GradientVector) -> bool {
        self.layout == other.layout
    }
}

/// Flat parameter store for a model; shares the layout type with gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(CoreError::LayoutMismatch(format!(
                "params have {} values, layout wants {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// params - lr * grad, elementwise.
    pub fn sgd_step(&mut self, grad: &GradientVector, lr: f64) -> Result<()> {
        if self.layout != grad.layout {
            return Err(CoreError::LayoutMismatch(
                "sgd_step: gradient layout differs from parameter layout".into(),
            ));
        }
        for (p, g) in self.values.iter_mut().zip(&grad.values) {
            *p -= lr * g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout::new(vec![
            ("w".into(), vec![2, 3]),
            ("b".into(), vec![3]),
        ])
    }

    #[test]
    fn offsets_contiguous() {
        let l = layout();
        assert_eq!(l.total_len(), 9);
        assert_eq!(l.entries()[0].offset, 0);
        assert_eq!(l.entries()[1].offset, 6);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let l = layout();
        let v: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let tensors = l.unflatten(&v).unwrap();
        let back = l.flatten(&tensors).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn size_mismatch_rejected() {
        let l = Arc::new(layout());
        assert!(GradientVector::new(vec![0.0; 8], l.clone()).is_err());
        assert!(ModelParams::new(vec![0.0; 9], l).is_ok());
    }
}
