use std::collections::BTreeMap;

use crate::error::{NtmError, Result};

/// A named trainable array with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Named trainable arrays with paired gradient buffers. Names are unique
/// and shapes never change after registration. Iteration order is the
/// sorted name order, which keeps updates deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NtmError::Config(format!("parameter '{name}' registered twice")));
        }
        let numel: usize = shape.iter().product();
        if value.len() != numel {
            return Err(NtmError::Config(format!(
                "parameter '{name}': {} values for shape {shape:?}",
                value.len()
            )));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(NtmError::Numeric {
                op: "register".to_string(),
                context: format!(" for parameter '{name}'"),
            });
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                grad: vec![0.0; numel],
                value,
                shape: shape.to_vec(),
            },
        );
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NtmError::Config(format!("gradient for unknown parameter '{name}'")))?;
        for (g, d) in entry.grad.iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    /// Zero all gradient accumulators. Called exactly once per training
    /// step, before the backward pass.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_fails() {
        let mut s = ParameterStore::new();
        s.register("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(s.register("w", &[2], vec![3.0, 4.0]).is_err());
    }

    #[test]
    fn shape_length_mismatch_fails() {
        let mut s = ParameterStore::new();
        assert!(s.register("w", &[3], vec![1.0]).is_err());
    }

    #[test]
    fn zero_grads_clears_accumulators() {
        let mut s = ParameterStore::new();
        s.register("w", &[2], vec![1.0, 2.0]).unwrap();
        s.accumulate("w", &[0.5, -0.5]).unwrap();
        s.zero_grads();
        assert_eq!(s.entry("w").unwrap().grad, vec![0.0, 0.0]);
    }
}
