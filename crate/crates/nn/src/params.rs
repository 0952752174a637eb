//! Named parameter collections and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernel; `fan_in` drives He initialization.
    Weight {
        fan_in: usize,
    },
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Ordered, named parameter arrays of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Parameters as stored and trained.
pub type NetworkParams = ParamSet<f32>;

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(NnError::Shape(format!(
                    "parameter {} has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn data(&self, idx: usize) -> &[T] {
        &self.entries[idx].data
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.entries[idx].data
    }

    /// Number of scalars in trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                    data: e.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`]; running statistics have none.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params
                .entries()
                .iter()
                .map(|e| e.kind.trainable().then(|| vec![T::zero(); e.data.len()]))
                .collect(),
        }
    }

    pub fn from_vecs(grads: Vec<Option<Vec<T>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.grads[idx].as_deref()
    }

    pub(crate) fn set(&mut self, idx: usize, g: Vec<T>) {
        let slot = self.grads[idx].as_mut().expect("trainable parameter");
        assert_eq!(slot.len(), g.len(), "gradient length");
        *slot = g;
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&[T]>> {
        self.grads.iter().map(|g| g.as_deref())
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
