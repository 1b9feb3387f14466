use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.register(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry_count(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    /// Replace a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: DenseMatrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let expected = self.values[id.0].shape();
        if value.shape() != expected {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected,
                found: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}
