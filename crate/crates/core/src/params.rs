//! Named, flat parameter groups shared by the model, optimizer and
//! checkpoint formats.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "group {name}: shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of parameter groups. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, group: ParamGroup) -> usize {
        self.groups.push(group);
        self.groups.len() - 1
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn data(&self, idx: usize) -> &[f64] {
        &self.groups[idx].data
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.groups[idx].data
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup::zeros(g.name.clone(), g.shape.clone()))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.groups
            .iter()
            .find(|g| g.data.iter().any(|x| !x.is_finite()))
            .map(|g| g.name.as_str())
    }

    /// Checks that `other` has the same group names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} groups vs {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "group {} {:?} vs {} {:?}",
                    a.name,
                    a.shape,
                    b.name,
                    b.shape
                )));
            }
        }
        Ok(())
    }
}
