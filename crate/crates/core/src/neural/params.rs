//! Named parameter storage shared by all model components.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Mat, Real};

/// Which trainable component a parameter belongs to. Learning rates and
/// stage gating are keyed on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EntitySelector,
    AttributeSelector,
    Generator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::EntitySelector,
        ParamGroup::AttributeSelector,
        ParamGroup::Generator,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat<T>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        self.add(name, group, Mat::from_vec(rows, cols, data))
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> ParamId {
        self.add(
            name,
            group,
            Mat::from_vec(rows, cols, vec![T::from_f64_lossy(v); rows * cols]),
        )
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count of a group.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Concatenated parameter values of a group, in registration order.
    pub fn flatten_group(&self, group: ParamGroup) -> Vec<T> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data.iter().copied())
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Converts every tensor to another precision, preserving ids.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Mat::from_f64(&p.value.to_f64()),
                })
                .collect(),
        }
    }
}
