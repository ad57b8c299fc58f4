//! Named parameter collections for one model component.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A flat, named collection of real-valued parameter arrays.
///
/// The name set is stable for a given architecture config, which is what
/// makes element-wise arithmetic between two sets well defined. BTreeMap
/// keeps iteration order deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ParameterSet<F: Scalar> {
    entries: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.entries.iter_mut()
    }

    /// `(name, shape)` pairs in deterministic order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn same_schema(&self, other: &Self) -> bool {
        self.schema() == other.schema()
    }

    fn require_same_schema(&self, other: &Self, op: &str) -> Result<()> {
        if !self.same_schema(other) {
            return Err(Error::Contract(format!(
                "parameter schemas differ in {op}: {} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// `tau * self + (1 - tau) * other`, element-wise.
    ///
    /// The endpoints are special-cased so `tau = 1` returns `self` and
    /// `tau = 0` returns `other` bit-exactly.
    pub fn lerp(&self, other: &Self, tau: F) -> Result<Self> {
        self.require_same_schema(other, "lerp")?;
        if tau == F::one() {
            return Ok(self.clone());
        }
        if tau == F::zero() {
            return Ok(other.clone());
        }
        let one_minus = F::one() - tau;
        let entries = self
            .entries
            .iter()
            .map(|(k, a)| {
                let b = &other.entries[k];
                let mixed = ndarray::Zip::from(a).and(b).map_collect(|&x, &y| tau * x + one_minus * y);
                (k.clone(), mixed)
            })
            .collect();
        Ok(Self { entries })
    }

    /// `self + scale * other`, element-wise.
    pub fn add_scaled(&self, other: &Self, scale: F) -> Result<Self> {
        self.require_same_schema(other, "add_scaled")?;
        let entries = self
            .entries
            .iter()
            .map(|(k, a)| {
                let b = &other.entries[k];
                let sum = ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x + scale * y);
                (k.clone(), sum)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn scale(&self, factor: F) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, a)| (k.clone(), a.mapv(|x| x * factor)))
            .collect();
        Self { entries }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Multiset of all scalar values, sorted. Used by the swap-conservation check.
    pub fn sorted_values(&self) -> Vec<F> {
        let mut all: Vec<F> = self.entries.values().flat_map(|a| a.iter().copied()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite parameter values"));
        all
    }

    pub fn map<G: Scalar>(&self) -> ParameterSet<G> {
        let entries = self
            .entries
            .iter()
            .map(|(k, a)| (k.clone(), a.mapv(|x| G::from_f64c(x.to_f64c()))))
            .collect();
        ParameterSet { entries }
    }
}
