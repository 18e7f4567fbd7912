use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Ordered collection of named 2-D parameter arrays.
///
/// Values are held in `f64` for computation but every optimizer-produced value
/// is kept representable in `f32` (see [`ModelParams::snap_f32`]) so that the
/// `f32` checkpoint container round-trips them exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. New names are appended in order.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// True when both sets have the same names, order and shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn check_layout(&self, other: &ModelParams, context: &'static str) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        Err(Error::Shape {
            context,
            expected: self.values.iter().map(Array2::len).collect(),
            actual: other.values.iter().map(Array2::len).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Rounds every value to the nearest `f32`.
    pub fn snap_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Largest absolute element-wise difference; `None` on layout mismatch.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max),
        )
    }

    /// Euclidean distance between two parameter sets of the same layout.
    pub fn distance(&self, other: &ModelParams) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)))
                .sum::<f64>()
                .sqrt(),
        )
    }
}

/// Gradients aligned entry-for-entry with a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Array2<f64>>,
}

impl Gradients {
    pub(crate) fn new(values: Vec<Array2<f64>>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// `[fan_in x fan_out]` weight with entries `N(0, gain^2 / fan_in)`.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Array2<f64> {
    let std = gain / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (std * z) as f32 as f64
    })
}
