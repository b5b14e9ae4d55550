//! Flat parameter vectors with named, shaped views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// How a view is filled by [`init_params`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform { fan_in: usize },
    Zeros,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamView {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamView {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered set of views packed back to back into one flat vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    views: Vec<ParamView>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a view and returns its index. Panics on a zero extent.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        assert!(shape.iter().all(|&d| d > 0), "parameter extents must be positive");
        let view = ParamView {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        self.total += view.len();
        self.views.push(view);
        self.views.len() - 1
    }

    pub fn views(&self) -> &[ParamView] {
        &self.views
    }

    pub fn view(&self, index: usize) -> &ParamView {
        &self.views[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    /// Total scalar count.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, values: &[f64], index: usize) -> Tensor {
        let v = &self.views[index];
        Tensor::from_parts(v.shape.clone(), values[v.range()].to_vec())
    }
}

/// Deterministic initial values for `layout`: fan-in scaled uniform weights,
/// zero biases, and `normal(0, std)` embeddings.
pub fn init_params(layout: &ParamLayout, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; layout.total()];
    for view in layout.views() {
        let dst = &mut out[view.range()];
        match view.init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for x in dst.iter_mut() {
                    *x = rng.gen_range(-bound..=bound);
                }
            }
            Init::Zeros => {}
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("std must be finite and positive");
                for x in dst.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
    }
    out
}

/// Gradient with the same packing as the parameter vector it belongs to.
/// Views that received nothing stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    values: Vec<f64>,
}

impl GradientMap {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn add_view(&mut self, layout: &ParamLayout, index: usize, grad: &[f64]) {
        let range = layout.view(index).range();
        assert_eq!(range.len(), grad.len(), "gradient size for {}", layout.view(index).name);
        for (d, g) in self.values[range].iter_mut().zip(grad) {
            *d += g;
        }
    }

    pub fn view<'a>(&'a self, layout: &ParamLayout, index: usize) -> &'a [f64] {
        &self.values[layout.view(index).range()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn accumulate(&mut self, other: &GradientMap) {
        for (d, g) in self.values.iter_mut().zip(&other.values) {
            *d += g;
        }
    }
}
