//! Named parameter tensors and their initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    Constant(f32),
}

/// Ordered name → tensor map. Registration order defines the flat layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        let data = match init {
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols)
                    .map(|_| R::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
            Init::Zeros => vec![R::ZERO; rows * cols],
            Init::Ones => vec![R::ONE; rows * cols],
            Init::Constant(c) => vec![R::from_f64(c as f64); rows * cols],
        };
        self.names.push(name.to_owned());
        self.tensors.push(Tensor { rows, cols, data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Name and shape of every parameter, in order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.iter().map(|(_, n, t)| (n.to_owned(), t.rows, t.cols)).collect()
    }

    /// Replaces all values with `other`'s after checking the layouts agree.
    pub fn load_from(&mut self, other: &ParamStore<R>) -> Result<(), NnError> {
        if self.layout() != other.layout() {
            return Err(NnError::ShapeMismatch("parameter layouts differ".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Builds a store from raw parts; used by checkpoint loading.
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<R>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn zeros_like(&self) -> Vec<Tensor<R>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}
