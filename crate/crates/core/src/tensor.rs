//! Dense row-major tensors and named parameter collections.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Dense n-dimensional array. Gradient storage lives on the tensor itself;
/// a frozen tensor (`requires_grad == false`) never holds one.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian init, mean 0. One sequential draw per element, so the result
    /// is a pure function of the seed.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f64, std).expect("std must be finite");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::from_f64(normal.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn randn_seeded(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn(shape, std, &mut rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient. Rejected for frozen tensors: those
    /// must never see a backward-pass write.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::FreezeViolation(
                "gradient write to a tensor with requires_grad == false".into(),
            ));
        }
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst = *dst + *src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Exact comparison on bit patterns; NaNs compare equal to themselves.
    pub fn bitwise_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Token ids laid out row-major as `batch` rows of `seq` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::InvalidArgument(format!(
                "token batch wants {}x{} = {} ids, got {}",
                batch,
                seq,
                batch * seq,
                ids.len()
            )));
        }
        Ok(TokenBatch { ids, batch, seq })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Named parameter map. Iteration order is the lexicographic name order,
/// which fixes the reduction order in the optimizer and the layout order in
/// checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup<S: Scalar = f32> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamGroup<S> {
    pub fn new() -> Self {
        ParamGroup { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor<S>) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter path `{path}`"
            )));
        }
        self.entries.insert(path.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<S>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Marks an entry frozen (or trainable). Freezing drops any gradient.
    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        match self.entries.get_mut(path) {
            Some(t) => {
                t.set_requires_grad(!frozen);
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!(
                "no parameter named `{path}`"
            ))),
        }
    }

    pub fn frozen(&self, path: &str) -> Option<bool> {
        self.entries.get(path).map(|t| !t.requires_grad())
    }

    pub fn freeze_all(&mut self) {
        for t in self.entries.values_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn total_numel(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn empty_shapes_are_valid() {
        let t = Tensor::<f32>::new(vec![0, 3], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn frozen_tensor_rejects_gradient_writes() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        assert!(matches!(
            t.accumulate_grad(&[1.0, 1.0]),
            Err(Error::FreezeViolation(_))
        ));
        assert!(t.grad().is_none());

        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn unfreezing_then_freezing_clears_grad() {
        let mut t = Tensor::<f32>::zeros(vec![1]);
        t.set_requires_grad(true);
        t.accumulate_grad(&[3.0]).unwrap();
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f32>::randn_seeded(vec![16], 0.02, 9);
        let b = Tensor::<f32>::randn_seeded(vec![16], 0.02, 9);
        let c = Tensor::<f32>::randn_seeded(vec![16], 0.02, 10);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn param_group_rejects_duplicate_paths() {
        let mut g = ParamGroup::<f32>::new();
        g.insert("w", Tensor::zeros(vec![1])).unwrap();
        assert!(g.insert("w", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn param_group_iterates_in_name_order() {
        let mut g = ParamGroup::<f32>::new();
        g.insert("b", Tensor::zeros(vec![1])).unwrap();
        g.insert("a", Tensor::zeros(vec![1])).unwrap();
        g.insert("c", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<&str> = g.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn freezing_syncs_requires_grad() {
        let mut g = ParamGroup::<f32>::new();
        let mut t = Tensor::zeros(vec![1]);
        t.set_requires_grad(true);
        g.insert("w", t).unwrap();
        assert_eq!(g.frozen("w"), Some(false));
        g.set_frozen("w", true).unwrap();
        assert_eq!(g.frozen("w"), Some(true));
        assert!(!g.get("w").unwrap().requires_grad());
    }
}
