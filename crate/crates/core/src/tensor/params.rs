use std::collections::HashMap;

use rand::Rng as _;

use super::{lit, Float, Gradients, Tensor};
use crate::error::Result;
use crate::rng::{self, Rng};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Initialization scheme for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)` (ReLU gain).
    KaimingUniform { fan_in: usize },
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Uniform(f64),
}

/// Named learnable parameters and non-learnable buffers (running statistics).
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
    rng: Rng,
}

impl<F: Float> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            rng: rng::stream(seed, "init"),
        }
    }

    /// Registers a learnable tensor. Panics on a duplicate name.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.insert(name, shape, init, true)
    }

    /// Registers a tensor that is saved in checkpoints but never trained.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.insert(name, shape, init, false)
    }

    fn insert(&mut self, name: &str, shape: &[usize], init: Init, learnable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); numel],
            Init::Ones => vec![F::one(); numel],
            Init::Constant(c) => vec![lit(c); numel],
            Init::KaimingUniform { fan_in } => self.uniform(numel, (6.0 / fan_in as f64).sqrt()),
            Init::XavierUniform { fan_in, fan_out } => {
                self.uniform(numel, (6.0 / (fan_in + fan_out) as f64).sqrt())
            }
            Init::Uniform(bound) => self.uniform(numel, bound),
        };
        let mut t = Tensor::new(shape, data).expect("parameter shape");
        t.set_requires_grad(learnable);
        let id = self.tensors.len();
        self.tensors.push(t);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<F> {
        (0..n)
            .map(|_| lit(self.rng.random_range(-bound..=bound)))
            .collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Learnable tensors only.
    pub fn learnable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad())
    }

    /// Total scalar count of learnable tensors whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, t)| t.requires_grad() && n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds a backward pass's parameter gradients into each tensor's buffer.
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Overwrites a tensor's values, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, values: &[F]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(crate::error::dim_err!(
                "`{}` has {} values, got {}",
                self.names[id.0],
                t.numel(),
                values.len()
            ));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = ParamStore::<f64>::new(3);
        let mut b = ParamStore::<f64>::new(3);
        let ia = a.param("w", &[4, 8], Init::KaimingUniform { fan_in: 8 });
        let ib = b.param("w", &[4, 8], Init::KaimingUniform { fan_in: 8 });
        assert_eq!(a.get(ia), b.get(ib));
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= bound));
        let buf = a.buffer("running_mean", &[4], Init::Zeros);
        assert!(!a.get(buf).requires_grad());
        assert_eq!(a.count_params(""), 32);
        assert_eq!(a.id("w"), Some(ia));
    }
}
