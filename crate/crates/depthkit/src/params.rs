//! Named parameter storage and the convolution layer shared by both networks.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.detach().with_grad()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Record every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.detach()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Replace values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.detach();
        }
        Ok(())
    }
}

/// Parameters recorded on one tape, indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Take the accumulated gradient of every parameter off the tape.
    pub fn take_grads(&self, tape: &mut Tape) -> Vec<Option<Vec<f32>>> {
        self.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// He (fan-in) normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut Xoshiro256PlusPlus, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}

/// Square convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Xoshiro256PlusPlus,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(rng, [cout, cin, k, k]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// `k×k`, stride 1, same padding.
    pub fn same(
        store: &mut ParamStore,
        rng: &mut Xoshiro256PlusPlus,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, cin, cout, k, 1, k / 2)
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.pad,
        )
    }

    pub fn apply_relu(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_normal_statistics() {
        let mut rng = init_rng(7);
        let t = he_normal(&mut rng, [64, 64, 3, 3]);
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = (2.0 / 576.0f64).sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.1);
        assert!(mean.abs() < 0.1 * expected);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0)).is_err());
        assert_eq!(s.find("a"), Some(ParamId(0)));
    }

    #[test]
    fn bound_grads_reach_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full([1, 1, 1, 2], 2.0)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape).unwrap();
        let y = tape.mul(b.var(id), b.var(id)).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(b.take_grads(&mut tape)[0].as_deref(), Some(&[4.0, 4.0][..]));
    }
}
