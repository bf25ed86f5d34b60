//! Named, role-tagged trainable tensors.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which part of the multi-task model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    SharedEncoder,
    DepthDecoder,
    SegmentationDecoder,
    Ccam,
    Other,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::SharedEncoder,
        Role::DepthDecoder,
        Role::SegmentationDecoder,
        Role::Ccam,
        Role::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SharedEncoder => "shared-encoder",
            Role::DepthDecoder => "depth-decoder",
            Role::SegmentationDecoder => "segmentation-decoder",
            Role::Ccam => "ccam",
            Role::Other => "other",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown role '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered parameter collection of one model. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

/// Tape handles for every parameter of a store, for one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, role: Role, value: Tensor<T>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Param(alloc::format!("duplicate parameter name '{name}'")));
        }
        self.params.push(Parameter { name: name.into(), role, value: value.with_grad() });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar entries, optionally restricted to one role.
    pub fn count(&self, role: Option<Role>) -> usize {
        self.params
            .iter()
            .filter(|p| role.map_or(true, |r| p.role == r))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Puts every parameter on `tape`. Parameters for which `frozen` returns
    /// true become constants and never receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, frozen: impl Fn(&Parameter<T>) -> bool) -> Bindings {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut trainable = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let fz = frozen(p);
            let mut v = p.value.clone();
            v.zero_grad();
            vars.push(if fz { tape.constant(v) } else { tape.leaf(v) });
            trainable.push(!fz);
        }
        Bindings { vars, trainable }
    }

    /// Adds the gradients of trainable bindings into each parameter's
    /// accumulator.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bindings: &Bindings) -> Result<()> {
        if bindings.vars.len() != self.params.len() {
            return Err(Error::State("bindings do not belong to this store".into()));
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            if bindings.trainable[i] {
                grads.accumulate_into(bindings.vars[i], &mut p.value)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Euclidean norm of all accumulated gradients together.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|p| p.value.grad())
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        num_traits::Float::sqrt(sq)
    }

    /// Plain gradient step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: T) -> Result<()> {
        for p in &mut self.params {
            let g: Vec<T> = match p.value.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for (v, gv) in p.value.data_mut().iter_mut().zip(g) {
                *v -= lr * gv;
            }
            p.value.check_finite("sgd step")?;
        }
        Ok(())
    }
}

/// Zero-mean uniform initialization with bound `sqrt(6 / fan_in)`.
pub fn uniform_fan_in<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, dims: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = num_traits::Float::sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_roles_parse() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Role::Ccam, Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(s.add("a", Role::Other, Tensor::zeros(&[1]).unwrap()).is_err());
        for r in Role::ALL {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
        }
        assert!("encoder".parse::<Role>().is_err());
    }

    #[test]
    fn frozen_bindings_get_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Role::SharedEncoder, Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = s.add("b", Role::DepthDecoder, Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape, |p| p.role == Role::DepthDecoder);
        let y = tape.mul(bind.var(a), bind.var(b)).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        s.accumulate(&g, &bind).unwrap();
        assert_eq!(s.get(a).value.grad().unwrap(), &[3.0, 4.0]);
        assert_eq!(s.get(b).value.grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(s.grad_norm(), 5.0);
        s.sgd_step(0.5).unwrap();
        assert_eq!(s.get(a).value.data(), &[-0.5, 0.0]);
        assert_eq!(s.get(b).value.data(), &[3.0, 4.0]);
    }
}
