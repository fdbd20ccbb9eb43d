use crate::error::{arg_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

use super::{Gradients, Tape, Var};

/// Learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Box constraint re-applied after every optimizer update.
    pub bounds: Option<(T, T)>,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad, bounds: None, frozen: false }
    }

    pub fn clamp_to_bounds(&mut self) {
        if let Some((lo, hi)) = self.bounds {
            for v in self.value.data_mut() {
                *v = v.max(lo).min(hi);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of parameters belonging to one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T = f64> {
    params: Vec<Param<T>>,
}

/// Tape variables for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over explicit variables, one per parameter in set order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_bounded(&mut self, name: impl Into<String>, value: Tensor<T>, lo: T, hi: T) -> ParamId {
        let mut p = Param::new(name, value);
        p.bounds = Some((lo, hi));
        p.clamp_to_bounds();
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter value as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Binding> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Binding { vars })
    }

    /// Adds the gradients of a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients<T>) -> Result<()> {
        if binding.vars.len() != self.params.len() {
            return Err(arg_err("accumulate", "binding does not match parameter set"));
        }
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if !p.frozen {
                p.grad.add_assign(&grads.get(v)?)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn clamp_all(&mut self) {
        self.params.iter_mut().for_each(Param::clamp_to_bounds);
    }

    /// FNV-1a over names, shapes and value bits; equal iff parameters are bitwise equal
    /// (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_backward_accumulate() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        let sq = tape.mul(b.var(w), b.var(w)).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        ps.accumulate(&b, &g).unwrap();
        ps.accumulate(&b, &g).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[4.0, 8.0]);
        ps.zero_grad();
        assert_eq!(ps.get(w).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn bounds_clamp_on_creation() {
        let mut ps = ParamSet::<f64>::new();
        let s = ps.add_bounded("s", Tensor::scalar(3.0), 0.01, 1.0);
        assert_eq!(ps.value(s).data(), &[1.0]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("a", Tensor::zeros(&[3]));
        let c0 = ps.checksum();
        assert_eq!(c0, ps.clone().checksum());
        ps.get_mut(a).value.data_mut()[1] = 1e-300;
        assert_ne!(c0, ps.checksum());
    }
}
