use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::io::{read_tensor, write_tensor};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
}

/// Named trainable tensors. Iteration order is the lexical name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Contract(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.params.insert(name, Parameter { value, grad: None });
        Ok(())
    }

    /// Move every parameter of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for (name, p) in other.params {
            self.insert(format!("{prefix}{name}"), p.value)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Record parameters as constants (inference).
    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.cast(), requires_grad)))
                .collect(),
        }
    }

    /// Add the tape gradients of every bound parameter into its `grad`.
    /// Parameters the loss does not depend on receive zeros.
    pub fn accumulate_grads<T: Real>(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let var = bound.get(name)?;
            let g: Tensor<f32> = grads.get_or_zeros(var, p.value.shape()).cast();
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, &p.value)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let count = u32::from_le_bytes(b);
        let mut set = ParamSet::new();
        for _ in 0..count {
            r.read_exact(&mut b)?;
            let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?;
            set.insert(name, read_tensor(r)?)
                .map_err(|e| TensorError::Format(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("in-memory write");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut &bytes[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn file_layout_prefixes() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], b'w');
        assert_eq!(&bytes[9..13], b"RNTF");
    }

    #[test]
    fn unused_params_get_zero_grad() {
        let mut p = ParamSet::new();
        p.insert("used", Tensor::ones(&[2])).unwrap();
        p.insert("unused", Tensor::ones(&[3])).unwrap();
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape);
        let loss = tape.sum(b.get("used").unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        p.accumulate_grads(&b, &g).unwrap();
        assert_eq!(p.grad("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(p.grad("unused").unwrap().data(), &[0.0; 3]);
    }
}
