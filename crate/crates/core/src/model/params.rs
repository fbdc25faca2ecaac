//! Flat registry of named parameter tensors and normalization buffers.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormState, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Every trainable tensor of a model, addressable by dotted name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    buffers: BTreeMap<String, NormState<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Precondition(format!("parameter '{name}' registered twice")));
        }
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    pub fn insert_buffer(&mut self, name: &str, state: NormState<T>) -> Result<()> {
        if self.buffers.insert(name.to_string(), state).is_some() {
            return Err(Error::Precondition(format!("buffer '{name}' registered twice")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("no parameter named '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let i = self.id(name)?;
        Ok(&mut self.params[i])
    }

    pub fn buffers(&self) -> &BTreeMap<String, NormState<T>> {
        &self.buffers
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut NormState<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Precondition(format!("no buffer named '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&NormState<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("no buffer named '{name}'")))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    /// Puts every parameter on `g`; frozen ones (or all, when `grads` is false)
    /// become constants.
    pub fn bind(&self, g: &mut Graph<T>, grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), grads && !p.frozen))
            .collect()
    }

    /// Order-independent 64-bit fingerprint of values, freeze flags and buffers.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            eat(&[p.frozen as u8]);
            for v in p.value.data() {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        for (name, s) in &self.buffers {
            eat(name.as_bytes());
            for v in s.running_mean.iter().chain(&s.running_var) {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// He-normal weights for a `fan_in × fan_out` matrix.
pub(crate) fn he_normal<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub(crate) fn normal<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Shell-style pattern match supporting `*` (any run of characters) and `?`.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let (p, n): (Vec<char>, Vec<char>) = (pattern.chars().collect(), name.chars().collect());
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_patterns() {
        assert!(glob_match("extractor.*", "extractor.pn0.norm.gamma"));
        assert!(glob_match("*.scale_gen.*", "head.pn.scale_gen.weight"));
        assert!(!glob_match("*.scale_gen.*", "ctx_table"));
        assert!(glob_match("ctx_table", "ctx_table"));
        assert!(glob_match("head.?n.*", "head.pn.norm.beta"));
        assert!(!glob_match("head", "head.pn"));
        assert!(glob_match("*", ""));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert!(s.get("b").is_err());
    }
}
