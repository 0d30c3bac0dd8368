use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndmath::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors with paired gradients, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    pub step: u64,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::shape(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::shape(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::shape(format!("no parameter named `{name}`"))),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Add `grad` into the gradient slot of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g = *g + d;
        }
        Ok(())
    }

    /// A copy holding only the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.insert(p.name.clone(), p.value.clone())
                .expect("names unique in source");
        }
        out
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast())
                .expect("names unique in source");
        }
        out.step = self.step;
        out
    }
}

/// Exponential moving average `target <- (1 - eta) * target + eta * online`.
pub fn ema_update<T: Scalar>(target: &mut ParamSet<T>, online: &ParamSet<T>, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::shape(format!("EMA momentum {eta} outside [0, 1]")));
    }
    if !target.same_layout(online) {
        return Err(Error::shape("EMA target and online parameter sets differ"));
    }
    // The endpoints are exact copies/no-ops rather than arithmetic.
    if eta == 0.0 {
        return Ok(());
    }
    let eta_t = T::lit(eta);
    let keep = T::lit(1.0 - eta);
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        if eta == 1.0 {
            t.value = o.value.clone();
            continue;
        }
        for (x, &y) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *x = keep * *x + eta_t * y;
        }
    }
    Ok(())
}
