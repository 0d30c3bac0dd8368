use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::ndmath::graph::{conv_out, Gradients, Graph, Var};
use crate::ndmath::params::ParamSet;
use crate::ndmath::tensor::{Scalar, Tensor};

/// Graph handles for every tensor of a [`ParamSet`].
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::shape(format!("parameter `{name}` not bound")))
    }

    /// Add the graph gradients of all bound tensors into `params`.
    pub fn accumulate<T: Scalar>(&self, grads: &Gradients<T>, params: &mut ParamSet<T>) -> Result<()> {
        for (name, v) in &self.vars {
            if let Some(g) = grads.get(*v) {
                params.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}

/// Register `params` as graph leaves: differentiable when `trainable`,
/// constants otherwise.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|p| {
            let v = if trainable {
                g.param(p.value.clone())
            } else {
                g.input(p.value.clone())
            };
            (p.name.clone(), v)
        })
        .collect();
    Bound { vars }
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

pub fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Convolution tower geometry: `kernel x kernel` filters, ReLU after each.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTower {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl ConvTower {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::shape("conv channels and strides must have equal, non-zero length"));
        }
        let mut size = self.input_size;
        for &s in &self.strides {
            if s == 0 || size < self.kernel {
                return Err(Error::shape(format!(
                    "input {} too small for conv tower {:?}",
                    self.input_size, self.channels
                )));
            }
            size = conv_out(size, self.kernel, s);
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.strides
            .iter()
            .fold(self.input_size, |size, &s| conv_out(size, self.kernel, s))
    }

    /// Flattened feature width.
    pub fn output_dim(&self) -> usize {
        let side = self.output_size();
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    /// He-normal weights, zero biases, named `{prefix}conv{i}.{w,b}`.
    pub fn init<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let fan_in = (cin * self.kernel * self.kernel) as f64;
            params.insert(
                format!("{prefix}conv{i}.w"),
                normal_tensor(&[cout, cin, self.kernel, self.kernel], (2.0 / fan_in).sqrt(), rng),
            )?;
            params.insert(format!("{prefix}conv{i}.b"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        Ok(())
    }

    /// `x [B, C, H, W]` to flattened features `[B, output_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &s) in self.strides.iter().enumerate() {
            let w = bound.var(&format!("{prefix}conv{i}.w"))?;
            let b = bound.var(&format!("{prefix}conv{i}.b"))?;
            h = g.conv2d(h, w, b, s)?;
            h = g.relu(h);
        }
        g.flatten(h)
    }
}

/// Uniform(±1/√fan_in) weights and biases, named `{name}.{w,b}`.
pub fn init_linear<T: Scalar>(
    name: &str,
    inp: usize,
    out: usize,
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (inp as f64).sqrt();
    params.insert(format!("{name}.w"), uniform_tensor(&[out, inp], bound, rng))?;
    params.insert(format!("{name}.b"), uniform_tensor(&[out], bound, rng))?;
    Ok(())
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    g.linear(x, w, b)
}
