//! Parameterized layer descriptors. A descriptor owns no tensors: it knows its
//! parameter names and shapes, how to initialize them into a [`ParamStore`],
//! and how to apply itself on a [`Tape`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParamStore;
use super::tape::{ConvOpts, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He,
    Zeros,
}

fn he_normal<S: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        S::from_f64_lossy(z * std)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: ConvOpts,
    pub bias: bool,
}

impl Conv2d {
    /// Square kernel, stride 1, "same" padding, with bias.
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            opts: ConvOpts::same(kernel),
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.opts.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.opts.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<S>, init: Init, rng: &mut R) {
        let cin_g = self.in_channels / self.opts.groups;
        let shape = vec![self.out_channels, cin_g, self.kernel, self.kernel];
        let w = match init {
            Init::He => he_normal(shape, cin_g * self.kernel * self.kernel, rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        params.insert(self.weight_name(), w);
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(vec![self.out_channels]));
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.weight_name(), params.get(&self.weight_name())?);
        let b = if self.bias {
            Some(tape.param(&self.bias_name(), params.get(&self.bias_name())?))
        } else {
            None
        };
        tape.conv2d(x, w, b, self.opts)
    }
}

/// Affine map on rows: `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<S>, init: Init, rng: &mut R) {
        let shape = vec![self.in_features, self.out_features];
        let w = match init {
            Init::He => he_normal(shape, self.in_features, rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        params.insert(format!("{}.weight", self.name), w);
        params.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.out_features]));
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let wn = format!("{}.weight", self.name);
        let bn = format!("{}.bias", self.name);
        let w = tape.param(&wn, params.get(&wn)?);
        let b = tape.param(&bn, params.get(&bn)?);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count not above `max_groups` that divides
    /// `channels`.
    pub fn new(name: impl Into<String>, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels).max(1))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        Self {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn init<S: Scalar>(&self, params: &mut ParamStore<S>) {
        params.insert(format!("{}.gamma", self.name), Tensor::full(vec![self.channels], S::one()));
        params.insert(format!("{}.beta", self.name), Tensor::zeros(vec![self.channels]));
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let gn = format!("{}.gamma", self.name);
        let bn = format!("{}.beta", self.name);
        let gamma = tape.param(&gn, params.get(&gn)?);
        let beta = tape.param(&bn, params.get(&bn)?);
        tape.group_norm(x, gamma, beta, self.groups)
    }
}
