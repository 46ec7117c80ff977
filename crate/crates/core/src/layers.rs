//! Parameterized convolution and fully connected layers.

use crate::error::Result;
use crate::init::Initializer;
use crate::params::{join, Parameterized};
use crate::tensor::Tensor;

/// A 2-D convolution with bias and fixed geometry.
#[derive(Debug, Clone)]
pub struct Conv {
    /// `C_out × C_in × kh × kw`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv {
    /// Square kernel with fan-in scaled normal weights and zero bias.
    pub fn init(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        gain: f64,
    ) -> Result<Self> {
        Ok(Conv {
            weight: init.fan_in(&[cout, cin, kernel, kernel], cin * kernel * kernel, gain)?,
            bias: init.zeros(&[cout])?,
            stride,
            pad,
            dilation,
        })
    }

    /// Shape-preserving `k×k` convolution (`pad = dilation·(k-1)/2`).
    pub fn same(init: &mut Initializer, cin: usize, cout: usize, kernel: usize, dilation: usize, gain: f64) -> Result<Self> {
        Self::init(init, cin, cout, kernel, 1, dilation * (kernel - 1) / 2, dilation, gain)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad, self.dilation)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameterized for Conv {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `y = x Wᵀ + b` over the last axis; `W` is `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(init: &mut Initializer, fan_in: usize, fan_out: usize, gain: f64) -> Result<Self> {
        Ok(Linear {
            weight: init.fan_in(&[fan_out, fan_in], fan_in, gain)?,
            bias: init.zeros(&[fan_out])?,
        })
    }

    /// `x` is `rows × in`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.weight)?.add_bias(&self.bias)
    }
}

impl Parameterized for Linear {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
