//! Parameter containers shared by the networks, and the plumbing that puts
//! them on a tape in a fixed order.
//!
//! Every parameter struct lists its tensors in a fixed order (`tensors`,
//! `tensors_mut`). Recording walks the same order and the `*Vars` views are
//! bound from the resulting iterator, so gradients line up with tensors by
//! position.

use crate::error::Result;
use crate::init::{self, CrcRng};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered access to trainable tensors.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Records every tensor of `params`, as gradient-requiring leaves when
/// `trainable`, and returns the vars in order.
pub fn record<P: Params + ?Sized>(tape: &mut Tape, params: &P, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .into_iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Fully connected layer on `[1, in]` rows: `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut CrcRng) -> Self {
        Self {
            weight: init::he_uniform(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros([1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn bind(it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            weight: it.next().expect("linear weight"),
            bias: it.next().expect("linear bias"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = tape.matmul(x, self.weight)?;
        tape.add(z, self.bias)
    }
}

/// Square convolution with zero padding `K/2` on `[H, W, C]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv {
    pub fn new(kernel: usize, inputs: usize, outputs: usize, stride: usize, rng: &mut CrcRng) -> Self {
        Self {
            weight: init::he_uniform(&[kernel, kernel, inputs, outputs], kernel * kernel * inputs, rng),
            bias: Tensor::zeros([1, outputs]),
            stride,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[3]
    }
}

impl Params for Conv {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl ConvVars {
    pub fn bind(conv: &Conv, it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            weight: it.next().expect("conv weight"),
            bias: it.next().expect("conv bias"),
            stride: conv.stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, self.stride)
    }
}
