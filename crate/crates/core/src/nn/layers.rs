use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{join, Mode, Module, TensorRole};
use crate::error::Result;
use crate::tensor::{
    batch_norm, conv2d, relu, sigmoid, BatchNormStats, Conv2dGeometry, Float, Tensor,
};

/// Seeded parameter initializer.
///
/// Convolution weights are zero-mean Gaussian with std `sqrt(2 / fan_in)`;
/// biases start at zero, BN at gamma = 1, beta = 0.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn conv_weight<T: Float>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..cout * cin * k * k)
            .map(|_| T::lit(normal.sample(&mut self.rng)))
            .collect();
        Tensor::leaf([cout, cin, k, k], data).expect("consistent weight shape")
    }
}

#[derive(Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: Conv2dGeometry,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            weight: init.conv_weight(cout, cin, kernel),
            bias: bias.then(|| Tensor::leaf([1, cout, 1, 1], vec![T::zero(); cout]).expect("bias")),
            geometry: Conv2dGeometry::new(stride, padding),
        }
    }

    /// `k×k` convolution with "same" padding for odd `k`.
    pub fn same(init: &mut ParamInit, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::new(init, cin, cout, k, 1, k / 2, bias)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().b
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.geometry)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm2d<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let c = channels;
        BatchNorm2d {
            gamma: Tensor::leaf([1, c, 1, 1], vec![T::one(); c]).expect("gamma"),
            beta: Tensor::leaf([1, c, 1, 1], vec![T::zero(); c]).expect("beta"),
            running_mean: Tensor::zeros([1, c, 1, 1]),
            running_var: Tensor::full([1, c, 1, 1], T::one()),
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            BatchNormStats {
                running_mean: &self.running_mean,
                running_var: &self.running_var,
                momentum: self.momentum,
                eps: self.eps,
            },
            mode.is_train(),
        )
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "gamma"), &self.gamma, TensorRole::Param);
        f(&join(prefix, "beta"), &self.beta, TensorRole::Param);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            TensorRole::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            TensorRole::Buffer,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Debug)]
pub struct ConvBnRelu<T: Float> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub activation: Activation,
}

impl<T: Float> ConvBnRelu<T> {
    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(init, cin, cout, kernel, stride, padding, false),
            bn: BatchNorm2d::new(cout),
            activation,
        }
    }

    /// Stride-1 "same" unit with ReLU.
    pub fn same(init: &mut ParamInit, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::new(init, cin, cout, kernel, 1, kernel / 2, Activation::Relu)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(match self.activation {
            Activation::Relu => relu(&y),
            Activation::None => y,
        })
    }
}

impl<T: Float> Module<T> for ConvBnRelu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// 3×3 convolution to one channel followed by a sigmoid.
#[derive(Debug)]
pub struct PredictionHead<T: Float> {
    pub conv: Conv2d<T>,
}

impl<T: Float> PredictionHead<T> {
    pub fn new(init: &mut ParamInit, cin: usize) -> Self {
        PredictionHead {
            conv: Conv2d::same(init, cin, 1, 3, true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(sigmoid(&self.conv.forward(x)?))
    }
}

impl<T: Float> Module<T> for PredictionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
}
