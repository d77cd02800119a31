//! Layers and the fusion/attention blocks of the decoder.
//!
//! Modules own their parameters as tracked leaf tensors. Forward passes take
//! `&self` plus a [`Mode`]; batch-norm running statistics are updated through
//! interior mutability, so a model is single-writer during training.

mod blocks;
mod layers;

pub use blocks::{Brm, BrmParts, Cam, CamParts, Ffm, Sam, Sap, SapConfig};
pub use layers::{Activation, BatchNorm2d, Conv2d, ConvBnRelu, ParamInit, PredictionHead};

use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Learnable parameters versus persistent buffers (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Enumerates named tensors in a fixed, canonical order.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Every named tensor (parameters and buffers) in canonical order.
pub fn named_tensors<T: Float>(m: &dyn Module<T>) -> Vec<(String, Tensor<T>, TensorRole)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t, role| {
        out.push((name.to_string(), t.clone(), role))
    });
    out
}

pub fn named_parameters<T: Float>(m: &dyn Module<T>) -> Vec<(String, Tensor<T>)> {
    named_tensors(m)
        .into_iter()
        .filter(|(_, _, r)| *r == TensorRole::Param)
        .map(|(n, t, _)| (n, t))
        .collect()
}

/// Number of learnable scalars; running statistics are excluded.
pub fn count_parameters<T: Float>(m: &dyn Module<T>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t, role| {
        if role == TensorRole::Param {
            n += t.numel();
        }
    });
    n
}

pub fn zero_grad<T: Float>(m: &dyn Module<T>) {
    m.visit("", &mut |_, t, _| t.zero_grad());
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
}
