use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Shape of one example's activation (the batch axis is implicit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueShape {
    Seq { channels: usize, length: usize },
    Flat { features: usize },
}

impl ValueShape {
    pub fn numel(&self) -> usize {
        match *self {
            ValueShape::Seq { channels, length } => channels * length,
            ValueShape::Flat { features } => features,
        }
    }

    pub fn length(&self) -> Option<usize> {
        match *self {
            ValueShape::Seq { length, .. } => Some(length),
            ValueShape::Flat { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Batchnorm1d,
    Relu,
    AddResidual,
    GlobalAvgPool,
    Dense,
    Softmax,
}

impl LayerKind {
    /// Layers that carry trained weights (what "18 layers" counts).
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Conv1d | LayerKind::Dense)
    }
}

/// Serializable description of a node: kind, wiring and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Value ids feeding this node; 0 is the network input, node `i` produces value `i + 1`.
    pub inputs: Vec<usize>,
    pub in_shape: ValueShape,
    pub out_shape: ValueShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels, kernel]`
    pub weight: Tensor<T>,
    /// `[out_channels]`
    pub bias: Tensor<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn out_length(&self, in_length: usize) -> Option<usize> {
        let padded = in_length + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::from_vec(vec![T::one(); channels]),
            beta: Tensor::from_vec(vec![T::zero(); channels]),
            running_mean: Tensor::from_vec(vec![T::zero(); channels]),
            running_var: Tensor::from_vec(vec![T::one(); channels]),
        }
    }

    /// Per-channel `(scale, shift)` of the inference-time affine map.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let g = self.gamma.data()[c].as_f64();
            let b = self.beta.data()[c].as_f64();
            let m = self.running_mean.data()[c].as_f64();
            let v = self.running_var.data()[c].as_f64();
            let s = g / (v + self.eps).sqrt();
            scale.push(T::from_f64_lossy(s));
            shift.push(T::from_f64_lossy(b - m * s));
        }
        (scale, shift)
    }
}

/// Parameter-free residual projection: temporal subsampling by `stride`
/// and zero-padding of the extra output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortcut {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv1d(Conv1d<T>),
    BatchNorm1d(BatchNorm1d<T>),
    Relu,
    /// Inputs `[main, skip]`; output is `main + shortcut(skip)`.
    AddResidual(Shortcut),
    GlobalAvgPool,
    Dense(Dense<T>),
    Softmax,
}

impl<T> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv1d(_) => LayerKind::Conv1d,
            Layer::BatchNorm1d(_) => LayerKind::Batchnorm1d,
            Layer::Relu => LayerKind::Relu,
            Layer::AddResidual(_) => LayerKind::AddResidual,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Layer::AddResidual(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<usize>,
}

impl<T> Node<T> {
    pub fn new(name: impl Into<String>, layer: Layer<T>, inputs: Vec<usize>) -> Self {
        Node {
            name: name.into(),
            layer,
            inputs,
        }
    }
}
