//! The 1D residual beat classifier: construction, prediction and selection
//! of evaluation examples. Training lives in [`train`].
//!
//! Every signal handed to functions in this module is expected in model
//! space, i.e. already passed through [`standardize`].

mod train;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{BatchNorm1d, Conv1d, Dense, Layer, Network, Node, Shortcut, ValueShape};
use crate::error::{Error, Result};
use crate::synth::{class_names, BeatClass, Example};
use crate::tensor::Tensor;

pub use train::{train, EpochRecord, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_blocks: usize,
    /// Residual blocks per stage; channels double and time halves between stages.
    pub blocks_per_stage: usize,
    pub base_channels: usize,
    pub kernel_length: usize,
    pub num_classes: usize,
    pub input_length: usize,
    pub stem_stride: usize,
}

impl NetworkConfig {
    /// Stem conv, 8 two-conv residual blocks in 4 stages, dense head: 18 weighted layers.
    pub fn paper() -> Self {
        NetworkConfig {
            num_blocks: 8,
            blocks_per_stage: 2,
            base_channels: 64,
            kernel_length: 7,
            num_classes: 3,
            input_length: 2049,
            stem_stride: 2,
        }
    }

    /// Stem conv, 3 residual blocks in 3 stages, dense head: 8 weighted layers.
    pub fn desk() -> Self {
        NetworkConfig {
            num_blocks: 3,
            blocks_per_stage: 1,
            base_channels: 8,
            kernel_length: 7,
            num_classes: 3,
            input_length: 2049,
            stem_stride: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown network preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_length % 2 == 0 {
            return Err(Error::Config(format!("kernel length {} must be odd", self.kernel_length)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.num_blocks == 0 || self.blocks_per_stage == 0 || self.base_channels == 0 || self.stem_stride == 0 {
            return Err(Error::Config("block counts, channels and stride must be positive".into()));
        }
        if self.input_length == 0 {
            return Err(Error::Config("input length must be positive".into()));
        }
        Ok(())
    }

    pub fn weighted_layers(&self) -> usize {
        2 * self.num_blocks + 2
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Layer<f32> {
    Layer::Conv1d(Conv1d {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: k / 2,
        weight: Tensor::new(vec![cout, cin, k], he_uniform(rng, cout * cin * k, cin * k)).expect("conv shape"),
        bias: Tensor::zeros(vec![cout]),
    })
}

/// Deterministic fan-in-scaled uniform initialisation from `seed`.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel_length;
    let mut nodes: Vec<Node<f32>> = Vec::new();
    let push = |nodes: &mut Vec<Node<f32>>, name: String, layer: Layer<f32>, inputs: Vec<usize>| -> usize {
        nodes.push(Node::new(name, layer, inputs));
        nodes.len()
    };

    let mut channels = cfg.base_channels;
    let v = push(&mut nodes, "stem.conv".into(), conv(&mut rng, 1, channels, k, cfg.stem_stride), vec![0]);
    let v = push(&mut nodes, "stem.bn".into(), Layer::BatchNorm1d(BatchNorm1d::new(channels)), vec![v]);
    let mut cur = push(&mut nodes, "stem.relu".into(), Layer::Relu, vec![v]);

    for b in 0..cfg.num_blocks {
        let stage = b / cfg.blocks_per_stage;
        let out_ch = cfg.base_channels << stage;
        let stride = if stage > 0 && b % cfg.blocks_per_stage == 0 { 2 } else { 1 };
        let name = |s: &str| format!("block{}.{s}", b + 1);
        let skip = cur;
        let v = push(&mut nodes, name("conv1"), conv(&mut rng, channels, out_ch, k, stride), vec![cur]);
        let v = push(&mut nodes, name("bn1"), Layer::BatchNorm1d(BatchNorm1d::new(out_ch)), vec![v]);
        let v = push(&mut nodes, name("relu1"), Layer::Relu, vec![v]);
        let v = push(&mut nodes, name("conv2"), conv(&mut rng, out_ch, out_ch, k, 1), vec![v]);
        let v = push(&mut nodes, name("bn2"), Layer::BatchNorm1d(BatchNorm1d::new(out_ch)), vec![v]);
        let shortcut = Shortcut { stride, in_channels: channels, out_channels: out_ch };
        let v = push(&mut nodes, name("add"), Layer::AddResidual(shortcut), vec![v, skip]);
        cur = push(&mut nodes, name("relu2"), Layer::Relu, vec![v]);
        channels = out_ch;
    }

    let v = push(&mut nodes, "pool".into(), Layer::GlobalAvgPool, vec![cur]);
    let bound = 1.0 / (channels as f64).sqrt();
    let weight: Vec<f32> = (0..cfg.num_classes * channels).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    let dense = Dense {
        in_features: channels,
        out_features: cfg.num_classes,
        weight: Tensor::new(vec![cfg.num_classes, channels], weight).expect("dense shape"),
        bias: Tensor::zeros(vec![cfg.num_classes]),
    };
    let v = push(&mut nodes, "head".into(), Layer::Dense(dense), vec![v]);
    push(&mut nodes, "softmax".into(), Layer::Softmax, vec![v]);

    let names = if cfg.num_classes == 3 {
        class_names()
    } else {
        (0..cfg.num_classes).map(|i| format!("class{i}")).collect()
    };
    Network::new(ValueShape::Seq { channels: 1, length: cfg.input_length }, nodes, names)
}

/// Zero mean, unit population standard deviation; constant input maps to zeros.
pub fn standardize(signal: &[f32]) -> Result<Vec<f32>> {
    if signal.is_empty() {
        return Err(Error::Input("cannot standardize an empty signal".into()));
    }
    let n = signal.len() as f64;
    let mean = signal.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = signal.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Ok(vec![0.0; signal.len()]);
    }
    Ok(signal.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

/// Copy of `examples` with every signal standardized.
pub fn standardize_examples(examples: &[Example]) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|e| Ok(Example { signal: standardize(&e.signal)?, ..e.clone() }))
        .collect()
}

pub fn predict(net: &Network, signal: &[f32]) -> Result<Vec<f64>> {
    if signal.len() != net.input_shape().numel() {
        return Err(Error::Input(format!(
            "signal has {} samples, network expects {}",
            signal.len(),
            net.input_shape().numel()
        )));
    }
    net.probabilities(signal)
}

/// Probabilities for many signals, evaluated in parallel and returned in input order.
pub fn predict_many(net: &Network, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.par_iter().map(|e| predict(net, &e.signal)).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Keeps abnormal examples predicted as their true class with probability strictly above `threshold`.
pub fn select_eval_examples<'a>(net: &Network, examples: &'a [Example], threshold: f64) -> Result<Vec<&'a Example>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let probs = predict_many(net, examples)?;
    Ok(examples
        .iter()
        .zip(probs)
        .filter(|(e, p)| is_selected(e.label, p, threshold))
        .map(|(e, _)| e)
        .collect())
}

/// Selection rule for one prediction.
pub fn is_selected(label: BeatClass, probs: &[f64], threshold: f64) -> bool {
    label.is_abnormal() && argmax(probs) == label.index() && probs[label.index()] > threshold
}

/// Fraction of examples whose argmax matches the label.
pub fn accuracy(net: &Network, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_many(net, examples)?;
    let hits = examples.iter().zip(&probs).filter(|(e, p)| argmax(p) == e.label.index()).count();
    Ok(hits as f64 / examples.len() as f64)
}
