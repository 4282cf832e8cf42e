use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax};
use crate::engine::kernels::softmax;
use crate::engine::{BackwardRule, Mode, Network};
use crate::error::{Error, Result};
use crate::synth::{BeatClass, Dataset, Example};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 128,
            weight_decay: 1e-7,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is accepted: it freezes the parameters, which is useful for checks.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam coefficients must lie in [0, 1) with a positive epsilon".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse_kv(text: &str, mut base: TrainConfig) -> Result<TrainConfig> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            base.set(key, value)?;
        }
        Ok(base)
    }

    pub fn from_kv_file(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_kv(&text, base)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, net: &mut Network, grads: &[Vec<f32>], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in net.parameters_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let grad = gi as f64 + cfg.weight_decay * *w as f64;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * grad;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * grad * grad;
                let delta = cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                *w -= delta as f32;
            }
        }
    }
}

fn batch_tensor(examples: &[&Example], length: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(examples.len() * length);
    for e in examples {
        data.extend_from_slice(&e.signal);
    }
    Tensor::new(vec![examples.len(), 1, length], data).expect("batch shape")
}

/// Mini-batch Adam on cross-entropy. Shuffling depends only on `cfg.seed`;
/// the network's own initialisation is left to [`super::build_network`].
pub fn train(mut net: Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    let counts = Dataset::class_counts(&dataset.train);
    if let Some(missing) = BeatClass::ALL.iter().find(|c| counts[c.index()] == 0) {
        return Err(Error::Input(format!("training split has no {missing} examples")));
    }
    let length = net.input_shape().numel();
    if let Some(bad) = dataset.train.iter().chain(&dataset.test).find(|e| e.signal.len() != length) {
        return Err(Error::Input(format!("example {} has {} samples, network expects {length}", bad.id, bad.signal.len())));
    }
    let num_classes = net.num_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let b = batch.len();
            let x = batch_tensor(&batch, length);
            let (logits, tape) = net.forward(&x, Mode::Train, true)?;
            let mut d_logits = vec![0.0f32; b * num_classes];
            let mut batch_loss = 0.0;
            for (j, e) in batch.iter().enumerate() {
                let z: Vec<f64> = logits.data()[j * num_classes..(j + 1) * num_classes].iter().map(|&v| v as f64).collect();
                let p = softmax(&z);
                let y = e.label.index();
                batch_loss -= p[y].max(f64::MIN_POSITIVE).ln();
                if argmax(&p) == y {
                    hits += 1;
                }
                for c in 0..num_classes {
                    let target = if c == y { 1.0 } else { 0.0 };
                    d_logits[j * num_classes + c] = ((p[c] - target) / b as f64) as f32;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            loss_sum += batch_loss;
            let d = Tensor::new(vec![b, num_classes], d_logits).expect("d_logits shape");
            let grads = net.backward(&tape, &d, BackwardRule::Standard, true)?;
            let params = grads.params().expect("parameter gradients requested");
            adam.update(&mut net, params, cfg);
            net.update_running_stats(&tape);
        }
        let n = dataset.train.len() as f64;
        let train_loss = loss_sum / n;
        if !train_loss.is_finite() || net.parameters().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        let test_accuracy = accuracy(&net, &dataset.test)?;
        history.epochs.push(EpochRecord { epoch, train_loss, train_accuracy: hits as f64 / n, test_accuracy });
    }
    Ok((net, history))
}
