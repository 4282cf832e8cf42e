//! Attribution methods: per-sample relevance for one target class.
//!
//! All methods explain the pre-softmax logit of the target class and
//! expect an inference-mode network (batchnorm folded, see
//! [`Network::fold_batchnorm`]) and a standardized signal.

mod dump;
mod gradient;
mod surrogate;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Network;
use crate::error::{Error, Result};
use crate::model::{argmax, predict};

pub use dump::{read_dump, write_dump, AttributionDump, DumpRecord, DUMP_INDEX, DUMP_VALUES};
pub use gradient::{
    deeplift_rescale, deepshap, grad_cam, guided_backprop, guided_grad_cam, input_x_gradient, integrated_gradients,
    interpolate_align_corners, lrp_epsilon, saliency,
};
pub use surrogate::{kernelshap_1d, lime_1d, segment_signal, BlackBox, FnModel, NetworkLogit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    Random,
    Saliency,
    InputXGradient,
    GuidedBackprop,
    IntegratedGradients,
    #[serde(rename = "DeepLIFT")]
    DeepLift,
    #[serde(rename = "DeepSHAP")]
    DeepShap,
    #[serde(rename = "LRP")]
    Lrp,
    #[serde(rename = "LIME")]
    Lime,
    #[serde(rename = "KernelSHAP")]
    KernelShap,
    GradCam,
    GuidedGradCam,
}

impl MethodId {
    pub const ALL: [MethodId; 12] = [
        MethodId::Random,
        MethodId::Saliency,
        MethodId::InputXGradient,
        MethodId::GuidedBackprop,
        MethodId::IntegratedGradients,
        MethodId::DeepLift,
        MethodId::DeepShap,
        MethodId::Lrp,
        MethodId::Lime,
        MethodId::KernelShap,
        MethodId::GradCam,
        MethodId::GuidedGradCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Random => "Random",
            MethodId::Saliency => "Saliency",
            MethodId::InputXGradient => "InputXGradient",
            MethodId::GuidedBackprop => "GuidedBackprop",
            MethodId::IntegratedGradients => "IntegratedGradients",
            MethodId::DeepLift => "DeepLIFT",
            MethodId::DeepShap => "DeepSHAP",
            MethodId::Lrp => "LRP",
            MethodId::Lime => "LIME",
            MethodId::KernelShap => "KernelSHAP",
            MethodId::GradCam => "GradCAM",
            MethodId::GuidedGradCam => "GuidedGradCAM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, MethodId::Random | MethodId::Lime | MethodId::KernelShap | MethodId::DeepShap)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        MethodId::ALL
            .iter()
            .copied()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Usage(format!("unknown attribution method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignMode {
    Raw,
    Absolute,
}

impl SignMode {
    pub const ALL: [SignMode; 2] = [SignMode::Raw, SignMode::Absolute];

    pub fn name(self) -> &'static str {
        match self {
            SignMode::Raw => "raw",
            SignMode::Absolute => "abs",
        }
    }

    pub fn apply(self, values: &[f32]) -> Vec<f32> {
        match self {
            SignMode::Raw => values.to_vec(),
            SignMode::Absolute => values.iter().map(|v| v.abs()).collect(),
        }
    }
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(SignMode::Raw),
            "abs" | "absolute" => Ok(SignMode::Absolute),
            other => Err(Error::Usage(format!("unknown sign mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub values: Vec<f32>,
    pub method: MethodId,
    pub sign_mode: SignMode,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub ig_steps: usize,
    /// Reference input for Integrated Gradients and DeepLIFT; `None` is all zeros.
    pub baseline: Option<Vec<f32>>,
    pub deepshap_backgrounds: usize,
    pub lrp_epsilon: f64,
    pub segments: usize,
    pub samples: usize,
    /// Ridge strength of the LIME surrogate.
    pub ridge: f64,
    /// Width of the LIME proximity kernel `exp(-d^2 / width^2)`.
    pub lime_kernel_width: f64,
    /// Node whose activation Grad-CAM uses; `None` is the last convolution.
    pub gradcam_layer: Option<String>,
    pub seed: u64,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            ig_steps: 64,
            baseline: None,
            deepshap_backgrounds: 8,
            lrp_epsilon: 1e-6,
            segments: 64,
            samples: 1000,
            ridge: 1.0,
            lime_kernel_width: 0.25,
            gradcam_layer: None,
            seed: 0,
        }
    }
}

impl MethodParams {
    pub fn validate(&self, length: usize) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be at least 1".into()));
        }
        if !(self.lrp_epsilon > 0.0) {
            return Err(Error::Config("lrp_epsilon must be positive".into()));
        }
        if self.segments == 0 || self.segments > length {
            return Err(Error::Config(format!("segments must lie in 1..={length}")));
        }
        if self.samples == 0 || self.deepshap_backgrounds == 0 {
            return Err(Error::Config("sample and background counts must be positive".into()));
        }
        if !(self.ridge >= 0.0) || !(self.lime_kernel_width > 0.0) {
            return Err(Error::Config("ridge must be non-negative and the kernel width positive".into()));
        }
        if let Some(b) = &self.baseline {
            if b.len() != length {
                return Err(Error::Input(format!("baseline has {} samples, expected {length}", b.len())));
            }
        }
        Ok(())
    }

    pub fn baseline_for(&self, length: usize) -> Vec<f32> {
        self.baseline.clone().unwrap_or_else(|| vec![0.0; length])
    }
}

/// RNG substream for one (method, example) pair.
pub fn method_rng(seed: u64, method: MethodId, example_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((example_id as u64) << 8) | method.index() as u64);
    rng
}

/// Picks `count` background indices out of `pool_len`, without replacement
/// while the pool is large enough.
pub fn draw_backgrounds(pool_len: usize, count: usize, seed: u64, example_id: usize) -> Vec<usize> {
    if pool_len == 0 {
        return Vec::new();
    }
    let mut rng = method_rng(seed, MethodId::DeepShap, example_id);
    if count <= pool_len {
        rand::seq::index::sample(&mut rng, pool_len, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..pool_len)).collect()
    }
}

/// Everything a method needs about the example being explained.
pub struct Subject<'a> {
    pub example_id: usize,
    pub signal: &'a [f32],
    pub target: usize,
    /// Candidate DeepSHAP references (standardized normal-class training signals).
    pub background_pool: &'a [Vec<f32>],
}

/// Signed values of `method` before any sign-mode processing.
pub fn attribute_raw(net: &Network, subject: &Subject<'_>, method: MethodId, params: &MethodParams) -> Result<Vec<f32>> {
    let x = subject.signal;
    let len = net.input_shape().numel();
    if x.len() != len {
        return Err(Error::Input(format!("signal has {} samples, network expects {len}", x.len())));
    }
    if subject.target >= net.num_outputs() {
        return Err(Error::Input(format!("target class {} out of range", subject.target)));
    }
    params.validate(len)?;
    let c = subject.target;
    match method {
        MethodId::Random => {
            let mut rng = method_rng(params.seed, method, subject.example_id);
            Ok((0..len).map(|_| rng.gen::<f32>()).collect())
        }
        MethodId::Saliency => saliency(net, x, c),
        MethodId::InputXGradient => input_x_gradient(net, x, c),
        MethodId::GuidedBackprop => guided_backprop(net, x, c),
        MethodId::IntegratedGradients => integrated_gradients(net, x, &params.baseline_for(len), params.ig_steps, c),
        MethodId::DeepLift => deeplift_rescale(net, x, &params.baseline_for(len), c),
        MethodId::DeepShap => {
            let picks = draw_backgrounds(subject.background_pool.len(), params.deepshap_backgrounds, params.seed, subject.example_id);
            if picks.is_empty() {
                return Err(Error::Input("DeepSHAP needs at least one background signal".into()));
            }
            let backgrounds: Vec<&[f32]> = picks.iter().map(|&i| subject.background_pool[i].as_slice()).collect();
            deepshap(net, x, &backgrounds, c)
        }
        MethodId::Lrp => lrp_epsilon(net, x, c, params.lrp_epsilon),
        MethodId::Lime => {
            let mut rng = method_rng(params.seed, method, subject.example_id);
            lime_1d(&NetworkLogit { net, target: c }, x, params, &mut rng)
        }
        MethodId::KernelShap => {
            let mut rng = method_rng(params.seed, method, subject.example_id);
            kernelshap_1d(&NetworkLogit { net, target: c }, x, params, &mut rng)
        }
        MethodId::GradCam => grad_cam(net, x, c, params.gradcam_layer.as_deref()),
        MethodId::GuidedGradCam => guided_grad_cam(net, x, c, params.gradcam_layer.as_deref()),
    }
}

/// Explains the predicted class of `signal` and applies `sign_mode` last.
pub fn attribute(
    net: &Network,
    example_id: usize,
    signal: &[f32],
    method: MethodId,
    params: &MethodParams,
    sign_mode: SignMode,
    background_pool: &[Vec<f32>],
) -> Result<AttributionMap> {
    let target = argmax(&predict(net, signal)?);
    let subject = Subject { example_id, signal, target, background_pool };
    let raw = attribute_raw(net, &subject, method, params)?;
    Ok(AttributionMap { values: sign_mode.apply(&raw), method, sign_mode, target_class: target })
}
