use crate::engine::{BackwardRule, Layer, Mode, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn one_hot(batch: usize, classes: usize, target: usize, scale: &[f32]) -> Tensor<f32> {
    let mut d = vec![0.0f32; batch * classes];
    for b in 0..batch {
        d[b * classes + target] = scale[b];
    }
    let shape = if batch == 1 { vec![classes] } else { vec![batch, classes] };
    Tensor::new(shape, d).expect("one-hot shape")
}

fn check_len(net: &Network, x: &[f32], what: &str) -> Result<()> {
    let len = net.input_shape().numel();
    if x.len() != len {
        return Err(Error::Input(format!("{what} has {} samples, network expects {len}", x.len())));
    }
    Ok(())
}

/// `d y_c / d x` under `rule`, for one example.
fn input_gradient(net: &Network, x: &[f32], target: usize, rule: BackwardRule<'_, f32>) -> Result<Vec<f32>> {
    check_len(net, x, "signal")?;
    let (_, tape) = net.forward(&Tensor::from_vec(x.to_vec()), Mode::Eval, true)?;
    let d = one_hot(1, net.num_outputs(), target, &[1.0]);
    Ok(net.backward(&tape, &d, rule, false)?.input().into_data())
}

/// Signed gradient of the target logit.
pub fn saliency(net: &Network, x: &[f32], target: usize) -> Result<Vec<f32>> {
    input_gradient(net, x, target, BackwardRule::Standard)
}

pub fn input_x_gradient(net: &Network, x: &[f32], target: usize) -> Result<Vec<f32>> {
    let g = saliency(net, x, target)?;
    Ok(g.iter().zip(x).map(|(g, x)| g * x).collect())
}

pub fn guided_backprop(net: &Network, x: &[f32], target: usize) -> Result<Vec<f32>> {
    input_gradient(net, x, target, BackwardRule::GuidedRelu)
}

/// Midpoint Riemann sum of the gradient along the straight path from `baseline` to `x`.
pub fn integrated_gradients(net: &Network, x: &[f32], baseline: &[f32], steps: usize, target: usize) -> Result<Vec<f32>> {
    check_len(net, x, "signal")?;
    check_len(net, baseline, "baseline")?;
    if steps == 0 {
        return Err(Error::Input("integrated gradients needs at least one step".into()));
    }
    const CHUNK: usize = 16;
    let len = x.len();
    let mut total = vec![0.0f64; len];
    let alphas: Vec<f64> = (1..=steps).map(|k| (k as f64 - 0.5) / steps as f64).collect();
    for chunk in alphas.chunks(CHUNK) {
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * len);
        for &a in chunk {
            data.extend(x.iter().zip(baseline).map(|(&xi, &bi)| (bi as f64 + a * (xi as f64 - bi as f64)) as f32));
        }
        let input = Tensor::new(vec![b, 1, len], data).expect("path batch");
        let (_, tape) = net.forward(&input, Mode::Eval, true)?;
        let d = one_hot(b, net.num_outputs(), target, &vec![1.0; b]);
        let g = net.backward(&tape, &d, BackwardRule::Standard, false)?.input().into_data();
        for row in g.chunks(len) {
            for (t, &v) in total.iter_mut().zip(row) {
                *t += v as f64;
            }
        }
    }
    Ok(total
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(&g, (&xi, &bi))| ((xi as f64 - bi as f64) * g / steps as f64) as f32)
        .collect())
}

/// Rescale-rule multipliers against `baseline`, times `x - baseline`.
pub fn deeplift_rescale(net: &Network, x: &[f32], baseline: &[f32], target: usize) -> Result<Vec<f32>> {
    check_len(net, x, "signal")?;
    check_len(net, baseline, "baseline")?;
    let (_, tape) = net.forward(&Tensor::from_vec(x.to_vec()), Mode::Eval, true)?;
    let (_, reference) = net.forward(&Tensor::from_vec(baseline.to_vec()), Mode::Eval, true)?;
    let d = one_hot(1, net.num_outputs(), target, &[1.0]);
    let m = net.backward(&tape, &d, BackwardRule::DeepLiftRescale { reference: &reference }, false)?.input().into_data();
    Ok(m.iter().zip(x.iter().zip(baseline)).map(|(&m, (&xi, &bi))| m * (xi - bi)).collect())
}

/// Mean of DeepLIFT maps over `backgrounds`, accumulated in 64-bit in the given order.
pub fn deepshap(net: &Network, x: &[f32], backgrounds: &[&[f32]], target: usize) -> Result<Vec<f32>> {
    if backgrounds.is_empty() {
        return Err(Error::Input("DeepSHAP needs at least one background".into()));
    }
    let mut acc = vec![0.0f64; x.len()];
    for bg in backgrounds {
        let m = deeplift_rescale(net, x, bg, target)?;
        for (a, v) in acc.iter_mut().zip(&m) {
            *a += *v as f64;
        }
    }
    let n = backgrounds.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Epsilon-rule relevance, seeded with the target logit.
pub fn lrp_epsilon(net: &Network, x: &[f32], target: usize, epsilon: f64) -> Result<Vec<f32>> {
    check_len(net, x, "signal")?;
    let (logits, tape) = net.forward(&Tensor::from_vec(x.to_vec()), Mode::Eval, true)?;
    let y = logits.data()[target];
    let d = one_hot(1, net.num_outputs(), target, &[y]);
    Ok(net.backward(&tape, &d, BackwardRule::LrpEpsilon { epsilon }, false)?.input().into_data())
}

/// Linear interpolation with aligned corners: position `p` of the source lands
/// on `p * (out_len - 1) / (src_len - 1)`.
pub fn interpolate_align_corners(src: &[f64], out_len: usize) -> Vec<f64> {
    match (src.len(), out_len) {
        (_, 0) => Vec::new(),
        (0, n) => vec![0.0; n],
        (1, n) => vec![src[0]; n],
        (_, 1) => vec![src[0]],
        (m, n) => (0..n)
            .map(|i| {
                let pos = i as f64 * (m - 1) as f64 / (n - 1) as f64;
                let lo = (pos.floor() as usize).min(m - 2);
                let frac = pos - lo as f64;
                src[lo] * (1.0 - frac) + src[lo + 1] * frac
            })
            .collect(),
    }
}

fn gradcam_node(net: &Network, layer: Option<&str>) -> Result<usize> {
    match layer {
        Some(name) => net.find_node(name).ok_or_else(|| Error::Config(format!("no layer named `{name}` for Grad-CAM"))),
        None => net.last_conv().ok_or_else(|| Error::Config("network has no convolution for Grad-CAM".into())),
    }
}

/// Class activation map of the target layer, upsampled to the input length.
pub fn grad_cam(net: &Network, x: &[f32], target: usize, layer: Option<&str>) -> Result<Vec<f32>> {
    check_len(net, x, "signal")?;
    let node = gradcam_node(net, layer)?;
    if matches!(net.nodes()[node].layer, Layer::Softmax) {
        return Err(Error::Config("Grad-CAM target must precede the softmax".into()));
    }
    let value = node + 1;
    let Some(len) = net.value_shape(value).length() else {
        return Err(Error::Config(format!("Grad-CAM layer `{}` has no time axis", net.nodes()[node].name)));
    };
    let channels = net.value_shape(value).numel() / len;
    let (_, tape) = net.forward(&Tensor::from_vec(x.to_vec()), Mode::Eval, true)?;
    let d = one_hot(1, net.num_outputs(), target, &[1.0]);
    let grads = net.backward(&tape, &d, BackwardRule::Standard, false)?;
    let act = tape.activation(value);
    let zeros = vec![0.0f32; act.len()];
    let g = grads.value(value).unwrap_or(&zeros);
    let mut cam = vec![0.0f64; len];
    for k in 0..channels {
        let row = &g[k * len..(k + 1) * len];
        let alpha = row.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        for (c, &a) in cam.iter_mut().zip(&act[k * len..(k + 1) * len]) {
            *c += alpha * a as f64;
        }
    }
    for c in cam.iter_mut() {
        *c = c.max(0.0);
    }
    Ok(interpolate_align_corners(&cam, x.len()).into_iter().map(|v| v as f32).collect())
}

pub fn guided_grad_cam(net: &Network, x: &[f32], target: usize, layer: Option<&str>) -> Result<Vec<f32>> {
    let guided = guided_backprop(net, x, target)?;
    let cam = grad_cam(net, x, target, layer)?;
    Ok(guided.iter().zip(&cam).map(|(g, c)| g * c).collect())
}
