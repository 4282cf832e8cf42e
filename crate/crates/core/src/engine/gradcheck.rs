use crate::engine::layer::Layer;
use crate::engine::network::{BackwardRule, Mode, Network, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fixed projection of the logits that turns the network into a scalar:
/// `u_j = (-1)^j / (j + 1)`.
pub fn check_projection(num_outputs: usize) -> Vec<f64> {
    (0..num_outputs)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 } / (j as f64 + 1.0))
        .collect()
}

fn relu_pattern<T: Real>(net: &Network<T>, tape: &Tape<T>) -> Vec<bool> {
    let mut out = Vec::new();
    for (idx, node) in net.nodes().iter().enumerate() {
        if matches!(node.layer, Layer::Relu) {
            out.extend(tape.node_input(net, idx).iter().map(|v| *v > T::zero()));
        }
    }
    out
}

fn projected(logits: &Tensor<f64>, u: &[f64]) -> f64 {
    logits.data().iter().zip(u).map(|(z, w)| z * w).sum()
}

/// Compares reverse-mode input gradients with central differences and
/// returns `max_i |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Both sides run in double precision on an inference-mode copy of `net`.
/// A coordinate's step is halved until the stencil `x ± h` leaves every ReLU
/// on the same side of its kink as `x`, so the difference quotient never
/// straddles a non-differentiable point.
pub fn grad_check(net: &Network<f32>, x: &Tensor<f32>, epsilon: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(net, x, epsilon, &coords)
}

/// [`grad_check`] restricted to the input coordinates in `coords`.
pub fn grad_check_at(net: &Network<f32>, x: &Tensor<f32>, epsilon: f64, coords: &[usize]) -> Result<f64> {
    let checker = Checker::new(net, x, epsilon)?;
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Input(format!("coordinate {i} outside input of {} values", x.numel())));
        }
        let mut dir = vec![0.0; x.numel()];
        dir[i] = 1.0;
        let numeric = checker
            .difference(&dir)?
            .ok_or_else(|| Error::Input(format!("coordinate {i} sits on a ReLU kink")))?;
        worst = worst.max(rel_err(checker.analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Directional version: compares `grad . v` with the central difference of the
/// projected logits along `v`, which exercises every input coordinate at once.
pub fn directional_check(net: &Network<f32>, x: &Tensor<f32>, v: &[f64], epsilon: f64) -> Result<f64> {
    if v.len() != x.numel() {
        return Err(Error::Input(format!("direction has {} values, input has {}", v.len(), x.numel())));
    }
    let checker = Checker::new(net, x, epsilon)?;
    let analytic: f64 = checker.analytic.data().iter().zip(v).map(|(g, d)| g * d).sum();
    let numeric = checker.difference(v)?.ok_or_else(|| Error::Input("direction crosses a ReLU kink at every step".into()))?;
    Ok(rel_err(analytic, numeric))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

struct Checker {
    net: Network<f64>,
    x: Tensor<f64>,
    u: Vec<f64>,
    analytic: Tensor<f64>,
    pattern: Vec<bool>,
    epsilon: f64,
}

impl Checker {
    fn new(net: &Network<f32>, x: &Tensor<f32>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
        }
        let net: Network<f64> = net.cast();
        let x: Tensor<f64> = x.cast();
        let u = check_projection(net.num_outputs());
        let (logits, tape) = net.forward(&x, Mode::Eval, true)?;
        let d = Tensor::new(logits.shape().to_vec(), u.clone())?;
        let analytic = net.backward(&tape, &d, BackwardRule::Standard, false)?.input();
        let pattern = relu_pattern(&net, &tape);
        Ok(Checker { net, x, u, analytic, pattern, epsilon })
    }

    /// Central difference along `dir`, or `None` if no step keeps the ReLU pattern.
    fn difference(&self, dir: &[f64]) -> Result<Option<f64>> {
        let mut h = self.epsilon;
        let mut probe = self.x.clone();
        for _ in 0..40 {
            let mut side = |sign: f64| -> Result<(f64, bool)> {
                for ((p, &x0), &d) in probe.data_mut().iter_mut().zip(self.x.data()).zip(dir) {
                    *p = x0 + sign * h * d;
                }
                let (l, t) = self.net.forward(&probe, Mode::Eval, true)?;
                Ok((projected(&l, &self.u), relu_pattern(&self.net, &t) == self.pattern))
            };
            let (fp, okp) = side(1.0)?;
            let (fm, okm) = side(-1.0)?;
            if okp && okm {
                return Ok(Some((fp - fm) / (2.0 * h)));
            }
            h *= 0.5;
        }
        Ok(None)
    }
}
