use std::ops::Range;

use crate::engine::kernels;
use crate::engine::layer::Layer;
use crate::engine::network::{conv_geom, seq_dims, Network};
use crate::error::{Error, Result};

/// Inference-mode evaluator that keeps every activation of one example and,
/// after a local edit of the input, recomputes only the positions inside the
/// receptive field of the edit. Results are bit-identical to
/// [`Network::forward`] because both share the same range kernels.
#[derive(Clone)]
pub struct IncrementalForward<'a> {
    net: &'a Network<f32>,
    values: Vec<Vec<f32>>,
    affine: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

type Dirty = Option<(usize, usize)>;

fn hull(a: Dirty, b: Dirty) -> Dirty {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
    }
}

impl<'a> IncrementalForward<'a> {
    pub fn new(net: &'a Network<f32>, x: &[f32]) -> Result<Self> {
        if x.len() != net.input_shape().numel() {
            return Err(Error::Input(format!(
                "input has {} samples, network expects {}",
                x.len(),
                net.input_shape().numel()
            )));
        }
        let affine = net
            .nodes()
            .iter()
            .map(|n| match &n.layer {
                Layer::BatchNorm1d(bn) => Some(bn.eval_affine()),
                _ => None,
            })
            .collect();
        let mut values = Vec::with_capacity(net.nodes().len() + 1);
        values.push(x.to_vec());
        for id in 1..=net.nodes().len() {
            values.push(vec![0.0f32; net.value_shape(id).numel()]);
        }
        let mut me = IncrementalForward { net, values, affine };
        let len = net.input_length();
        me.propagate(Some((0, len)));
        Ok(me)
    }

    /// Applies the edit of time positions `changed` (every channel; the rest
    /// of `x` must be unchanged since the previous call) and returns the new logits.
    pub fn update(&mut self, x: &[f32], changed: Range<usize>) -> &[f32] {
        let (a, b) = (changed.start, changed.end.min(x.len()));
        if a < b {
            let (channels, length) = seq_dims(self.net.input_shape());
            let b = b.min(length);
            for c in 0..channels {
                let r = c * length + a..c * length + b;
                self.values[0][r.clone()].copy_from_slice(&x[r]);
            }
            self.propagate(Some((a, b)));
        }
        self.logits()
    }

    pub fn logits(&self) -> &[f32] {
        &self.values[self.net.logits_id()]
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let z: Vec<f64> = self.logits().iter().map(|&v| v as f64).collect();
        kernels::softmax(&z)
    }

    fn propagate(&mut self, input_dirty: Dirty) {
        let net = self.net;
        let mut dirty: Vec<Dirty> = vec![None; self.values.len()];
        dirty[0] = input_dirty;
        for (idx, node) in net.nodes().iter().enumerate() {
            let in_id = node.inputs[0];
            let out_id = idx + 1;
            let in_shape = net.value_shape(in_id);
            let out_shape = net.value_shape(out_id);
            let (out_ch, out_len) = seq_dims(out_shape);
            let range = match &node.layer {
                Layer::Conv1d(c) => dirty[in_id].map(|(a, b)| conv_geom(c, in_shape, out_shape).affected_outputs(a, b)),
                Layer::BatchNorm1d(_) | Layer::Relu => dirty[in_id],
                Layer::AddResidual(sc) => {
                    let s = sc.stride;
                    let from_skip = dirty[node.inputs[1]].map(|(a, b)| (a.div_ceil(s), ((b - 1) / s + 1).min(out_len)));
                    hull(dirty[in_id], from_skip)
                }
                Layer::GlobalAvgPool | Layer::Dense(_) | Layer::Softmax => dirty[in_id].map(|_| (0, out_len)),
            };
            let Some((t0, t1)) = range.filter(|(a, b)| a < b) else { continue };
            dirty[out_id] = Some((t0, t1));

            let (before, rest) = self.values.split_at_mut(out_id);
            let out = &mut rest[0];
            let input = &before[in_id];
            match &node.layer {
                Layer::Conv1d(c) => {
                    let g = conv_geom(c, in_shape, out_shape);
                    kernels::conv_forward_range(&g, c.weight.data(), c.bias.data(), input, out, t0, t1);
                }
                Layer::BatchNorm1d(_) => {
                    let (scale, shift) = self.affine[idx].as_ref().expect("affine cache");
                    kernels::affine_channels_range(scale, shift, out_len, input, out, t0, t1);
                }
                Layer::Relu => kernels::relu_range(out_ch, out_len, input, out, t0, t1),
                Layer::AddResidual(sc) => {
                    let skip = &before[node.inputs[1]];
                    let (sch, sl) = seq_dims(net.value_shape(node.inputs[1]));
                    kernels::add_residual_range(out_ch, out_len, sch, sl, sc.stride, input, skip, out, t0, t1);
                }
                Layer::GlobalAvgPool => {
                    let (ch, len) = seq_dims(in_shape);
                    kernels::global_avg_pool(ch, len, input, out);
                }
                Layer::Dense(d) => {
                    kernels::dense_forward(d.in_features, d.out_features, d.weight.data(), d.bias.data(), input, out)
                }
                Layer::Softmax => {
                    let z: Vec<f64> = input.iter().map(|&v| v as f64).collect();
                    for (o, p) in out.iter_mut().zip(kernels::softmax(&z)) {
                        *o = p as f32;
                    }
                }
            }
        }
    }
}
