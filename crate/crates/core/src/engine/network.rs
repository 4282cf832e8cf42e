use crate::engine::kernels::{self, ConvGeom};
use crate::engine::layer::{BatchNorm1d, Conv1d, Dense, Layer, LayerKind, LayerSpec, Node, ValueShape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Batchnorm behaviour during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics; every layer is affine or ReLU.
    Eval,
    /// Batch statistics, as used while training.
    Train,
}

/// Selector for the backward propagation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Standard,
    GuidedRelu,
    DeepLiftRescale,
    LrpEpsilon,
}

#[derive(Debug, Clone, Copy)]
pub enum BackwardRule<'a, T> {
    /// Exact reverse-mode gradients.
    Standard,
    /// ReLU passes gradient only where both its input and the incoming gradient are positive.
    GuidedRelu,
    /// ReLU multiplier `dy/dx` measured against a reference pass (rescale rule).
    DeepLiftRescale { reference: &'a Tape<T> },
    /// Epsilon-stabilised relevance redistribution.
    LrpEpsilon { epsilon: f64 },
}

impl<T> BackwardRule<'_, T> {
    pub fn kind(&self) -> RuleKind {
        match self {
            BackwardRule::Standard => RuleKind::Standard,
            BackwardRule::GuidedRelu => RuleKind::GuidedRelu,
            BackwardRule::DeepLiftRescale { .. } => RuleKind::DeepLiftRescale,
            BackwardRule::LrpEpsilon { .. } => RuleKind::LrpEpsilon,
        }
    }
}

#[derive(Debug, Clone)]
struct BnBatchStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Biased batch variance.
    var: Vec<f64>,
    count: usize,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    recorded: bool,
    mode: Mode,
    batch: usize,
    values: Vec<Vec<T>>,
    bn: Vec<Option<BnBatchStats>>,
}

impl<T: Real> Tape<T> {
    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Flat activation of value `id` for the whole batch (`[B, ...]`).
    pub fn activation(&self, id: usize) -> &[T] {
        &self.values[id]
    }

    /// Input of node `node`'s first operand.
    pub fn node_input(&self, net: &Network<T>, node: usize) -> &[T] {
        &self.values[net.nodes[node].inputs[0]]
    }

    pub fn node_output(&self, node: usize) -> &[T] {
        &self.values[node + 1]
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    batch: usize,
    input_shape: Vec<usize>,
    values: Vec<Option<Vec<T>>>,
    params: Option<Vec<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient (or multiplier / relevance, depending on the rule) at the input.
    pub fn input(&self) -> Tensor<T> {
        let mut shape = self.input_shape.clone();
        if self.batch > 1 {
            shape.insert(0, self.batch);
        }
        let data = self.values[0].clone().unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
        Tensor::new(shape, data).expect("input gradient shape")
    }

    pub fn value(&self, id: usize) -> Option<&[T]> {
        self.values.get(id).and_then(|v| v.as_deref())
    }

    /// Parameter gradients in [`Network::parameters`] order, summed over the batch.
    pub fn params(&self) -> Option<&[Vec<T>]> {
        self.params.as_deref()
    }
}

/// Fixed layer graph of the 1D residual classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_shape: ValueShape,
    nodes: Vec<Node<T>>,
    shapes: Vec<ValueShape>,
    class_names: Vec<String>,
}

fn cfg_err(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("layer `{name}`: {msg}"))
}

#[inline]
fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

impl<T: Real> Network<T> {
    /// Validates wiring and shapes; errors name the offending layer.
    pub fn new(input_shape: ValueShape, nodes: Vec<Node<T>>, class_names: Vec<String>) -> Result<Self> {
        if let ValueShape::Seq { channels, length } = input_shape {
            if channels == 0 || length == 0 {
                return Err(Error::Config("input shape has a zero dimension".into()));
            }
        } else {
            return Err(Error::Config("network input must be a channel x time sequence".into()));
        }
        let mut shapes = vec![input_shape];
        for (idx, node) in nodes.iter().enumerate() {
            let name = node.name.as_str();
            if node.inputs.len() != node.layer.arity() {
                return Err(cfg_err(name, format!("expects {} inputs, got {}", node.layer.arity(), node.inputs.len())));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&v| v > idx) {
                return Err(cfg_err(name, format!("input value {bad} is not produced before this layer")));
            }
            let in_shape = shapes[node.inputs[0]];
            let out = match &node.layer {
                Layer::Conv1d(c) => {
                    let ValueShape::Seq { channels, length } = in_shape else {
                        return Err(cfg_err(name, "conv1d needs a sequence input"));
                    };
                    if channels != c.in_channels {
                        return Err(cfg_err(name, format!("expects {} input channels, got {channels}", c.in_channels)));
                    }
                    if c.kernel % 2 == 0 {
                        return Err(cfg_err(name, format!("kernel length {} must be odd", c.kernel)));
                    }
                    if c.padding != c.kernel / 2 {
                        return Err(cfg_err(name, "padding must be kernel/2 to preserve length at stride 1"));
                    }
                    if c.stride == 0 {
                        return Err(cfg_err(name, "stride must be positive"));
                    }
                    if c.weight.shape() != [c.out_channels, c.in_channels, c.kernel] || c.bias.numel() != c.out_channels {
                        return Err(cfg_err(name, "parameter shapes do not match channel counts"));
                    }
                    let out_length = c.out_length(length).ok_or_else(|| cfg_err(name, "input shorter than kernel"))?;
                    ValueShape::Seq { channels: c.out_channels, length: out_length }
                }
                Layer::BatchNorm1d(bn) => {
                    let ValueShape::Seq { channels, .. } = in_shape else {
                        return Err(cfg_err(name, "batchnorm1d needs a sequence input"));
                    };
                    if channels != bn.channels
                        || [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var].iter().any(|t| t.numel() != channels)
                    {
                        return Err(cfg_err(name, format!("expects {} channels, got {channels}", bn.channels)));
                    }
                    in_shape
                }
                Layer::Relu => in_shape,
                Layer::AddResidual(sc) => {
                    let (ValueShape::Seq { channels, length }, ValueShape::Seq { channels: sch, length: sl }) =
                        (in_shape, shapes[node.inputs[1]])
                    else {
                        return Err(cfg_err(name, "residual add needs sequence inputs"));
                    };
                    if sc.stride == 0
                        || sc.out_channels != channels
                        || sc.in_channels != sch
                        || sch > channels
                        || kernels::shortcut_length(sl, sc.stride) != length
                    {
                        return Err(cfg_err(
                            name,
                            format!("skip path {sch}x{sl} cannot be projected onto {channels}x{length}"),
                        ));
                    }
                    in_shape
                }
                Layer::GlobalAvgPool => {
                    let ValueShape::Seq { channels, .. } = in_shape else {
                        return Err(cfg_err(name, "global average pool needs a sequence input"));
                    };
                    ValueShape::Flat { features: channels }
                }
                Layer::Dense(d) => {
                    if in_shape.numel() != d.in_features {
                        return Err(cfg_err(name, format!("expects {} features, got {}", d.in_features, in_shape.numel())));
                    }
                    if d.weight.shape() != [d.out_features, d.in_features] || d.bias.numel() != d.out_features {
                        return Err(cfg_err(name, "parameter shapes do not match feature counts"));
                    }
                    ValueShape::Flat { features: d.out_features }
                }
                Layer::Softmax => {
                    if idx + 1 != nodes.len() {
                        return Err(cfg_err(name, "softmax must be the final layer"));
                    }
                    if !matches!(in_shape, ValueShape::Flat { .. }) {
                        return Err(cfg_err(name, "softmax needs flat logits"));
                    }
                    in_shape
                }
            };
            shapes.push(out);
        }
        Ok(Network { input_shape, nodes, shapes, class_names })
    }

    pub fn input_shape(&self) -> ValueShape {
        self.input_shape
    }

    pub fn input_length(&self) -> usize {
        self.input_shape.length().unwrap_or(0)
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn value_shape(&self, id: usize) -> ValueShape {
        self.shapes[id]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Value id of the pre-softmax output.
    pub fn logits_id(&self) -> usize {
        match self.nodes.last() {
            Some(Node { layer: Layer::Softmax, inputs, .. }) => inputs[0],
            _ => self.nodes.len(),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.shapes[self.logits_id()].numel()
    }

    pub fn has_softmax_head(&self) -> bool {
        self.nodes.iter().filter(|n| n.layer.kind() == LayerKind::Softmax).count() == 1
            && matches!(self.nodes.last().map(|n| &n.layer), Some(Layer::Softmax))
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.layer.kind().is_weighted()).count()
    }

    /// Index of the node with this name.
    pub fn find_node(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Index of the last convolution in the graph.
    pub fn last_conv(&self) -> Option<usize> {
        self.nodes.iter().rposition(|n| n.layer.kind() == LayerKind::Conv1d)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut spec = LayerSpec {
                    name: n.name.clone(),
                    kind: n.layer.kind(),
                    inputs: n.inputs.clone(),
                    in_shape: self.shapes[n.inputs[0]],
                    out_shape: self.shapes[i + 1],
                    kernel: None,
                    stride: None,
                    padding: None,
                    eps: None,
                    momentum: None,
                };
                match &n.layer {
                    Layer::Conv1d(c) => {
                        spec.kernel = Some(c.kernel);
                        spec.stride = Some(c.stride);
                        spec.padding = Some(c.padding);
                    }
                    Layer::BatchNorm1d(b) => {
                        spec.eps = Some(b.eps);
                        spec.momentum = Some(b.momentum);
                    }
                    Layer::AddResidual(s) => spec.stride = Some(s.stride),
                    _ => {}
                }
                spec
            })
            .collect()
    }

    /// Trainable tensors in a fixed order: conv (weight, bias), batchnorm (gamma, beta), dense (weight, bias).
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.layer {
                Layer::Conv1d(c) => out.extend([&c.weight, &c.bias]),
                Layer::BatchNorm1d(b) => out.extend([&b.gamma, &b.beta]),
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            match &mut n.layer {
                Layer::Conv1d(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::BatchNorm1d(b) => out.extend([&mut b.gamma, &mut b.beta]),
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                _ => {}
            }
        }
        out
    }

    /// Parameters plus batchnorm running statistics, in checkpoint order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let name = &n.name;
            match &n.layer {
                Layer::Conv1d(c) => {
                    out.push((format!("{name}.weight"), &c.weight));
                    out.push((format!("{name}.bias"), &c.bias));
                }
                Layer::BatchNorm1d(b) => {
                    out.push((format!("{name}.gamma"), &b.gamma));
                    out.push((format!("{name}.beta"), &b.beta));
                    out.push((format!("{name}.running_mean"), &b.running_mean));
                    out.push((format!("{name}.running_var"), &b.running_var));
                }
                Layer::Dense(d) => {
                    out.push((format!("{name}.weight"), &d.weight));
                    out.push((format!("{name}.bias"), &d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let layer = match &n.layer {
                    Layer::Conv1d(c) => Layer::Conv1d(Conv1d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    }),
                    Layer::BatchNorm1d(b) => Layer::BatchNorm1d(BatchNorm1d {
                        channels: b.channels,
                        eps: b.eps,
                        momentum: b.momentum,
                        gamma: b.gamma.cast(),
                        beta: b.beta.cast(),
                        running_mean: b.running_mean.cast(),
                        running_var: b.running_var.cast(),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::AddResidual(s) => Layer::AddResidual(*s),
                    Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                    Layer::Dense(d) => Layer::Dense(Dense {
                        in_features: d.in_features,
                        out_features: d.out_features,
                        weight: d.weight.cast(),
                        bias: d.bias.cast(),
                    }),
                    Layer::Softmax => Layer::Softmax,
                };
                Node::new(n.name.clone(), layer, n.inputs.clone())
            })
            .collect();
        Network {
            input_shape: self.input_shape,
            nodes,
            shapes: self.shapes.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// Folds each batchnorm that directly follows a convolution into that
    /// convolution using the running statistics. The result has the same
    /// inference-mode function with plain affine layers only.
    pub fn fold_batchnorm(&self) -> Network<T> {
        let mut consumers = vec![0usize; self.shapes.len()];
        for n in &self.nodes {
            for &v in &n.inputs {
                consumers[v] += 1;
            }
        }
        let mut map: Vec<usize> = vec![0];
        let mut nodes: Vec<Node<T>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if let Layer::BatchNorm1d(bn) = &n.layer {
                let src = n.inputs[0];
                let new_src = map[src];
                let foldable = src > 0
                    && consumers[src] == 1
                    && new_src > 0
                    && matches!(nodes[new_src - 1].layer, Layer::Conv1d(_));
                if foldable {
                    let (scale, shift) = bn.eval_affine();
                    if let Layer::Conv1d(conv) = &mut nodes[new_src - 1].layer {
                        let per_out = conv.in_channels * conv.kernel;
                        for (o, chunk) in conv.weight.data_mut().chunks_mut(per_out).enumerate() {
                            for w in chunk {
                                *w = T::from_f64_lossy(w.as_f64() * scale[o].as_f64());
                            }
                        }
                        for (o, b) in conv.bias.data_mut().iter_mut().enumerate() {
                            *b = T::from_f64_lossy(b.as_f64() * scale[o].as_f64() + shift[o].as_f64());
                        }
                    }
                    map.push(new_src);
                    continue;
                }
            }
            let inputs = n.inputs.iter().map(|&v| map[v]).collect();
            nodes.push(Node::new(n.name.clone(), n.layer.clone(), inputs));
            map.push(nodes.len());
        }
        Network::new(self.input_shape, nodes, self.class_names.clone()).expect("folding preserves validity")
    }

    fn batch_of(&self, x: &Tensor<T>) -> Result<usize> {
        let per = self.input_shape.numel();
        let ValueShape::Seq { channels, length } = self.input_shape else { unreachable!() };
        let shape = x.shape();
        let ok = match shape.len() {
            1 => channels == 1 && shape[0] == length,
            2 => shape == [channels, length],
            3 => shape[1..] == [channels, length],
            _ => false,
        };
        if !ok || x.numel() % per != 0 {
            return Err(Error::Config(format!(
                "layer `input`: expected shape [{channels}, {length}] (optionally batched), got {shape:?}"
            )));
        }
        Ok(x.numel() / per)
    }

    fn out_tensor(&self, batch: usize, id: usize, data: Vec<T>) -> Tensor<T> {
        let mut shape = match self.shapes[id] {
            ValueShape::Seq { channels, length } => vec![channels, length],
            ValueShape::Flat { features } => vec![features],
        };
        if batch > 1 {
            shape.insert(0, batch);
        }
        Tensor::new(shape, data).expect("value shape")
    }

    /// Runs the graph. Returns the pre-softmax logits and a tape that holds
    /// every activation iff `record` is set.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<(Tensor<T>, Tape<T>)> {
        let batch = self.batch_of(x)?;
        let mut values: Vec<Vec<T>> = Vec::with_capacity(self.shapes.len());
        values.push(x.data().to_vec());
        let mut bn_stats: Vec<Option<BnBatchStats>> = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            let out_shape = self.shapes[idx + 1];
            let out_per = out_shape.numel();
            let in_id = node.inputs[0];
            let in_shape = self.shapes[in_id];
            let in_per = in_shape.numel();
            let mut out = vec![T::zero(); batch * out_per];
            match &node.layer {
                Layer::Conv1d(c) => {
                    let g = conv_geom(c, in_shape, out_shape);
                    let input = &values[in_id];
                    for b in 0..batch {
                        kernels::conv_forward_range(
                            &g,
                            c.weight.data(),
                            c.bias.data(),
                            &input[b * in_per..(b + 1) * in_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                            0,
                            g.out_length,
                        );
                    }
                }
                Layer::BatchNorm1d(bn) => {
                    let length = in_shape.length().unwrap_or(1);
                    let input = &values[in_id];
                    let (scale, shift) = match mode {
                        Mode::Eval => bn.eval_affine(),
                        Mode::Train => {
                            let stats = batch_stats(input, batch, bn.channels, length, bn.eps);
                            let mut scale = Vec::with_capacity(bn.channels);
                            let mut shift = Vec::with_capacity(bn.channels);
                            for ch in 0..bn.channels {
                                let g = bn.gamma.data()[ch].as_f64();
                                let s = g * stats.inv_std[ch];
                                scale.push(T::from_f64_lossy(s));
                                shift.push(T::from_f64_lossy(bn.beta.data()[ch].as_f64() - stats.mean[ch] * s));
                            }
                            bn_stats[idx] = Some(stats);
                            (scale, shift)
                        }
                    };
                    for b in 0..batch {
                        kernels::affine_channels_range(
                            &scale,
                            &shift,
                            length,
                            &input[b * in_per..(b + 1) * in_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                            0,
                            length,
                        );
                    }
                }
                Layer::Relu => {
                    let (ch, len) = seq_dims(in_shape);
                    let input = &values[in_id];
                    for b in 0..batch {
                        kernels::relu_range(
                            ch,
                            len,
                            &input[b * in_per..(b + 1) * in_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                            0,
                            len,
                        );
                    }
                }
                Layer::AddResidual(sc) => {
                    let (ch, len) = seq_dims(out_shape);
                    let skip_id = node.inputs[1];
                    let (sch, sl) = seq_dims(self.shapes[skip_id]);
                    let skip_per = sch * sl;
                    for b in 0..batch {
                        kernels::add_residual_range(
                            ch,
                            len,
                            sch,
                            sl,
                            sc.stride,
                            &values[in_id][b * in_per..(b + 1) * in_per],
                            &values[skip_id][b * skip_per..(b + 1) * skip_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                            0,
                            len,
                        );
                    }
                }
                Layer::GlobalAvgPool => {
                    let (ch, len) = seq_dims(in_shape);
                    for b in 0..batch {
                        kernels::global_avg_pool(
                            ch,
                            len,
                            &values[in_id][b * in_per..(b + 1) * in_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                        );
                    }
                }
                Layer::Dense(d) => {
                    for b in 0..batch {
                        kernels::dense_forward(
                            d.in_features,
                            d.out_features,
                            d.weight.data(),
                            d.bias.data(),
                            &values[in_id][b * in_per..(b + 1) * in_per],
                            &mut out[b * out_per..(b + 1) * out_per],
                        );
                    }
                }
                Layer::Softmax => {
                    for b in 0..batch {
                        let z: Vec<f64> = values[in_id][b * in_per..(b + 1) * in_per].iter().map(|v| v.as_f64()).collect();
                        for (o, p) in out[b * out_per..(b + 1) * out_per].iter_mut().zip(kernels::softmax(&z)) {
                            *o = T::from_f64_lossy(p);
                        }
                    }
                }
            }
            values.push(out);
        }
        let logits_id = self.logits_id();
        let logits = self.out_tensor(batch, logits_id, values[logits_id].clone());
        let tape = if record {
            Tape { recorded: true, mode, batch, values, bn: bn_stats, }
        } else {
            Tape { recorded: false, mode, batch, values: Vec::new(), bn: Vec::new() }
        };
        Ok((logits, tape))
    }

    /// Logits of one example in inference mode.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        let t = Tensor::from_vec(x.to_vec());
        Ok(self.forward(&t, Mode::Eval, false)?.0.into_data())
    }

    /// Class probabilities of one example in inference mode.
    pub fn probabilities(&self, x: &[T]) -> Result<Vec<f64>> {
        let z: Vec<f64> = self.logits(x)?.iter().map(|v| v.as_f64()).collect();
        Ok(kernels::softmax(&z))
    }

    /// Folds batch statistics of a training-mode tape into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if let (Layer::BatchNorm1d(bn), Some(Some(stats))) = (&mut node.layer, tape.bn.get(idx)) {
                let m = bn.momentum;
                let n = stats.count as f64;
                let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
                for c in 0..bn.channels {
                    let rm = &mut bn.running_mean.data_mut()[c];
                    *rm = T::from_f64_lossy((1.0 - m) * rm.as_f64() + m * stats.mean[c]);
                    let rv = &mut bn.running_var.data_mut()[c];
                    *rv = T::from_f64_lossy((1.0 - m) * rv.as_f64() + m * stats.var[c] * unbias);
                }
            }
        }
    }

    /// Propagates `d_logits` from the logits back to the input under `rule`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        d_logits: &Tensor<T>,
        rule: BackwardRule<'_, T>,
        want_params: bool,
    ) -> Result<Gradients<T>> {
        if !tape.recorded {
            return Err(Error::Usage("backward requires a tape recorded by forward(record = true)".into()));
        }
        let batch = tape.batch;
        let logits_id = self.logits_id();
        if d_logits.numel() != batch * self.shapes[logits_id].numel() {
            return Err(Error::Input(format!(
                "d_logits has {} elements, logits have {}",
                d_logits.numel(),
                batch * self.shapes[logits_id].numel()
            )));
        }
        if rule.kind() != RuleKind::Standard && tape.mode != Mode::Eval {
            return Err(Error::Usage("modified backward rules need an inference-mode tape".into()));
        }
        if let BackwardRule::DeepLiftRescale { reference } = rule {
            if !reference.recorded || reference.batch != batch || reference.mode != Mode::Eval {
                return Err(Error::Usage("reference tape must be recorded in inference mode with the same batch".into()));
            }
        }
        if let BackwardRule::LrpEpsilon { epsilon } = rule {
            if !(epsilon > 0.0) {
                return Err(Error::Input("LRP epsilon must be positive".into()));
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.shapes.len()];
        grads[logits_id] = Some(d_logits.data().to_vec());
        let param_slots: Vec<usize> = {
            let mut slots = Vec::with_capacity(self.nodes.len());
            let mut k = 0;
            for n in &self.nodes {
                slots.push(k);
                k += match n.layer {
                    Layer::Conv1d(_) | Layer::BatchNorm1d(_) | Layer::Dense(_) => 2,
                    _ => 0,
                };
            }
            slots
        };
        let mut pgrads: Vec<Vec<f64>> = if want_params {
            self.parameters().iter().map(|p| vec![0.0; p.numel()]).collect()
        } else {
            Vec::new()
        };

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.layer, Layer::Softmax) {
                continue;
            }
            let Some(dy) = grads[idx + 1].take() else { continue };
            let in_id = node.inputs[0];
            let in_shape = self.shapes[in_id];
            let out_shape = self.shapes[idx + 1];
            let in_per = in_shape.numel();
            let out_per = out_shape.numel();
            let x = &tape.values[in_id];
            let z = &tape.values[idx + 1];
            let mut dx = grads[in_id].take().unwrap_or_else(|| vec![T::zero(); batch * in_per]);
            let lrp_eps = match rule {
                BackwardRule::LrpEpsilon { epsilon } => Some(epsilon),
                _ => None,
            };

            match &node.layer {
                Layer::Conv1d(c) => {
                    let g = conv_geom(c, in_shape, out_shape);
                    for b in 0..batch {
                        let dyb = &dy[b * out_per..(b + 1) * out_per];
                        let xb = &x[b * in_per..(b + 1) * in_per];
                        if want_params {
                            let slot = param_slots[idx];
                            let (dw, rest) = pgrads[slot..].split_at_mut(1);
                            kernels::conv_backward_params(&g, xb, dyb, &mut dw[0], &mut rest[0]);
                        }
                        let dxb = &mut dx[b * in_per..(b + 1) * in_per];
                        if let Some(eps) = lrp_eps {
                            let zb = &z[b * out_per..(b + 1) * out_per];
                            let s: Vec<T> = dyb
                                .iter()
                                .zip(zb)
                                .map(|(&r, &zv)| T::from_f64_lossy(r.as_f64() / stabilize(zv.as_f64(), eps)))
                                .collect();
                            let mut tmp = vec![T::zero(); in_per];
                            kernels::conv_backward_input(&g, c.weight.data(), &s, &mut tmp);
                            for ((d, &a), &t) in dxb.iter_mut().zip(xb).zip(&tmp) {
                                *d += a * t;
                            }
                        } else {
                            kernels::conv_backward_input(&g, c.weight.data(), dyb, dxb);
                        }
                    }
                }
                Layer::BatchNorm1d(bn) => {
                    let (ch, len) = seq_dims(in_shape);
                    match tape.mode {
                        Mode::Eval => {
                            let (scale, _) = bn.eval_affine();
                            let mut dgamma = vec![0.0f64; ch];
                            let mut dbeta = vec![0.0f64; ch];
                            for b in 0..batch {
                                for c in 0..ch {
                                    let base = b * in_per + c * len;
                                    let sc = scale[c];
                                    for t in 0..len {
                                        let i = base + t;
                                        let upstream = match lrp_eps {
                                            Some(eps) => {
                                                let s = dy[i].as_f64() / stabilize(z[i].as_f64(), eps);
                                                x[i].as_f64() * s
                                            }
                                            None => dy[i].as_f64(),
                                        };
                                        dx[i] += T::from_f64_lossy(upstream * sc.as_f64());
                                    }
                                    if want_params {
                                        let m = bn.running_mean.data()[c].as_f64();
                                        let inv = 1.0 / (bn.running_var.data()[c].as_f64() + bn.eps).sqrt();
                                        for t in 0..len {
                                            let i = base + t;
                                            dgamma[c] += dy[i].as_f64() * (x[i].as_f64() - m) * inv;
                                            dbeta[c] += dy[i].as_f64();
                                        }
                                    }
                                }
                            }
                            if want_params {
                                let slot = param_slots[idx];
                                add_into(&mut pgrads[slot], &dgamma);
                                add_into(&mut pgrads[slot + 1], &dbeta);
                            }
                        }
                        Mode::Train => {
                            let stats = tape.bn[idx].as_ref().expect("batch statistics recorded");
                            let n = stats.count as f64;
                            let mut dgamma = vec![0.0f64; ch];
                            let mut dbeta = vec![0.0f64; ch];
                            for c in 0..ch {
                                let (mean, inv) = (stats.mean[c], stats.inv_std[c]);
                                let mut sum_dy = 0.0;
                                let mut sum_dy_xhat = 0.0;
                                for b in 0..batch {
                                    let base = b * in_per + c * len;
                                    for t in base..base + len {
                                        let xh = (x[t].as_f64() - mean) * inv;
                                        sum_dy += dy[t].as_f64();
                                        sum_dy_xhat += dy[t].as_f64() * xh;
                                    }
                                }
                                dgamma[c] = sum_dy_xhat;
                                dbeta[c] = sum_dy;
                                let k = bn.gamma.data()[c].as_f64() * inv / n;
                                for b in 0..batch {
                                    let base = b * in_per + c * len;
                                    for t in base..base + len {
                                        let xh = (x[t].as_f64() - mean) * inv;
                                        dx[t] += T::from_f64_lossy(k * (n * dy[t].as_f64() - sum_dy - xh * sum_dy_xhat));
                                    }
                                }
                            }
                            if want_params {
                                let slot = param_slots[idx];
                                add_into(&mut pgrads[slot], &dgamma);
                                add_into(&mut pgrads[slot + 1], &dbeta);
                            }
                        }
                    }
                }
                Layer::Relu => match rule {
                    BackwardRule::Standard => {
                        for ((d, &g), &xv) in dx.iter_mut().zip(&dy).zip(x.iter()) {
                            if xv > T::zero() {
                                *d += g;
                            }
                        }
                    }
                    BackwardRule::GuidedRelu => {
                        for ((d, &g), &xv) in dx.iter_mut().zip(&dy).zip(x.iter()) {
                            if xv > T::zero() && g > T::zero() {
                                *d += g;
                            }
                        }
                    }
                    BackwardRule::DeepLiftRescale { reference } => {
                        let xr = &reference.values[in_id];
                        let zr = &reference.values[idx + 1];
                        for i in 0..dx.len() {
                            let din = x[i].as_f64() - xr[i].as_f64();
                            let m = if din.abs() > 1e-7 {
                                (z[i].as_f64() - zr[i].as_f64()) / din
                            } else if x[i] > T::zero() {
                                1.0
                            } else {
                                0.0
                            };
                            dx[i] += T::from_f64_lossy(dy[i].as_f64() * m);
                        }
                    }
                    BackwardRule::LrpEpsilon { .. } => {
                        for (d, &g) in dx.iter_mut().zip(&dy) {
                            *d += g;
                        }
                    }
                },
                Layer::AddResidual(sc) => {
                    let skip_id = node.inputs[1];
                    let (sch, sl) = seq_dims(self.shapes[skip_id]);
                    let (ch, len) = seq_dims(out_shape);
                    let skip_per = sch * sl;
                    let skip_vals = &tape.values[skip_id];
                    let mut dskip = grads[skip_id].take().unwrap_or_else(|| vec![T::zero(); batch * skip_per]);
                    for b in 0..batch {
                        for c in 0..ch {
                            for t in 0..len {
                                let i = b * out_per + c * len + t;
                                let si = b * skip_per + c * sl + t * sc.stride;
                                match lrp_eps {
                                    Some(eps) => {
                                        let r = dy[i].as_f64() / stabilize(z[i].as_f64(), eps);
                                        dx[i] += T::from_f64_lossy(x[i].as_f64() * r);
                                        if c < sch {
                                            dskip[si] += T::from_f64_lossy(skip_vals[si].as_f64() * r);
                                        }
                                    }
                                    None => {
                                        dx[i] += dy[i];
                                        if c < sch {
                                            dskip[si] += dy[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    // in_id may equal skip_id only in degenerate graphs; both buffers are merged below.
                    if skip_id == in_id {
                        for (a, b) in dx.iter_mut().zip(&dskip) {
                            *a += *b;
                        }
                    } else {
                        grads[skip_id] = Some(dskip);
                    }
                }
                Layer::GlobalAvgPool => {
                    let (ch, len) = seq_dims(in_shape);
                    let inv = 1.0 / len as f64;
                    for b in 0..batch {
                        for c in 0..ch {
                            let g = dy[b * out_per + c].as_f64();
                            let factor = match lrp_eps {
                                Some(eps) => g / stabilize(z[b * out_per + c].as_f64(), eps) * inv,
                                None => g * inv,
                            };
                            let base = b * in_per + c * len;
                            for t in base..base + len {
                                let v = if lrp_eps.is_some() { x[t].as_f64() * factor } else { factor };
                                dx[t] += T::from_f64_lossy(v);
                            }
                        }
                    }
                }
                Layer::Dense(d) => {
                    let w = d.weight.data();
                    for b in 0..batch {
                        let dyb = &dy[b * out_per..(b + 1) * out_per];
                        let xb = &x[b * in_per..(b + 1) * in_per];
                        let s: Vec<f64> = match lrp_eps {
                            Some(eps) => {
                                let zb = &z[b * out_per..(b + 1) * out_per];
                                dyb.iter().zip(zb).map(|(&r, &zv)| r.as_f64() / stabilize(zv.as_f64(), eps)).collect()
                            }
                            None => dyb.iter().map(|v| v.as_f64()).collect(),
                        };
                        for i in 0..d.in_features {
                            let mut acc = 0.0f64;
                            for j in 0..d.out_features {
                                acc += w[j * d.in_features + i].as_f64() * s[j];
                            }
                            if lrp_eps.is_some() {
                                acc *= xb[i].as_f64();
                            }
                            dx[b * in_per + i] += T::from_f64_lossy(acc);
                        }
                        if want_params {
                            let slot = param_slots[idx];
                            for j in 0..d.out_features {
                                let g = dyb[j].as_f64();
                                pgrads[slot + 1][j] += g;
                                let row = &mut pgrads[slot][j * d.in_features..(j + 1) * d.in_features];
                                for (pw, &xv) in row.iter_mut().zip(xb) {
                                    *pw += g * xv.as_f64();
                                }
                            }
                        }
                    }
                }
                Layer::Softmax => unreachable!(),
            }
            grads[in_id] = Some(dx);
            grads[idx + 1] = Some(dy);
        }

        let mut input_shape = match self.input_shape {
            ValueShape::Seq { channels, length } => vec![channels, length],
            ValueShape::Flat { features } => vec![features],
        };
        if input_shape.len() == 2 && input_shape[0] == 1 && batch == 1 {
            input_shape = vec![1, input_shape[1]];
        }
        Ok(Gradients {
            batch,
            input_shape,
            values: grads,
            params: want_params.then(|| {
                pgrads
                    .into_iter()
                    .map(|g| g.into_iter().map(T::from_f64_lossy).collect())
                    .collect()
            }),
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn seq_dims(shape: ValueShape) -> (usize, usize) {
    match shape {
        ValueShape::Seq { channels, length } => (channels, length),
        ValueShape::Flat { features } => (features, 1),
    }
}

pub(crate) fn conv_geom<T>(c: &Conv1d<T>, in_shape: ValueShape, out_shape: ValueShape) -> ConvGeom {
    let (_, in_length) = seq_dims(in_shape);
    let (_, out_length) = seq_dims(out_shape);
    ConvGeom {
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
        in_length,
        out_length,
    }
}

fn batch_stats<T: Real>(x: &[T], batch: usize, channels: usize, length: usize, eps: f64) -> BnBatchStats {
    let per = channels * length;
    let n = (batch * length) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[b * per + c * length..b * per + (c + 1) * length].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[b * per + c * length..b * per + (c + 1) * length]
                .iter()
                .map(|val| {
                    let d = val.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    BnBatchStats { mean, inv_std, var, count: batch * length }
}
