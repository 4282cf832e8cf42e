#![allow(dead_code)]

use ecgattr::engine::{BatchNorm1d, Conv1d, Dense, Layer, Network, Node, Shortcut, ValueShape};
use ecgattr::model::{build_network, NetworkConfig};
use ecgattr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale) as f32).collect()
}

pub fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Layer<f32> {
    let scale = (3.0 / (cin * k) as f64).sqrt();
    Layer::Conv1d(Conv1d {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: k / 2,
        weight: Tensor::new(vec![cout, cin, k], uniform(rng, cout * cin * k, scale)).unwrap(),
        bias: Tensor::from_vec(uniform(rng, cout, 0.1)),
    })
}

pub fn batchnorm(rng: &mut ChaCha8Rng, ch: usize) -> Layer<f32> {
    let mut bn = BatchNorm1d::new(ch);
    bn.gamma = Tensor::from_vec((0..ch).map(|_| rng.gen_range(0.5..1.5)).collect());
    bn.beta = Tensor::from_vec(uniform(rng, ch, 0.2));
    bn.running_mean = Tensor::from_vec(uniform(rng, ch, 0.3));
    bn.running_var = Tensor::from_vec((0..ch).map(|_| rng.gen_range(0.5..2.0)).collect());
    Layer::BatchNorm1d(bn)
}

pub fn dense(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> Layer<f32> {
    let scale = 1.0 / (fin as f64).sqrt();
    Layer::Dense(Dense {
        in_features: fin,
        out_features: fout,
        weight: Tensor::new(vec![fout, fin], uniform(rng, fin * fout, scale)).unwrap(),
        bias: Tensor::from_vec(uniform(rng, fout, 0.1)),
    })
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// conv(k3) -> pool -> dense(3): no nonlinearity.
pub fn linear_net(seed: u64, len: usize) -> Network {
    let mut r = rng(seed);
    let nodes = vec![
        Node::new("conv", conv(&mut r, 1, 2, 3, 1), vec![0]),
        Node::new("pool", Layer::GlobalAvgPool, vec![1]),
        Node::new("head", dense(&mut r, 2, 3), vec![2]),
    ];
    Network::new(ValueShape::Seq { channels: 1, length: len }, nodes, names(3)).unwrap()
}

/// conv -> bn -> relu -> conv(stride 2) -> bn -> add(shortcut) -> relu -> pool -> dense -> softmax.
pub fn relu_net(seed: u64, len: usize) -> Network {
    let mut r = rng(seed);
    let nodes = vec![
        Node::new("c1", conv(&mut r, 1, 4, 3, 1), vec![0]),
        Node::new("b1", batchnorm(&mut r, 4), vec![1]),
        Node::new("r1", Layer::Relu, vec![2]),
        Node::new("c2", conv(&mut r, 4, 6, 3, 2), vec![3]),
        Node::new("b2", batchnorm(&mut r, 6), vec![4]),
        Node::new("add", Layer::AddResidual(Shortcut { stride: 2, in_channels: 4, out_channels: 6 }), vec![5, 3]),
        Node::new("r2", Layer::Relu, vec![6]),
        Node::new("pool", Layer::GlobalAvgPool, vec![7]),
        Node::new("head", dense(&mut r, 6, 3), vec![8]),
        Node::new("softmax", Layer::Softmax, vec![9]),
    ];
    Network::new(ValueShape::Seq { channels: 1, length: len }, nodes, names(3)).unwrap()
}

/// A preset network with every parameter and running statistic perturbed, so
/// biases and batch norm are not at their identity initialisation.
pub fn randomized(cfg: &NetworkConfig, seed: u64) -> Network {
    let base = build_network(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let nodes: Vec<Node<f32>> = base
        .nodes()
        .iter()
        .map(|n| {
            let layer = match &n.layer {
                Layer::BatchNorm1d(bn) => batchnorm(&mut r, bn.channels),
                Layer::Conv1d(c) => {
                    let mut c = c.clone();
                    c.bias = Tensor::from_vec(uniform(&mut r, c.out_channels, 0.1));
                    Layer::Conv1d(c)
                }
                Layer::Dense(d) => {
                    let mut d = d.clone();
                    d.bias = Tensor::from_vec(uniform(&mut r, d.out_features, 0.1));
                    Layer::Dense(d)
                }
                other => other.clone(),
            };
            Node::new(n.name.clone(), layer, n.inputs.clone())
        })
        .collect();
    Network::new(base.input_shape(), nodes, base.class_names().to_vec()).unwrap()
}

/// Desk topology on a shorter input so exhaustive checks stay cheap.
pub fn small_desk(len: usize) -> NetworkConfig {
    NetworkConfig { input_length: len, ..NetworkConfig::desk() }
}

pub fn signal(seed: u64, len: usize) -> Vec<f32> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-2.0..2.0)).collect()
}

/// Straightforward f64 interpreter of an inference-mode network, written
/// independently of the engine kernels. Returns the pre-softmax logits.
pub fn naive_logits(net: &Network, x: &[f32]) -> Vec<f64> {
    let mut values: Vec<(Vec<f64>, usize, usize)> = vec![(x.iter().map(|&v| v as f64).collect(), 1, x.len())];
    let mut last = 0;
    for (idx, node) in net.nodes().iter().enumerate() {
        let (input, ch, len) = values[node.inputs[0]].clone();
        let out = match &node.layer {
            Layer::Conv1d(c) => {
                let pad = c.padding as isize;
                let out_len = (len + 2 * c.padding - c.kernel) / c.stride + 1;
                let w = c.weight.data();
                let mut y = vec![0.0; c.out_channels * out_len];
                for o in 0..c.out_channels {
                    for t in 0..out_len {
                        let mut acc = c.bias.data()[o] as f64;
                        for i in 0..c.in_channels {
                            for k in 0..c.kernel {
                                let pos = (t * c.stride) as isize + k as isize - pad;
                                if pos >= 0 && (pos as usize) < len {
                                    acc += w[(o * c.in_channels + i) * c.kernel + k] as f64 * input[i * len + pos as usize];
                                }
                            }
                        }
                        y[o * out_len + t] = acc;
                    }
                }
                (y, c.out_channels, out_len)
            }
            Layer::BatchNorm1d(bn) => {
                let mut y = input.clone();
                for c in 0..ch {
                    let g = bn.gamma.data()[c] as f64;
                    let b = bn.beta.data()[c] as f64;
                    let m = bn.running_mean.data()[c] as f64;
                    let v = bn.running_var.data()[c] as f64;
                    for t in 0..len {
                        y[c * len + t] = g * (input[c * len + t] - m) / (v + bn.eps).sqrt() + b;
                    }
                }
                (y, ch, len)
            }
            Layer::Relu => (input.iter().map(|v| v.max(0.0)).collect(), ch, len),
            Layer::AddResidual(sc) => {
                let (skip, sch, slen) = values[node.inputs[1]].clone();
                let mut y = input.clone();
                for c in 0..sch {
                    for t in 0..len {
                        let s = t * sc.stride;
                        if s < slen {
                            y[c * len + t] += skip[c * slen + s];
                        }
                    }
                }
                (y, ch, len)
            }
            Layer::GlobalAvgPool => {
                let y: Vec<f64> = (0..ch).map(|c| input[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64).collect();
                (y, 1, ch)
            }
            Layer::Dense(d) => {
                let w = d.weight.data();
                let y = (0..d.out_features)
                    .map(|o| {
                        d.bias.data()[o] as f64
                            + (0..d.in_features).map(|i| w[o * d.in_features + i] as f64 * input[i]).sum::<f64>()
                    })
                    .collect();
                (y, 1, d.out_features)
            }
            Layer::Softmax => {
                values.push((input.clone(), ch, len));
                continue;
            }
        };
        values.push(out);
        last = idx + 1;
    }
    values[last].0.clone()
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Exact Shapley values of `m` equal-width segments (the last one absorbs the
/// remainder); an absent segment is filled with its own mean.
pub fn brute_force_shapley(f: &dyn Fn(&[f32]) -> f64, x: &[f32], m: usize) -> Vec<f64> {
    let size = x.len() / m;
    let bounds: Vec<usize> = (0..=m).map(|s| if s == m { x.len() } else { s * size }).collect();
    let means: Vec<f32> =
        bounds.windows(2).map(|w| x[w[0]..w[1]].iter().sum::<f32>() / (w[1] - w[0]) as f32).collect();
    let value = |mask: u32| {
        let mut z = x.to_vec();
        for s in 0..m {
            if mask >> s & 1 == 0 {
                z[bounds[s]..bounds[s + 1]].fill(means[s]);
            }
        }
        f(&z)
    };
    let fact = |n: usize| (1..=n).product::<usize>() as f64;
    (0..m)
        .map(|j| {
            let mut phi = 0.0;
            for mask in 0..(1u32 << m) {
                if mask >> j & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact(s) * fact(m - s - 1) / fact(m);
                phi += w * (value(mask | 1 << j) - value(mask));
            }
            phi
        })
        .collect()
}

/// Brute-force IoU: full stable sort by descending value, first n taken.
pub fn brute_loc(attr: &[f32], gt: &[usize]) -> f64 {
    let n = gt.len();
    let mut order: Vec<usize> = (0..attr.len()).collect();
    order.sort_by(|&a, &b| attr[b].partial_cmp(&attr[a]).unwrap().then(a.cmp(&b)));
    let top = &order[..n];
    let inter = top.iter().filter(|i| gt.contains(i)).count();
    let union = n + n - inter;
    inter as f64 / union as f64
}

pub fn subset(mask: u32, len: usize) -> Vec<usize> {
    (0..len).filter(|&i| mask >> i & 1 == 1).collect()
}
