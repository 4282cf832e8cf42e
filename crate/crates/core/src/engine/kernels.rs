//! Per-example numeric kernels.
//!
//! Every forward kernel computes a half-open range of output positions and
//! accumulates each element in a fixed order, so recomputing a sub-range
//! reproduces the full pass bit for bit.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_length: usize,
    pub out_length: usize,
}

impl ConvGeom {
    /// Output positions `t` whose tap `k` reads a real (non-padding) input sample.
    #[inline]
    pub fn valid_range(&self, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(s)
        };
        let reach = self.in_length - 1 + self.padding;
        let hi = if reach < k {
            0
        } else {
            ((reach - k) / s + 1).min(self.out_length)
        };
        (lo, hi.max(lo))
    }

    /// Output positions affected when inputs `[a, b)` change.
    pub fn affected_outputs(&self, a: usize, b: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo_num = a as isize + self.padding as isize - self.kernel as isize + 1;
        let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
        let hi = (b as isize - 1 + self.padding as isize) / s + 1;
        let lo = (lo as usize).min(self.out_length);
        let hi = (hi.max(0) as usize).min(self.out_length);
        (lo, hi.max(lo))
    }
}

/// Splits one channel row into `stride` phases, `phase[r][j] = x[j * stride + r]`,
/// so that strided taps become contiguous slices.
fn phases<T: Real>(x: &[T], stride: usize) -> Vec<Vec<T>> {
    (0..stride).map(|r| x.iter().skip(r).step_by(stride).copied().collect()).collect()
}

/// Tap `k` reads input `t * s + k - p = s * (t + q) + r`; returns `(r, q)`.
#[inline]
fn tap_phase(k: usize, p: usize, s: usize) -> (usize, isize) {
    let off = k as isize - p as isize;
    let q = off.div_euclid(s as isize);
    let r = off.rem_euclid(s as isize) as usize;
    (r, q)
}

/// `y[o, t0..t1] = bias[o] + sum_{i,k} w[o,i,k] * x[i, t*s + k - p]`.
pub fn conv_forward_range<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    x: &[T],
    y: &mut [T],
    t0: usize,
    t1: usize,
) {
    if t0 >= t1 {
        return;
    }
    let (k_len, s, p) = (g.kernel, g.stride, g.padding);
    let split: Vec<Vec<Vec<T>>> = if s == 1 {
        Vec::new()
    } else {
        (0..g.in_channels).map(|i| phases(&x[i * g.in_length..(i + 1) * g.in_length], s)).collect()
    };
    for o in 0..g.out_channels {
        let row = &mut y[o * g.out_length + t0..o * g.out_length + t1];
        row.fill(bias[o]);
        for i in 0..g.in_channels {
            let wrow = &weight[(o * g.in_channels + i) * k_len..(o * g.in_channels + i + 1) * k_len];
            for (k, &w) in wrow.iter().enumerate() {
                let (lo, hi) = g.valid_range(k);
                let lo = lo.max(t0);
                let hi = hi.min(t1);
                if lo >= hi {
                    continue;
                }
                let dst = &mut row[lo - t0..hi - t0];
                let src = if s == 1 {
                    let start = lo + k - p;
                    &x[i * g.in_length + start..i * g.in_length + start + (hi - lo)]
                } else {
                    let (r, q) = tap_phase(k, p, s);
                    let start = (lo as isize + q) as usize;
                    &split[i][r][start..start + (hi - lo)]
                };
                for (d, &xv) in dst.iter_mut().zip(src) {
                    *d += w * xv;
                }
            }
        }
    }
}

/// Accumulates `dx += W^T dy` for one example.
pub fn conv_backward_input<T: Real>(g: &ConvGeom, weight: &[T], dy: &[T], dx: &mut [T]) {
    let (k_len, s, p) = (g.kernel, g.stride, g.padding);
    for i in 0..g.in_channels {
        let mut split: Vec<Vec<T>> = if s == 1 {
            Vec::new()
        } else {
            (0..s).map(|r| vec![T::zero(); (g.in_length + s - 1 - r) / s]).collect()
        };
        for o in 0..g.out_channels {
            let drow = &dy[o * g.out_length..(o + 1) * g.out_length];
            let wrow = &weight[(o * g.in_channels + i) * k_len..(o * g.in_channels + i + 1) * k_len];
            for (k, &w) in wrow.iter().enumerate() {
                let (lo, hi) = g.valid_range(k);
                if lo >= hi {
                    continue;
                }
                let dst = if s == 1 {
                    let start = lo + k - p;
                    &mut dx[i * g.in_length + start..i * g.in_length + start + (hi - lo)]
                } else {
                    let (r, q) = tap_phase(k, p, s);
                    let start = (lo as isize + q) as usize;
                    &mut split[r][start..start + (hi - lo)]
                };
                for (d, &gv) in dst.iter_mut().zip(&drow[lo..hi]) {
                    *d += w * gv;
                }
            }
        }
        if s > 1 {
            let dxin = &mut dx[i * g.in_length..(i + 1) * g.in_length];
            for (r, ph) in split.iter().enumerate() {
                for (d, &v) in dxin.iter_mut().skip(r).step_by(s).zip(ph) {
                    *d += v;
                }
            }
        }
    }
}

/// Dot product with short single-precision blocks folded into a 64-bit total.
#[inline]
pub fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    const BLOCK: usize = 64;
    let mut total = 0.0f64;
    for (ca, cb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut lanes = [T::zero(); 8];
        let mut ia = ca.chunks_exact(8);
        let mut ib = cb.chunks_exact(8);
        for (xa, xb) in (&mut ia).zip(&mut ib) {
            for l in 0..8 {
                lanes[l] += xa[l] * xb[l];
            }
        }
        let mut tail = T::zero();
        for (&u, &v) in ia.remainder().iter().zip(ib.remainder()) {
            tail += u * v;
        }
        total += lanes.iter().map(|v| v.as_f64()).sum::<f64>() + tail.as_f64();
    }
    total
}

/// Accumulates weight and bias gradients of one example into 64-bit buffers.
pub fn conv_backward_params<T: Real>(
    g: &ConvGeom,
    x: &[T],
    dy: &[T],
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let (k_len, s, p) = (g.kernel, g.stride, g.padding);
    let split: Vec<Vec<Vec<T>>> = if s == 1 {
        Vec::new()
    } else {
        (0..g.in_channels).map(|i| phases(&x[i * g.in_length..(i + 1) * g.in_length], s)).collect()
    };
    for o in 0..g.out_channels {
        let drow = &dy[o * g.out_length..(o + 1) * g.out_length];
        dbias[o] += drow.iter().map(|v| v.as_f64()).sum::<f64>();
        for i in 0..g.in_channels {
            for k in 0..k_len {
                let (lo, hi) = g.valid_range(k);
                if lo >= hi {
                    continue;
                }
                let src = if s == 1 {
                    let start = lo + k - p;
                    &x[i * g.in_length + start..i * g.in_length + start + (hi - lo)]
                } else {
                    let (r, q) = tap_phase(k, p, s);
                    let start = (lo as isize + q) as usize;
                    &split[i][r][start..start + (hi - lo)]
                };
                dweight[(o * g.in_channels + i) * k_len + k] += dot_f64(&drow[lo..hi], src);
            }
        }
    }
}

pub fn affine_channels_range<T: Real>(
    scale: &[T],
    shift: &[T],
    length: usize,
    x: &[T],
    y: &mut [T],
    t0: usize,
    t1: usize,
) {
    for c in 0..scale.len() {
        let (sc, sh) = (scale[c], shift[c]);
        let base = c * length;
        for (d, &v) in y[base + t0..base + t1].iter_mut().zip(&x[base + t0..base + t1]) {
            *d = v * sc + sh;
        }
    }
}

pub fn relu_range<T: Real>(channels: usize, length: usize, x: &[T], y: &mut [T], t0: usize, t1: usize) {
    for c in 0..channels {
        let base = c * length;
        for (d, &v) in y[base + t0..base + t1].iter_mut().zip(&x[base + t0..base + t1]) {
            *d = if v > T::zero() { v } else { T::zero() };
        }
    }
}

/// Length of the subsampled skip path for a given stride.
pub fn shortcut_length(skip_length: usize, stride: usize) -> usize {
    (skip_length - 1) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn add_residual_range<T: Real>(
    out_channels: usize,
    length: usize,
    skip_channels: usize,
    skip_length: usize,
    stride: usize,
    main: &[T],
    skip: &[T],
    y: &mut [T],
    t0: usize,
    t1: usize,
) {
    for c in 0..out_channels {
        let base = c * length;
        let dst = &mut y[base + t0..base + t1];
        let m = &main[base + t0..base + t1];
        if c < skip_channels {
            let srow = &skip[c * skip_length..(c + 1) * skip_length];
            for (j, (d, &mv)) in dst.iter_mut().zip(m).enumerate() {
                *d = mv + srow[(t0 + j) * stride];
            }
        } else {
            dst.copy_from_slice(m);
        }
    }
}

pub fn global_avg_pool<T: Real>(channels: usize, length: usize, x: &[T], y: &mut [T]) {
    let inv = 1.0 / length as f64;
    for c in 0..channels {
        let s: f64 = x[c * length..(c + 1) * length].iter().map(|v| v.as_f64()).sum();
        y[c] = T::from_f64_lossy(s * inv);
    }
}

pub fn dense_forward<T: Real>(in_f: usize, out_f: usize, w: &[T], b: &[T], x: &[T], y: &mut [T]) {
    for j in 0..out_f {
        let row = &w[j * in_f..(j + 1) * in_f];
        let s: f64 = row
            .iter()
            .zip(x)
            .map(|(&a, &v)| a.as_f64() * v.as_f64())
            .sum();
        y[j] = T::from_f64_lossy(b[j].as_f64() + s);
    }
}

/// Numerically stable softmax in 64-bit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.out_channels * g.out_length];
        for o in 0..g.out_channels {
            for t in 0..g.out_length {
                let mut acc = b[o];
                for i in 0..g.in_channels {
                    for k in 0..g.kernel {
                        let pos = (t * g.stride + k) as isize - g.padding as isize;
                        if pos >= 0 && (pos as usize) < g.in_length {
                            acc += w[(o * g.in_channels + i) * g.kernel + k]
                                * x[i * g.in_length + pos as usize];
                        }
                    }
                }
                y[o * g.out_length + t] = acc;
            }
        }
        y
    }

    fn geom(stride: usize, in_length: usize) -> ConvGeom {
        let (kernel, padding) = (7, 3);
        ConvGeom {
            in_channels: 2,
            out_channels: 3,
            kernel,
            stride,
            padding,
            in_length,
            out_length: (in_length + 2 * padding - kernel) / stride + 1,
        }
    }

    #[test]
    fn conv_matches_direct_definition() {
        for stride in [1, 2, 3] {
            for len in [5, 8, 13] {
                let g = geom(stride, len);
                let w: Vec<f64> = (0..g.out_channels * g.in_channels * 7)
                    .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                    .collect();
                let b = vec![0.5, -0.25, 0.0];
                let x: Vec<f64> = (0..2 * len).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
                let mut y = vec![0.0; g.out_channels * g.out_length];
                conv_forward_range(&g, &w, &b, &x, &mut y, 0, g.out_length);
                let want = naive_conv(&g, &w, &b, &x);
                for (a, e) in y.iter().zip(&want) {
                    assert!((a - e).abs() < 1e-12, "stride {stride} len {len}");
                }
            }
        }
    }

    #[test]
    fn affected_outputs_cover_every_dependent_position() {
        for stride in [1, 2] {
            let g = geom(stride, 20);
            for a in 0..20 {
                for b in a + 1..=20 {
                    let (lo, hi) = g.affected_outputs(a, b);
                    for t in 0..g.out_length {
                        let first = (t * stride) as isize - 3;
                        let last = first + 6;
                        let touches = last >= a as isize && first < b as isize;
                        assert_eq!(touches, t >= lo && t < hi, "stride {stride} [{a},{b}) t {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }
}
