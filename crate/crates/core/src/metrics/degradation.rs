use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{IncrementalForward, Network};
use crate::error::{Error, Result};

/// Default minimum `|p_0 - p_N|`; examples below it are skipped as degenerate.
/// The scaled curve divides by this gap, so a tiny gap turns probability
/// jitter along the curve into arbitrarily large values.
pub const DEFAULT_MIN_GAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveOrder {
    /// Most relevant window removed first.
    Morf,
    /// Least relevant window removed first.
    Lerf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub order: CurveOrder,
    /// Scaled probabilities `y_0 = 1, ..., y_N = 0`.
    pub y: Vec<f64>,
    /// Raw probabilities of the target class after each step.
    pub probabilities: Vec<f64>,
    /// Window indices in removal order.
    pub permutation: Vec<usize>,
}

impl DegradationCurve {
    pub fn windows(&self) -> usize {
        self.permutation.len()
    }
}

/// Contiguous `[start, end)` windows of `window` samples; the last holds the remainder.
pub fn window_partition(length: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 {
        return Err(Error::Input("window size must be at least 1".into()));
    }
    Ok((0..length).step_by(window).map(|s| (s, (s + window).min(length))).collect())
}

/// Sum of attribution values per window, in 64-bit.
pub fn window_relevance(attr: &[f32], windows: &[(usize, usize)]) -> Vec<f64> {
    windows.iter().map(|&(a, b)| attr[a..b].iter().map(|&v| v as f64).sum()).collect()
}

fn key(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Windows by descending relevance, ties by lower index.
pub fn morf_order(relevance: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.sort_by(|&a, &b| key(relevance[b]).total_cmp(&key(relevance[a])).then(a.cmp(&b)));
    idx
}

/// Windows by ascending relevance, ties by lower index.
pub fn lerf_order(relevance: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.sort_by(|&a, &b| key(relevance[a]).total_cmp(&key(relevance[b])).then(a.cmp(&b)));
    idx
}

/// Cumulative mean-fill perturbation against an arbitrary probe.
///
/// `probe(signal, changed)` returns the target-class probability of the
/// current signal; it is first called on the original signal with
/// `changed = 0..len`, then once per removed window with that window's range.
/// Returns `None` when `|p_0 - p_N| < min_gap`.
pub fn degradation_curve_with<F>(
    signal: &[f32],
    attr: &[f32],
    window: usize,
    order: CurveOrder,
    min_gap: f64,
    mut probe: F,
) -> Result<Option<DegradationCurve>>
where
    F: FnMut(&[f32], Range<usize>) -> Result<f64>,
{
    if attr.len() != signal.len() {
        return Err(Error::Input(format!("attribution has {} values, signal has {}", attr.len(), signal.len())));
    }
    let windows = window_partition(signal.len(), window)?;
    let relevance = window_relevance(attr, &windows);
    let permutation = match order {
        CurveOrder::Morf => morf_order(&relevance),
        CurveOrder::Lerf => lerf_order(&relevance),
    };
    let mut current = signal.to_vec();
    let mut probabilities = Vec::with_capacity(windows.len() + 1);
    probabilities.push(probe(&current, 0..signal.len())?);
    for &w in &permutation {
        let (a, b) = windows[w];
        let mean = (signal[a..b].iter().map(|&v| v as f64).sum::<f64>() / (b - a) as f64) as f32;
        current[a..b].fill(mean);
        probabilities.push(probe(&current, a..b)?);
    }
    let p0 = probabilities[0];
    let pn = *probabilities.last().expect("at least one probability");
    if !((p0 - pn).abs() >= min_gap) {
        return Ok(None);
    }
    let n = probabilities.len() - 1;
    let y = probabilities
        .iter()
        .enumerate()
        .map(|(t, &p)| match t {
            0 => 1.0,
            t if t == n => 0.0,
            _ => (p - pn) / (p0 - pn),
        })
        .collect();
    Ok(Some(DegradationCurve { order, y, probabilities, permutation }))
}

fn network_probe<'a>(
    mut inc: IncrementalForward<'a>,
    target: usize,
) -> impl FnMut(&[f32], Range<usize>) -> Result<f64> + 'a {
    let mut first = true;
    move |x, changed| {
        if first {
            first = false;
        } else {
            inc.update(x, changed);
        }
        Ok(inc.probabilities()[target])
    }
}

/// One curve of `signal` under the network's target-class probability.
pub fn degradation_curve(
    net: &Network,
    signal: &[f32],
    target: usize,
    attr: &[f32],
    window: usize,
    order: CurveOrder,
    min_gap: f64,
) -> Result<Option<DegradationCurve>> {
    let inc = IncrementalForward::new(net, signal)?;
    degradation_curve_with(signal, attr, window, order, min_gap, network_probe(inc, target))
}

/// MoRF and LeRF curves sharing one initial forward pass.
pub fn degradation_pair(
    net: &Network,
    signal: &[f32],
    target: usize,
    attr: &[f32],
    window: usize,
    min_gap: f64,
) -> Result<Option<(DegradationCurve, DegradationCurve)>> {
    let inc = IncrementalForward::new(net, signal)?;
    let morf = degradation_curve_with(signal, attr, window, CurveOrder::Morf, min_gap, network_probe(inc.clone(), target))?;
    let lerf = degradation_curve_with(signal, attr, window, CurveOrder::Lerf, min_gap, network_probe(inc, target))?;
    Ok(morf.zip(lerf))
}

/// Trapezoidal area between the LeRF and MoRF curves on `[0, 1]`.
pub fn degradation_score(morf: &DegradationCurve, lerf: &DegradationCurve) -> Result<f64> {
    if morf.y.len() != lerf.y.len() || morf.y.len() < 2 {
        return Err(Error::Input(format!(
            "curves have {} and {} points; they must match and have at least two",
            morf.y.len(),
            lerf.y.len()
        )));
    }
    let n = (morf.y.len() - 1) as f64;
    let d: Vec<f64> = lerf.y.iter().zip(&morf.y).map(|(l, m)| l - m).collect();
    let area: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(order: CurveOrder, y: Vec<f64>) -> DegradationCurve {
        let n = y.len() - 1;
        DegradationCurve { order, probabilities: y.clone(), y, permutation: (0..n).collect() }
    }

    #[test]
    fn partition_of_example_length() {
        let w = window_partition(2049, 16).unwrap();
        assert_eq!(w.len(), 129);
        assert_eq!(w[128], (2048, 2049));
        assert_eq!(window_partition(32, 16).unwrap(), vec![(0, 16), (16, 32)]);
        assert_eq!(window_partition(3, 1).unwrap(), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn trapezoid_closed_form() {
        for n in [2usize, 5, 129] {
            let mut morf = vec![0.0; n + 1];
            morf[0] = 1.0;
            let mut lerf = vec![1.0; n + 1];
            lerf[n] = 0.0;
            let s = degradation_score(&curve(CurveOrder::Morf, morf), &curve(CurveOrder::Lerf, lerf)).unwrap();
            assert!((s - (n as f64 - 1.0) / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn orders_break_ties_by_index() {
        let rel = [1.0, 3.0, 1.0, 3.0];
        assert_eq!(morf_order(&rel), vec![1, 3, 0, 2]);
        assert_eq!(lerf_order(&rel), vec![0, 2, 1, 3]);
    }
}
