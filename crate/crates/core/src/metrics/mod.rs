//! Localization score, pointing game and degradation score.

mod aggregate;
mod degradation;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::synth::Example;

pub use aggregate::{aggregate, best_sign_mode, AggregateRow, MetricRecord};
pub use degradation::{
    degradation_curve, degradation_curve_with, degradation_pair, degradation_score, lerf_order, morf_order,
    window_partition, window_relevance, CurveOrder, DegradationCurve, DEFAULT_MIN_GAP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub window: usize,
    pub threshold: f64,
    pub repeats: usize,
    /// Base seed; repeat `r` uses `seed + r`.
    pub seed: u64,
    /// Upper bound on selected examples scored per repeat (in example order).
    pub max_examples: Option<usize>,
    /// Degradation skips examples with `|p_0 - p_N|` below this.
    pub min_gap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { window: 16, threshold: 0.9, repeats: 5, seed: 0, max_examples: None, min_gap: DEFAULT_MIN_GAP }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.min_gap > 0.0 && self.min_gap < 1.0) {
            return Err(Error::Config(format!("min_gap must lie in (0, 1), got {}", self.min_gap)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn repeat_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

/// Sorted indices of the samples inside abnormal beats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSet {
    indices: Vec<usize>,
    length: usize,
}

impl GroundTruthSet {
    pub fn new(mut indices: Vec<usize>, length: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.last().filter(|&&i| i >= length) {
            return Err(Error::Input(format!("ground-truth index {bad} outside signal of length {length}")));
        }
        Ok(GroundTruthSet { indices, length })
    }

    pub fn from_example(example: &Example) -> Result<Self> {
        Self::new(example.abnormal_samples(), example.signal.len())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn signal_length(&self) -> usize {
        self.length
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

fn check_aligned(attr: &[f32], gt: &GroundTruthSet) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Input("ground-truth set is empty".into()));
    }
    if attr.len() != gt.signal_length() {
        return Err(Error::Input(format!(
            "attribution has {} values, signal has {}",
            attr.len(),
            gt.signal_length()
        )));
    }
    Ok(())
}

/// Descending by value, ties by lower index. NaN sorts last.
fn rank_cmp(attr: &[f32], a: usize, b: usize) -> std::cmp::Ordering {
    let key = |i: usize| if attr[i].is_nan() { f32::NEG_INFINITY } else { attr[i] };
    key(b).total_cmp(&key(a)).then(a.cmp(&b))
}

/// Indices of the `n` largest values, ties broken by lower index.
pub fn top_n(attr: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attr.len()).collect();
    if n < idx.len() {
        idx.select_nth_unstable_by(n, |&a, &b| rank_cmp(attr, a, b));
        idx.truncate(n);
    }
    idx.sort_unstable();
    idx
}

/// IoU between the top-`n` attributed samples and the `n` ground-truth samples.
pub fn localization_score(attr: &[f32], gt: &GroundTruthSet) -> Result<f64> {
    check_aligned(attr, gt)?;
    let n = gt.len();
    let inter = top_n(attr, n).into_iter().filter(|&i| gt.contains(i)).count();
    Ok(inter as f64 / (2 * n - inter) as f64)
}

/// First index of the maximum value.
pub fn argmax_first(attr: &[f32]) -> usize {
    (0..attr.len()).min_by(|&a, &b| rank_cmp(attr, a, b)).unwrap_or(0)
}

pub fn pointing_game_hit(attr: &[f32], gt: &GroundTruthSet) -> Result<bool> {
    check_aligned(attr, gt)?;
    Ok(gt.contains(argmax_first(attr)))
}

pub fn pointing_game_accuracy(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(Error::Input("pointing accuracy of an empty hit list".into()));
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let lg = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// Expected localization score of an attribution whose top-`n` set is a
/// uniformly random `n`-subset of `length` samples: the intersection size is
/// hypergeometric and enters as `k / (2n - k)`.
pub fn expected_random_localization(length: usize, n: usize) -> f64 {
    assert!(n >= 1 && n <= length);
    let lo = (2 * n).saturating_sub(length);
    (lo..=n)
        .map(|k| {
            let p = (ln_binomial(n, k) + ln_binomial(length - n, n - k) - ln_binomial(length, n)).exp();
            p * k as f64 / (2 * n - k) as f64
        })
        .sum()
}

/// Scores one attribution map of a selected example under all three metrics.
/// `signal` is the model-space input and `target` the explained class.
pub fn score_attribution(
    net: &Network,
    example_id: usize,
    signal: &[f32],
    target: usize,
    gt: &GroundTruthSet,
    map: &AttributionMap,
    eval: &EvalConfig,
) -> Result<MetricRecord> {
    let loc = localization_score(&map.values, gt)?;
    let hit = pointing_game_hit(&map.values, gt)?;
    let degradation = match degradation_pair(net, signal, target, &map.values, eval.window, eval.min_gap)? {
        Some((morf, lerf)) => Some(degradation_score(&morf, &lerf)?),
        None => None,
    };
    Ok(MetricRecord { example_id, method: map.method, sign_mode: map.sign_mode, loc, hit, degradation })
}
