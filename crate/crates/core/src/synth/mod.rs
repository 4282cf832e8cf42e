//! Beat-annotated synthetic single-lead ECG.
//!
//! Each beat is a sum of Gaussian bumps (P, Q, R, S, T) placed at its R-peak.
//! Examples are 2049 samples at 250 Hz; beat boundaries sit at the floor
//! midpoint of adjacent R-peaks, with the first beat starting at sample 0
//! and the last one ending at the signal length.

mod csv_import;
mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_import::{import_csv, read_annotation_csv, read_signal_csv};
pub use dataset::{
    gen_dataset, read_dataset, write_dataset, Dataset, DatasetManifest, ExampleRecord, Split, SplitCounts, DATASET_VERSION,
    MANIFEST_FILE, SIGNAL_BLOB,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeatClass {
    Normal,
    #[serde(rename = "PAC")]
    Pac,
    #[serde(rename = "PVC")]
    Pvc,
}

impl BeatClass {
    pub const ALL: [BeatClass; 3] = [BeatClass::Normal, BeatClass::Pac, BeatClass::Pvc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BeatClass::Normal => "Normal",
            BeatClass::Pac => "PAC",
            BeatClass::Pvc => "PVC",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != BeatClass::Normal
    }
}

impl fmt::Display for BeatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BeatClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" | "NORMAL" => Ok(BeatClass::Normal),
            "A" | "PAC" => Ok(BeatClass::Pac),
            "V" | "PVC" => Ok(BeatClass::Pvc),
            other => Err(Error::Input(format!("unknown beat class `{other}`"))),
        }
    }
}

pub fn class_names() -> Vec<String> {
    BeatClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// One beat: R-peak sample and the half-open interval `[start, end)` it owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatAnnotation {
    pub r_peak: usize,
    pub start: usize,
    pub end: usize,
    pub class: BeatClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub signal: Vec<f32>,
    pub beats: Vec<BeatAnnotation>,
    pub label: BeatClass,
}

impl Example {
    /// Sorted sample indices covered by abnormal beats.
    pub fn abnormal_samples(&self) -> Vec<usize> {
        self.beats
            .iter()
            .filter(|b| b.class.is_abnormal())
            .flat_map(|b| b.start..b.end)
            .collect()
    }

    pub fn abnormal_intervals(&self) -> Vec<(usize, usize)> {
        self.beats.iter().filter(|b| b.class.is_abnormal()).map(|b| (b.start, b.end)).collect()
    }
}

/// A P/Q/R/S/T component: Gaussian bump centred `center` seconds from the R-peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatMorphology {
    pub p: Option<Wave>,
    pub q: Option<Wave>,
    pub r: Wave,
    pub s: Option<Wave>,
    pub t: Option<Wave>,
    /// Multiplier on the nominal preceding RR interval (1 = on time).
    pub prematurity: f64,
    pub compensatory_pause: bool,
}

impl BeatMorphology {
    fn waves(&self) -> impl Iterator<Item = Wave> + '_ {
        [self.p, self.q, Some(self.r), self.s, self.t].into_iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub sampling_rate: f64,
    pub signal_length: usize,
    /// Mean RR interval in seconds.
    pub mean_rr: f64,
    /// Half-width of the uniform RR jitter in seconds.
    pub rr_jitter: f64,
    pub normal: BeatMorphology,
    pub pac: BeatMorphology,
    pub pvc: BeatMorphology,
    pub min_abnormal: usize,
    pub max_abnormal: usize,
    /// Per-beat multiplicative amplitude jitter (uniform ±).
    pub amplitude_jitter: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
    pub wander_hz: f64,
    /// Seconds of template kept before / after the R-peak.
    pub template_before: f64,
    pub template_after: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        let w = |amplitude, center, width| Wave { amplitude, center, width };
        GeneratorParams {
            sampling_rate: 250.0,
            signal_length: 2049,
            mean_rr: 0.8,
            rr_jitter: 0.06,
            normal: BeatMorphology {
                p: Some(w(0.15, -0.20, 0.025)),
                q: Some(w(-0.10, -0.035, 0.010)),
                r: w(1.00, 0.0, 0.010),
                s: Some(w(-0.25, 0.035, 0.010)),
                t: Some(w(0.30, 0.28, 0.045)),
                prematurity: 1.0,
                compensatory_pause: false,
            },
            pac: BeatMorphology {
                p: Some(w(-0.18, -0.14, 0.020)),
                q: Some(w(-0.10, -0.035, 0.010)),
                r: w(0.95, 0.0, 0.010),
                s: Some(w(-0.25, 0.035, 0.010)),
                t: Some(w(0.30, 0.26, 0.045)),
                prematurity: 0.70,
                compensatory_pause: false,
            },
            pvc: BeatMorphology {
                p: None,
                q: None,
                r: w(1.40, 0.0, 0.030),
                s: Some(w(-0.50, 0.075, 0.030)),
                t: Some(w(-0.40, 0.32, 0.060)),
                prematurity: 0.65,
                compensatory_pause: true,
            },
            min_abnormal: 1,
            max_abnormal: 3,
            amplitude_jitter: 0.10,
            noise_std: 0.02,
            wander_amplitude: 0.05,
            wander_hz: 0.3,
            template_before: 0.35,
            template_after: 0.60,
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_rate > 0.0) {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        if !(self.mean_rr > 0.0) || !(self.rr_jitter >= 0.0) || self.rr_jitter >= self.mean_rr {
            return Err(Error::Config("RR jitter must be non-negative and below the mean RR".into()));
        }
        if self.signal_length < 2 {
            return Err(Error::Config("signal length must be at least 2".into()));
        }
        if self.min_abnormal == 0 || self.min_abnormal > self.max_abnormal {
            return Err(Error::Config("abnormal beat range must satisfy 1 <= min <= max".into()));
        }
        for m in [&self.normal, &self.pac, &self.pvc] {
            if !(m.prematurity > 0.0) || m.waves().any(|w| !(w.width > 0.0)) {
                return Err(Error::Config("wave widths and prematurity must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn morphology(&self, class: BeatClass) -> &BeatMorphology {
        match class {
            BeatClass::Normal => &self.normal,
            BeatClass::Pac => &self.pac,
            BeatClass::Pvc => &self.pvc,
        }
    }
}

/// A rendered beat.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatWaveform {
    pub samples: Vec<f32>,
    /// Index of the R-peak inside `samples`.
    pub r_offset: usize,
    /// Actual preceding RR interval in seconds (shortened for premature beats).
    pub rr_before: f64,
    pub compensatory_pause: bool,
}

pub fn gen_beat(class: BeatClass, rr_before: f64, params: &GeneratorParams) -> Result<BeatWaveform> {
    if !(rr_before > 0.0) {
        return Err(Error::Input(format!("rr_before must be positive, got {rr_before}")));
    }
    let m = params.morphology(class);
    let fs = params.sampling_rate;
    let before = (params.template_before * fs).round() as usize;
    let after = (params.template_after * fs).round() as usize;
    let samples = (0..before + after + 1)
        .map(|i| {
            let t = (i as f64 - before as f64) / fs;
            m.waves()
                .map(|w| {
                    let d = (t - w.center) / w.width;
                    w.amplitude * (-0.5 * d * d).exp()
                })
                .sum::<f64>() as f32
        })
        .collect();
    Ok(BeatWaveform {
        samples,
        r_offset: before,
        rr_before: rr_before * m.prematurity,
        compensatory_pause: m.compensatory_pause,
    })
}

/// Example label from its beats: Normal iff every beat is normal, otherwise
/// the abnormal class present. Mixed PAC/PVC examples are rejected.
pub fn derive_example_label(beats: &[BeatClass]) -> Result<BeatClass> {
    if beats.is_empty() {
        return Err(Error::Input("cannot label an example without beats".into()));
    }
    let has_pac = beats.contains(&BeatClass::Pac);
    let has_pvc = beats.contains(&BeatClass::Pvc);
    match (has_pac, has_pvc) {
        (true, true) => Err(Error::Input("example mixes PAC and PVC beats".into())),
        (true, false) => Ok(BeatClass::Pac),
        (false, true) => Ok(BeatClass::Pvc),
        (false, false) => Ok(BeatClass::Normal),
    }
}

/// Beat intervals from sorted R-peaks by the midpoint rule.
pub fn midpoint_intervals(r_peaks: &[usize], length: usize) -> Vec<(usize, usize)> {
    let n = r_peaks.len();
    (0..n)
        .map(|i| {
            let start = if i == 0 { 0 } else { (r_peaks[i - 1] + r_peaks[i]) / 2 };
            let end = if i + 1 == n { length } else { (r_peaks[i] + r_peaks[i + 1]) / 2 };
            (start, end)
        })
        .collect()
}

/// Checks `start <= r_peak < end <= length` per beat and that consecutive
/// beats are sorted, disjoint and contiguous. Returns the offending beat.
pub fn validate_beats(beats: &[BeatAnnotation], length: usize) -> std::result::Result<(), (usize, String)> {
    for (i, b) in beats.iter().enumerate() {
        if !(b.start <= b.r_peak && b.r_peak < b.end) {
            return Err((i, format!("r_peak {} not inside [{}, {})", b.r_peak, b.start, b.end)));
        }
        if b.end > length {
            return Err((i, format!("end {} beyond signal length {length}", b.end)));
        }
        if i > 0 {
            let prev = &beats[i - 1];
            if b.start < prev.end {
                return Err((i, format!("interval [{}, {}) overlaps previous beat ending at {}", b.start, b.end, prev.end)));
            }
            if b.start != prev.end {
                return Err((i, format!("gap between previous end {} and start {}", prev.end, b.start)));
            }
        }
    }
    Ok(())
}

/// Beats whose boundaries differ from the midpoint rule.
pub fn midpoint_violations(beats: &[BeatAnnotation], length: usize) -> Vec<usize> {
    let r: Vec<usize> = beats.iter().map(|b| b.r_peak).collect();
    midpoint_intervals(&r, length)
        .into_iter()
        .zip(beats)
        .enumerate()
        .filter(|(_, ((s, e), b))| b.start != *s || b.end != *e)
        .map(|(i, _)| i)
        .collect()
}

/// Per-example RNG stream derived from `(seed, stream, index)`.
pub fn example_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    // Re-seed from the positioned stream so streams do not overlap for long examples.
    ChaCha8Rng::from_seed(rng.gen())
}

struct Rhythm {
    /// Seconds, possibly negative / beyond the end for context beats.
    positions: Vec<f64>,
    classes: Vec<BeatClass>,
}

fn build_rhythm(nominal: &[f64], start: f64, classes: &[BeatClass], params: &GeneratorParams) -> Rhythm {
    let mut positions = Vec::with_capacity(nominal.len());
    let mut pos = start;
    let mut debt = 0.0;
    for (i, &rr) in nominal.iter().enumerate() {
        if i > 0 {
            let m = params.morphology(classes[i]);
            let actual = rr * m.prematurity + debt;
            debt = 0.0;
            if params.morphology(classes[i]).compensatory_pause {
                debt = rr - rr * m.prematurity;
            }
            pos += actual;
        }
        positions.push(pos);
    }
    Rhythm { positions, classes: classes.to_vec() }
}

/// Samples one example whose label is `class`.
pub fn gen_example<R: Rng>(class: BeatClass, params: &GeneratorParams, rng: &mut R) -> Result<Example> {
    params.validate()?;
    let fs = params.sampling_rate;
    let length = params.signal_length;
    let duration = length as f64 / fs;
    let margin = params.template_after.max(params.template_before) + params.mean_rr;

    for _attempt in 0..1000 {
        let first = rng.gen_range(0.0..params.mean_rr) - params.mean_rr;
        let mut nominal = vec![0.0];
        let mut t = first;
        while t < duration + margin {
            let rr = params.mean_rr + rng.gen_range(-params.rr_jitter..=params.rr_jitter);
            nominal.push(rr);
            t += rr;
        }
        let mut classes = vec![BeatClass::Normal; nominal.len()];
        let in_range = |r: &Rhythm| -> Vec<usize> {
            (0..r.positions.len())
                .filter(|&i| {
                    let s = (r.positions[i] * fs).round();
                    s >= 0.0 && s < length as f64
                })
                .collect()
        };
        let k = if class.is_abnormal() {
            rng.gen_range(params.min_abnormal..=params.max_abnormal)
        } else {
            0
        };
        if k > 0 {
            let base = build_rhythm(&nominal, first, &classes, params);
            let annotated = in_range(&base);
            if annotated.len() < 3 {
                continue;
            }
            let interior = &annotated[1..annotated.len() - 1];
            if interior.len() < k {
                continue;
            }
            let mut picks: Vec<usize> = sample(rng, interior.len(), k).into_iter().map(|j| interior[j]).collect();
            picks.sort_unstable();
            if picks.windows(2).any(|w| w[1] == w[0] + 1) {
                continue;
            }
            for &p in &picks {
                classes[p] = class;
            }
        }
        let rhythm = build_rhythm(&nominal, first, &classes, params);
        let annotated = in_range(&rhythm);
        if annotated.is_empty() {
            continue;
        }
        let abnormal_annotated = annotated.iter().filter(|&&i| rhythm.classes[i].is_abnormal()).count();
        let abnormal_first_last = rhythm.classes[annotated[0]].is_abnormal()
            || rhythm.classes[*annotated.last().unwrap()].is_abnormal();
        if abnormal_annotated != k || abnormal_first_last {
            continue;
        }

        let mut signal = vec![0.0f64; length];
        for (i, &pos) in rhythm.positions.iter().enumerate() {
            let rr_prev = if i == 0 { params.mean_rr } else { nominal[i] };
            let beat = gen_beat(rhythm.classes[i], rr_prev, params)?;
            let gain = 1.0 + rng.gen_range(-params.amplitude_jitter..=params.amplitude_jitter);
            let r_idx = (pos * fs).round() as i64;
            for (j, &v) in beat.samples.iter().enumerate() {
                let s = r_idx + j as i64 - beat.r_offset as i64;
                if s >= 0 && (s as usize) < length {
                    signal[s as usize] += gain * v as f64;
                }
            }
        }
        let noise = Normal::new(0.0, params.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, v) in signal.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v += params.wander_amplitude * (std::f64::consts::TAU * params.wander_hz * t + phase).sin();
            if params.noise_std > 0.0 {
                *v += noise.sample(rng);
            }
        }

        let r_peaks: Vec<usize> = annotated.iter().map(|&i| (rhythm.positions[i] * fs).round() as usize).collect();
        let beats: Vec<BeatAnnotation> = midpoint_intervals(&r_peaks, length)
            .into_iter()
            .zip(&annotated)
            .zip(&r_peaks)
            .map(|(((start, end), &i), &r_peak)| BeatAnnotation { r_peak, start, end, class: rhythm.classes[i] })
            .collect();
        let label = derive_example_label(&beats.iter().map(|b| b.class).collect::<Vec<_>>())?;
        debug_assert_eq!(label, class);
        return Ok(Example { id: 0, signal: signal.into_iter().map(|v| v as f32).collect(), beats, label });
    }
    Err(Error::Config(format!("could not place {class} beats with the given rhythm parameters")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_max_width(w: &BeatWaveform) -> usize {
        let peak = w.samples[w.r_offset];
        let half = peak / 2.0;
        let mut lo = w.r_offset;
        while lo > 0 && w.samples[lo - 1] >= half {
            lo -= 1;
        }
        let mut hi = w.r_offset;
        while hi + 1 < w.samples.len() && w.samples[hi + 1] >= half {
            hi += 1;
        }
        hi - lo + 1
    }

    #[test]
    fn normal_template_peaks_at_declared_offset() {
        let p = GeneratorParams::default();
        let w = gen_beat(BeatClass::Normal, 0.8, &p).unwrap();
        let argmax = w
            .samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, w.r_offset);
    }

    #[test]
    fn pvc_qrs_is_wide() {
        let p = GeneratorParams::default();
        let n = half_max_width(&gen_beat(BeatClass::Normal, 0.8, &p).unwrap());
        let v = half_max_width(&gen_beat(BeatClass::Pvc, 0.8, &p).unwrap());
        assert!(v as f64 > 1.5 * n as f64, "PVC width {v} vs normal {n}");
    }

    #[test]
    fn pac_is_premature_and_pvc_pauses() {
        let p = GeneratorParams::default();
        let pac = gen_beat(BeatClass::Pac, p.mean_rr, &p).unwrap();
        assert!(pac.rr_before < p.mean_rr);
        assert!(!pac.compensatory_pause);
        let pvc = gen_beat(BeatClass::Pvc, p.mean_rr, &p).unwrap();
        assert!(pvc.compensatory_pause);
        // PVC has no P wave: nothing above noise level in the P window.
        let p_idx = pvc.r_offset - (0.2 * p.sampling_rate) as usize;
        assert!(pvc.samples[p_idx].abs() < 0.01);
        assert!(gen_beat(BeatClass::Normal, 0.0, &p).is_err());
    }

    #[test]
    fn label_rule() {
        use BeatClass::*;
        assert_eq!(derive_example_label(&[Normal, Normal, Normal, Normal]).unwrap(), Normal);
        assert_eq!(derive_example_label(&[Normal, Pvc, Normal]).unwrap(), Pvc);
        assert_eq!(derive_example_label(&[Pac]).unwrap(), Pac);
        assert!(derive_example_label(&[Pac, Pvc]).is_err());
        assert!(derive_example_label(&[]).is_err());
    }

    #[test]
    fn class_specific_examples() {
        let mut params = GeneratorParams::default();
        let mut rng = example_rng(3, 0, 0);
        let n = gen_example(BeatClass::Normal, &params, &mut rng).unwrap();
        assert!(n.beats.iter().all(|b| b.class == BeatClass::Normal));
        params.max_abnormal = 1;
        for i in 0..20 {
            let mut rng = example_rng(3, 0, i);
            let v = gen_example(BeatClass::Pvc, &params, &mut rng).unwrap();
            assert_eq!(v.beats.iter().filter(|b| b.class == BeatClass::Pvc).count(), 1);
            assert_eq!(v.signal.len(), 2049);
        }
    }

    #[test]
    fn generated_examples_satisfy_invariants() {
        let params = GeneratorParams::default();
        for i in 0..1000u64 {
            let class = BeatClass::ALL[(i % 3) as usize];
            let mut rng = example_rng(11, 0, i);
            let ex = gen_example(class, &params, &mut rng).unwrap();
            assert_eq!(ex.signal.len(), params.signal_length);
            assert!(validate_beats(&ex.beats, ex.signal.len()).is_ok());
            assert!(midpoint_violations(&ex.beats, ex.signal.len()).is_empty());
            assert_eq!(ex.beats.first().unwrap().start, 0);
            assert_eq!(ex.beats.last().unwrap().end, params.signal_length);
            let classes: Vec<_> = ex.beats.iter().map(|b| b.class).collect();
            assert_eq!(derive_example_label(&classes).unwrap(), class);
            let k = classes.iter().filter(|c| c.is_abnormal()).count();
            if class.is_abnormal() {
                assert!((params.min_abnormal..=params.max_abnormal).contains(&k));
            }
        }
    }

    #[test]
    fn validator_reports_offending_beat() {
        let b = |r, s, e| BeatAnnotation { r_peak: r, start: s, end: e, class: BeatClass::Normal };
        assert!(validate_beats(&[b(5, 0, 10), b(15, 10, 20)], 20).is_ok());
        assert_eq!(validate_beats(&[b(5, 0, 10), b(15, 8, 20)], 20).unwrap_err().0, 1);
        assert_eq!(validate_beats(&[b(5, 0, 10), b(15, 12, 20)], 20).unwrap_err().0, 1);
        assert_eq!(validate_beats(&[b(12, 0, 10)], 20).unwrap_err().0, 0);
    }

    #[test]
    fn midpoint_rule_uses_floor() {
        assert_eq!(midpoint_intervals(&[10, 21, 40], 50), vec![(0, 15), (15, 30), (30, 50)]);
    }
}
