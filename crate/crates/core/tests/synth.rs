use std::fs;

use ecgattr::synth::{
    derive_example_label, example_rng, gen_beat, gen_dataset, gen_example, import_csv, read_dataset, write_dataset,
    BeatAnnotation, BeatClass, Example, GeneratorParams, MANIFEST_FILE, SIGNAL_BLOB,
};
use ecgattr::{Error, LoadError};
use proptest::prelude::*;
use rayon::prelude::*;

/// Example invariants, checked without the library's own validator.
fn check_example(ex: &Example, class: BeatClass, p: &GeneratorParams) -> Result<(), String> {
    let len = p.signal_length;
    if ex.signal.len() != len || ex.signal.iter().any(|v| !v.is_finite()) {
        return Err("bad signal".into());
    }
    if ex.label != class {
        return Err(format!("label {} != {class}", ex.label));
    }
    let b = &ex.beats;
    if b.len() < 3 || b[0].start != 0 || b[b.len() - 1].end != len {
        return Err("beats do not cover the signal".into());
    }
    for (i, beat) in b.iter().enumerate() {
        if !(beat.start <= beat.r_peak && beat.r_peak < beat.end) {
            return Err(format!("beat {i} r-peak outside interval"));
        }
        if i + 1 < b.len() {
            let mid = (beat.r_peak + b[i + 1].r_peak) / 2;
            if beat.end != mid || b[i + 1].start != mid {
                return Err(format!("beat {i} boundary is not the floor midpoint"));
            }
        }
    }
    let abnormal: Vec<usize> = (0..b.len()).filter(|&i| b[i].class.is_abnormal()).collect();
    match class {
        BeatClass::Normal => {
            if !abnormal.is_empty() {
                return Err("abnormal beat in a normal example".into());
            }
        }
        _ => {
            if abnormal.len() < p.min_abnormal || abnormal.len() > p.max_abnormal {
                return Err(format!("{} abnormal beats", abnormal.len()));
            }
            if abnormal.iter().any(|&i| b[i].class != class) {
                return Err("mixed abnormal classes".into());
            }
            if abnormal.iter().any(|&i| i == 0 || i + 1 == b.len()) {
                return Err("abnormal beat on the boundary".into());
            }
        }
    }
    Ok(())
}

#[test]
fn generated_examples_satisfy_invariants() {
    let p = GeneratorParams::default();
    let failures: Vec<String> = (0..10_000u64)
        .into_par_iter()
        .filter_map(|i| {
            let class = BeatClass::ALL[(i % 3) as usize];
            let ex = gen_example(class, &p, &mut example_rng(99, 5, i)).unwrap();
            check_example(&ex, class, &p).err().map(|e| format!("example {i}: {e}"))
        })
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn single_abnormal_beat_when_max_is_one() {
    let p = GeneratorParams { max_abnormal: 1, ..GeneratorParams::default() };
    for i in 0..50 {
        let ex = gen_example(BeatClass::Pvc, &p, &mut example_rng(3, 0, i)).unwrap();
        assert_eq!(ex.beats.iter().filter(|b| b.class == BeatClass::Pvc).count(), 1);
    }
}

fn half_max_width(samples: &[f32], center: usize) -> usize {
    let half = samples[center] / 2.0;
    let mut lo = center;
    while lo > 0 && samples[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = center;
    while hi + 1 < samples.len() && samples[hi + 1] >= half {
        hi += 1;
    }
    hi - lo + 1
}

#[test]
fn beat_templates_have_expected_morphology() {
    let p = GeneratorParams::default();
    let normal = gen_beat(BeatClass::Normal, 0.8, &p).unwrap();
    let pvc = gen_beat(BeatClass::Pvc, 0.8, &p).unwrap();
    let pac = gen_beat(BeatClass::Pac, 0.8, &p).unwrap();
    let peak = normal
        .samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(peak, normal.r_offset);
    let wn = half_max_width(&normal.samples, normal.r_offset);
    let wv = half_max_width(&pvc.samples, pvc.r_offset);
    assert!(wv as f64 > 1.5 * wn as f64, "PVC width {wv} vs normal {wn}");
    assert!(pac.rr_before < 0.8);
    assert!(pvc.compensatory_pause && !normal.compensatory_pause);
    assert!(gen_beat(BeatClass::Normal, 0.0, &p).is_err());
}

#[test]
fn premature_beats_come_early_in_generated_rhythms() {
    let p = GeneratorParams::default();
    let mean = p.mean_rr * p.sampling_rate;
    for i in 0..100 {
        let ex = gen_example(BeatClass::Pac, &p, &mut example_rng(4, 0, i)).unwrap();
        for w in ex.beats.windows(2) {
            if w[1].class == BeatClass::Pac {
                assert!(((w[1].r_peak - w[0].r_peak) as f64) < mean);
            }
        }
    }
}

#[test]
fn label_rule() {
    use BeatClass::*;
    assert_eq!(derive_example_label(&[Normal, Normal, Normal, Normal]).unwrap(), Normal);
    assert_eq!(derive_example_label(&[Normal, Pvc, Normal]).unwrap(), Pvc);
    assert_eq!(derive_example_label(&[Pac]).unwrap(), Pac);
    assert!(matches!(derive_example_label(&[Pac, Normal, Pvc]), Err(Error::Input(_))));
    assert!(derive_example_label(&[]).is_err());
}

proptest! {
    #[test]
    fn label_is_invariant_under_permutation(classes in prop::collection::vec(0usize..3, 1..12), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let beats: Vec<BeatClass> = classes.iter().map(|&c| BeatClass::ALL[c]).collect();
        let mut shuffled = beats.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = derive_example_label(&beats).ok();
        let b = derive_example_label(&shuffled).ok();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn dataset_sizes_and_splits() {
    let p = GeneratorParams::default();
    let d = gen_dataset(1, &p).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (3, 3));
    let d = gen_dataset(4, &p).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (12, 12));
    for split in [&d.train, &d.test] {
        for c in BeatClass::ALL {
            assert_eq!(split.iter().filter(|e| e.label == c).count(), 4);
        }
    }
    let mut ids: Vec<usize> = d.train.iter().chain(&d.test).map(|e| e.id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 24);
    assert!(d.train.iter().all(|t| d.test.iter().all(|u| t.signal != u.signal)));
    assert!(gen_dataset(0, &p).is_err());
}

#[test]
fn dataset_files_are_deterministic_and_round_trip() {
    let p = GeneratorParams { seed: 11, ..GeneratorParams::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let d = gen_dataset(3, &p).unwrap();
    write_dataset(&d, a.path()).unwrap();
    write_dataset(&gen_dataset(3, &p).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, SIGNAL_BLOB] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back, d);
    let other = gen_dataset(3, &GeneratorParams { seed: 12, ..p }).unwrap();
    assert_ne!(other.train[0].signal, d.train[0].signal);
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, v.to_string()).unwrap();
}

fn fresh(dir: &std::path::Path) {
    write_dataset(&gen_dataset(1, &GeneratorParams::default()).unwrap(), dir).unwrap();
}

#[test]
fn malformed_datasets_give_specific_errors() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();

    fresh(dir);
    fs::remove_file(dir.join(SIGNAL_BLOB)).unwrap();
    let err = read_dataset(dir).unwrap_err();
    assert!(matches!(err, Error::Load(LoadError::MissingBlob { .. })));
    assert!(err.to_string().contains(SIGNAL_BLOB), "{err}");

    fresh(dir);
    let bytes = fs::read(dir.join(SIGNAL_BLOB)).unwrap();
    fs::write(dir.join(SIGNAL_BLOB), &bytes[..bytes.len() - 400]).unwrap();
    assert!(matches!(read_dataset(dir), Err(Error::Load(LoadError::TruncatedBlob { .. }))));

    fresh(dir);
    fs::write(dir.join(MANIFEST_FILE), "[1, 2").unwrap();
    assert!(matches!(read_dataset(dir), Err(Error::Load(LoadError::MalformedManifest { .. }))));

    fresh(dir);
    edit_manifest(dir, |v| v["version"] = 7.into());
    assert!(matches!(read_dataset(dir), Err(Error::Load(LoadError::Version { found: 7, .. }))));

    fresh(dir);
    edit_manifest(dir, |v| {
        let beats = v["examples"][1]["beats"].as_array_mut().unwrap();
        let end = beats[0]["end"].as_u64().unwrap();
        beats[1]["start"] = (end - 5).into();
    });
    match read_dataset(dir) {
        Err(Error::Load(LoadError::InvalidAnnotation { example, beat, .. })) => assert_eq!((example, beat), (1, 1)),
        other => panic!("{other:?}"),
    }

    fresh(dir);
    edit_manifest(dir, |v| v["examples"][0]["label"] = "PVC".into());
    assert!(matches!(read_dataset(dir), Err(Error::Load(LoadError::InvalidAnnotation { example: 0, .. }))));
}

fn write_csv_pair(dir: &std::path::Path, beats: &[(usize, usize, usize, &str)]) -> (std::path::PathBuf, std::path::PathBuf) {
    let sig = dir.join("signal.csv");
    let ann = dir.join("beats.csv");
    let mut s = String::from("value\n");
    for i in 0..300 {
        s.push_str(&format!("{}\n", (i as f32 * 0.1).sin()));
    }
    fs::write(&sig, s).unwrap();
    let mut a = String::from("r_peak,start,end,class\n");
    for (r, st, en, c) in beats {
        a.push_str(&format!("{r},{st},{en},{c}\n"));
    }
    fs::write(&ann, a).unwrap();
    (sig, ann)
}

#[test]
fn csv_import_accepts_valid_and_rejects_overlaps() {
    let t = tempfile::tempdir().unwrap();
    let (sig, ann) = write_csv_pair(t.path(), &[(50, 0, 100, "N"), (150, 100, 200, "PVC"), (250, 200, 300, "N")]);
    let ex = import_csv(&sig, &ann, 42).unwrap();
    assert_eq!(ex.signal.len(), 300);
    assert_eq!(ex.label, BeatClass::Pvc);
    assert_eq!(ex.id, 42);
    assert_eq!(ex.beats[1], BeatAnnotation { r_peak: 150, start: 100, end: 200, class: BeatClass::Pvc });

    let (sig, ann) = write_csv_pair(t.path(), &[(50, 0, 100, "N"), (150, 90, 200, "N"), (250, 200, 300, "N")]);
    match import_csv(&sig, &ann, 0) {
        Err(Error::Load(LoadError::InvalidAnnotation { beat, .. })) => assert_eq!(beat, 1),
        other => panic!("{other:?}"),
    }

    let (sig, ann) = write_csv_pair(t.path(), &[(50, 0, 100, "PAC"), (150, 100, 300, "PVC")]);
    assert!(matches!(import_csv(&sig, &ann, 0), Err(Error::Load(LoadError::InvalidAnnotation { .. }))));
}
