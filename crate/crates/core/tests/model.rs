use ecgattr::engine::{LayerKind, Network};
use ecgattr::model::{
    build_network, is_selected, predict, select_eval_examples, standardize, standardize_examples, train, NetworkConfig,
    TrainConfig,
};
use ecgattr::synth::{gen_dataset, BeatClass, Dataset, Example, GeneratorParams};
use ecgattr::Error;
use proptest::prelude::*;

fn weighted_by_graph_walk(net: &Network) -> usize {
    net.nodes().iter().filter(|n| matches!(n.layer.kind(), LayerKind::Conv1d | LayerKind::Dense)).count()
}

fn small_dataset(n: usize, seed: u64) -> Dataset {
    let d = gen_dataset(n, &GeneratorParams { seed, ..GeneratorParams::default() }).unwrap();
    Dataset { train: standardize_examples(&d.train).unwrap(), test: standardize_examples(&d.test).unwrap(), ..d }
}

#[test]
fn presets_have_the_documented_depth() {
    let paper = build_network(&NetworkConfig::paper(), 0).unwrap();
    assert_eq!(weighted_by_graph_walk(&paper), 18);
    assert_eq!(paper.weighted_layer_count(), 18);
    let desk = build_network(&NetworkConfig::desk(), 0).unwrap();
    assert_eq!(weighted_by_graph_walk(&desk), 8);
    assert_eq!(desk.logits(&vec![0.1; 2049]).unwrap().len(), 3);
    assert_eq!(desk.nodes().iter().filter(|n| n.layer.kind() == LayerKind::Softmax).count(), 1);
}

#[test]
fn initialisation_is_deterministic() {
    let a = build_network(&NetworkConfig::desk(), 5).unwrap();
    let b = build_network(&NetworkConfig::desk(), 5).unwrap();
    let c = build_network(&NetworkConfig::desk(), 6).unwrap();
    let bytes = |n: &Network| -> Vec<u32> { n.parameters().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn invalid_configs_are_rejected() {
    let even = NetworkConfig { kernel_length: 6, ..NetworkConfig::desk() };
    assert!(matches!(build_network(&even, 0), Err(Error::Config(_))));
    let one = NetworkConfig { num_classes: 1, ..NetworkConfig::desk() };
    assert!(matches!(build_network(&one, 0), Err(Error::Config(_))));
    assert!(NetworkConfig::preset("huge").is_err());
}

#[test]
fn standardize_examples_from_the_contract() {
    assert_eq!(standardize(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    assert_eq!(standardize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    let z = standardize(&[0.0, 1.0, 2.0, 3.0]).unwrap();
    let mean = z.iter().map(|&v| v as f64).sum::<f64>() / 4.0;
    let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
    assert!(matches!(standardize(&[]), Err(Error::Input(_))));
}

proptest! {
    #[test]
    fn standardized_moments(values in prop::collection::vec(-1e3f32..1e3, 2..400)) {
        let z = standardize(&values).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((std - 1.0).abs() < 1e-5 || z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selection_is_monotone_in_threshold(p in prop::collection::vec(0.0f64..1.0, 3), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99, label in 0usize..3) {
        let total: f64 = p.iter().sum::<f64>() + 1e-9;
        let probs: Vec<f64> = p.iter().map(|v| v / total).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let class = BeatClass::ALL[label];
        if is_selected(class, &probs, hi) {
            prop_assert!(is_selected(class, &probs, lo));
        }
    }
}

#[test]
fn selection_rule_boundaries() {
    assert!(is_selected(BeatClass::Pvc, &[0.02, 0.03, 0.95], 0.9));
    assert!(!is_selected(BeatClass::Normal, &[0.99, 0.005, 0.005], 0.9));
    assert!(!is_selected(BeatClass::Pac, &[0.05, 0.90, 0.05], 0.9));
    assert!(!is_selected(BeatClass::Pac, &[0.02, 0.03, 0.95], 0.9));
}

#[test]
fn predictions_form_a_simplex_point() {
    let net = build_network(&NetworkConfig::desk(), 1).unwrap();
    let d = small_dataset(2, 1);
    for e in d.test.iter() {
        let p = predict(&net, &e.signal).unwrap();
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    assert!(matches!(predict(&net, &[0.0; 100]), Err(Error::Input(_))));
}

#[test]
fn desk_training_learns_a_small_set() {
    let d = small_dataset(20, 3);
    assert_eq!(d.train.len(), 60);
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 5, seed: 3, ..TrainConfig::default() };
    let net = build_network(&NetworkConfig::desk(), 3).unwrap();
    let (_, history) = train(net.clone(), &d, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 5);
    assert!(history.last().unwrap().train_accuracy > 0.5, "{history:?}");
    assert!(history.epochs[4].train_loss < history.epochs[0].train_loss);
    let (_, again) = train(net, &d, &cfg).unwrap();
    assert_eq!(history, again);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let d = small_dataset(3, 4);
    let net = build_network(&NetworkConfig::desk(), 4).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, batch_size: 4, epochs: 3, ..TrainConfig::default() };
    let (trained, _) = train(net.clone(), &d, &cfg).unwrap();
    for (a, b) in net.parameters().iter().zip(trained.parameters()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_errors() {
    let d = small_dataset(3, 5);
    let net = build_network(&NetworkConfig::desk(), 5).unwrap();
    let wild = TrainConfig { learning_rate: 1e30, batch_size: 3, epochs: 3, ..TrainConfig::default() };
    match train(net.clone(), &d, &wild) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h)),
    }
    let only_normal: Vec<Example> = d.train.iter().filter(|e| e.label == BeatClass::Normal).cloned().collect();
    let lopsided = Dataset { train: only_normal, ..d.clone() };
    assert!(matches!(train(net.clone(), &lopsided, &TrainConfig::default()), Err(Error::Input(_))));
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(train(net, &d, &bad), Err(Error::Config(_))));
}

#[test]
fn train_config_key_value_files() {
    let cfg = TrainConfig::parse_kv("# desk\nlearning_rate = 0.001\nbatch_size=32\n\nepochs = 6 # short\n", TrainConfig::default()).unwrap();
    assert_eq!((cfg.learning_rate, cfg.batch_size, cfg.epochs), (1e-3, 32, 6));
    assert_eq!(cfg.weight_decay, 1e-7);
    assert_eq!(TrainConfig::parse_kv(&cfg.to_kv(), TrainConfig::default()).unwrap(), cfg);
    assert!(TrainConfig::parse_kv("momentum = 0.9", TrainConfig::default()).is_err());
    assert!(TrainConfig::parse_kv("epochs: 3", TrainConfig::default()).is_err());
    assert!(TrainConfig::parse_kv("epochs = three", TrainConfig::default()).is_err());
}

#[test]
fn untrained_selection_excludes_normals_and_rejects_bad_thresholds() {
    let d = small_dataset(4, 6);
    let net = build_network(&NetworkConfig::desk(), 6).unwrap();
    for e in select_eval_examples(&net, &d.test, 0.34).unwrap() {
        assert_ne!(e.label, BeatClass::Normal);
    }
    assert!(select_eval_examples(&net, &d.test, 1.0).is_err());
    assert!(select_eval_examples(&net, &d.test, 0.0).is_err());
}
