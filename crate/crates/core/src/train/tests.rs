use super::*;
use crate::nn::ModelConfig;
use crate::synth::{generate, SynthConfig};
use crate::vectors::WordVectorTable;

fn small_dataset(num_scenes: usize, dim: usize) -> Dataset {
    let cfg = SynthConfig { num_scenes: num_scenes.max(10), descriptions_per_scene: 2, ..Default::default() };
    let table = WordVectorTable::empty(dim, 3);
    let pairs: Vec<_> = generate(&cfg)
        .unwrap()
        .into_iter()
        .take(num_scenes)
        .map(|s| (s.scene, s.descriptions.into_iter().map(|(_, g)| g).collect()))
        .collect();
    Dataset::from_graphs(&table, &pairs).unwrap()
}

fn small_model(dim: usize, seed: u64) -> JointModel {
    JointModel::new(ModelConfig { dim, num_blocks: 1, mlp_hidden: 8, seed, ..Default::default() })
}

#[test]
fn batch_has_distinct_scenes_and_matching_texts() {
    let ds = small_dataset(12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let batch = build_batch(&ds, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        let mut scenes: Vec<_> = batch.iter().map(|p| p.scene).collect();
        scenes.sort();
        scenes.dedup();
        assert_eq!(scenes.len(), 8);
        assert!(batch.iter().all(|p| ds.texts[p.text].scene_index == p.scene));
    }
    assert_eq!(build_batch(&ds, 12, &mut rng).unwrap().len(), 12);
}

#[test]
fn too_few_scenes() {
    let ds = small_dataset(5, 4);
    let err = build_batch(&ds, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, TrainError::InsufficientScenes { needed: 8, available: 5 }));
}

#[test]
fn scene_sampling_is_uniform() {
    let ds = small_dataset(50, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = vec![0usize; 50];
    let draws = 10_000;
    for _ in 0..draws / 8 {
        for p in build_batch(&ds, 8, &mut rng).unwrap() {
            counts[p.scene] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let expected = total as f64 / 50.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 49 degrees of freedom, p = 0.001 critical value ≈ 85.4
    assert!(chi2 < 85.4, "chi2 = {chi2}");
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ds = small_dataset(10, 4);
    let mut model = small_model(4, 1);
    let before = model.clone();
    let cfg = TrainConfig { batch_size: 4, epochs: 1, learning_rate: 0.0, ..Default::default() };
    train(&mut model, &ds, &cfg, &mut NoCheckpoints).unwrap();
    for ((_, a), (_, b)) in model.parameters().iter().zip(before.parameters()) {
        assert_eq!(*a, b);
    }
}

#[test]
fn training_is_reproducible() {
    let ds = small_dataset(10, 4);
    let cfg = TrainConfig { batch_size: 4, epochs: 2, ..Default::default() };
    let run = || {
        let mut m = small_model(4, 2);
        let r = train(&mut m, &ds, &cfg, &mut NoCheckpoints).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1.steps, r2.steps);
    for ((_, a), (_, b)) in m1.parameters().iter().zip(m2.parameters()) {
        assert_eq!(*a, b);
    }
    assert_eq!(r1.steps.len(), 2 * steps_per_epoch(&ds, 4));
}

#[test]
fn nan_feature_diverges_with_last_good_model() {
    let mut ds = small_dataset(10, 4);
    for s in &mut ds.scenes {
        s.node_features[[0, 0]] = f64::NAN;
    }
    let mut model = small_model(4, 3);
    let before = model.clone();
    let mut sink = MemoryCheckpoints::default();
    let cfg = TrainConfig { batch_size: 4, epochs: 1, ..Default::default() };
    match train(&mut model, &ds, &cfg, &mut sink) {
        Err(TrainError::DivergedLoss { step, last_good }) => {
            assert_eq!(step, 0);
            assert_eq!(last_good.parameters()[0].1, before.parameters()[0].1);
            assert_eq!(sink.saved.len(), 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.steps.len())),
    }
}

#[test]
fn checkpoints_every_n_steps() {
    let ds = small_dataset(10, 4);
    let mut model = small_model(4, 4);
    let mut sink = MemoryCheckpoints::default();
    let cfg = TrainConfig { batch_size: 2, epochs: 1, checkpoint_every: 3, ..Default::default() };
    train(&mut model, &ds, &cfg, &mut sink).unwrap();
    let steps: Vec<usize> = sink.saved.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![3, 6, 9, 10]);
}

#[test]
fn report_csv_and_epoch_means() {
    let report = TrainReport {
        steps: vec![
            StepLoss { step: 0, epoch: 0, cossim: 1.0, matching: 2.0, total: 1.5 },
            StepLoss { step: 1, epoch: 0, cossim: 1.0, matching: 2.0, total: 2.5 },
            StepLoss { step: 2, epoch: 1, cossim: 1.0, matching: 2.0, total: 1.0 },
        ],
    };
    assert_eq!(report.epoch_means(), vec![2.0, 1.0]);
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("step,L_cossim,L_match,L\n0,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn invalid_config_rejected() {
    assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
}

/// Central differences of the batch loss against the analytic gradient,
/// for every parameter tensor (sampled entries) and every loss mode.
#[test]
fn batch_gradient_matches_finite_differences() {
    let ds = small_dataset(10, 3);
    let mut model = JointModel::new(ModelConfig { dim: 3, num_blocks: 2, mlp_hidden: 5, seed: 7, ..Default::default() });
    // zero-initialized biases put ReLU inputs exactly on the kink when the
    // previous layer is fully inactive
    for (t, p) in model.parameters_mut().into_iter().enumerate() {
        for (j, x) in p.iter_mut().enumerate() {
            *x += 0.05 * ((t * 31 + j) as f64).sin();
        }
    }
    let batch = build_batch(&ds, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let scenes: Vec<_> = batch.iter().map(|p| &ds.scenes[p.scene]).collect();
    let texts: Vec<_> = batch.iter().map(|p| &ds.texts[p.text].graph).collect();
    for mode in [LossMode::CosSim, LossMode::MatchProb, LossMode::Both, LossMode::InfoNce] {
        let out = batch_loss_and_grads(&model, &scenes, &texts, mode);
        let analytic: Vec<Vec<f64>> = out.grads.parameters().iter().map(|(_, g)| g.to_vec()).collect();
        let names: Vec<String> = model.parameters().iter().map(|(n, _)| n.clone()).collect();
        for (t, name) in names.iter().enumerate() {
            let len = analytic[t].len();
            for j in (0..len).step_by((len / 4).max(1)) {
                let eps = 1e-5;
                let mut plus = model.clone();
                plus.parameters_mut()[t][j] += eps;
                let mut minus = model.clone();
                minus.parameters_mut()[t][j] -= eps;
                let lp = batch_loss_and_grads(&plus, &scenes, &texts, mode).loss.total;
                let lm = batch_loss_and_grads(&minus, &scenes, &texts, mode).loss.total;
                let fd = (lp - lm) / (2.0 * eps);
                let a = analytic[t][j];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-4, "{mode:?} {name}[{j}]: fd {fd} analytic {a}");
            }
        }
    }
}
