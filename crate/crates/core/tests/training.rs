use depth_introspect::dedn::{DednConfig, DednModel};
use depth_introspect::depth::{generate_scene, SceneConfig};
use depth_introspect::evaluation::{detection_report_from_probs, DetectionReport};
use depth_introspect::labeling::{ClassWeights, ErrorClass, ErrorLabelMap, LabelerConfig};
use depth_introspect::tensor::{Mode, Tensor};
use depth_introspect::training::{
    predict_corpus, stack_views, train, weighted_ce, LabeledSample, LossConfig, TrainConfig,
};
use depth_introspect::Error;
use proptest::prelude::*;

fn corpus(n: usize, side: usize) -> Vec<LabeledSample> {
    let cfg = SceneConfig {
        width: side,
        height: side,
        ..SceneConfig::default()
    };
    (0..n as u64)
        .map(|seed| {
            let s = generate_scene(&cfg, seed).unwrap();
            LabeledSample::new(
                &[(&s.rgb, &s.pred_depth)],
                &s.gt_depth,
                &LabelerConfig::default(),
                10.0,
            )
            .unwrap()
        })
        .collect()
}

fn small_model(side: usize, seed: u64) -> DednModel<f32> {
    let cfg = DednConfig {
        width: side,
        height: side,
        channels: vec![8, 16],
        blocks_per_stage: 1,
        ..DednConfig::default()
    };
    DednModel::new(cfg, seed).unwrap()
}

fn params(model: &mut DednModel<f32>) -> Vec<Vec<f32>> {
    model
        .params_mut()
        .into_iter()
        .map(|p| p.data().to_vec())
        .collect()
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let data = corpus(6, 16);
    let mut model = small_model(16, 1);
    let before = params(&mut model);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &data,
        &cfg,
        &LossConfig::for_corpus(&data).unwrap(),
    )
    .unwrap();
    assert_eq!(params(&mut model), before);
}

#[test]
fn overfits_four_images() {
    let data = corpus(4, 16);
    let mut model = small_model(16, 0);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 150,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &data,
        &cfg,
        &LossConfig::for_corpus(&data).unwrap(),
    )
    .unwrap();
    let mut report = DetectionReport::default();
    for (p, s) in predict_corpus(&model, &data, 4).unwrap().iter().zip(&data) {
        report.merge(&detection_report_from_probs(p, &s.labels).unwrap());
    }
    assert!(
        report.accuracy().unwrap() >= 0.95,
        "{:?}",
        report.accuracy()
    );
}

#[test]
fn same_seed_same_curves() {
    let data = corpus(6, 16);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let loss_cfg = LossConfig::for_corpus(&data).unwrap();
    let run = || {
        let mut m = small_model(16, 2);
        let h = train(&mut m, &data, &cfg, &loss_cfg).unwrap();
        (h, m.to_checkpoint())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_corpus_and_non_finite_inputs_abort() {
    let mut model = small_model(16, 0);
    let loss_cfg = LossConfig::new(ClassWeights::UNIT);
    let err = train(&mut model, &[], &TrainConfig::default(), &loss_cfg).unwrap_err();
    assert!(matches!(err, Error::EmptyCorpus(_)));
    let mut data = corpus(2, 16);
    data[1].views[0].depth.data_mut()[5] = f32::NAN;
    let cfg = TrainConfig {
        batch_size: 1,
        shuffle: false,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &data, &cfg, &loss_cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NonFinite {
                epoch: 1,
                batch: 1,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn tiny_step_decreases_batch_loss() {
    let data = corpus(4, 16);
    let mut model = small_model(16, 3);
    let loss_cfg = LossConfig::for_corpus(&data).unwrap();
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let views = stack_views(&refs).unwrap();
    let labels: Vec<&ErrorLabelMap> = data.iter().map(|s| &s.labels).collect();
    let batch_loss = |m: &mut DednModel<f32>| {
        let probs = m.forward(&views, Mode::Train).unwrap();
        m.clear_records();
        weighted_ce(&probs, &labels, &loss_cfg).unwrap().0
    };
    let before = batch_loss(&mut model);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        momentum: 0.0,
        epochs: 1,
        batch_size: 4,
        shuffle: false,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, &loss_cfg).unwrap();
    let after = batch_loss(&mut model);
    assert!(after < before, "{before} -> {after}");
}

fn class(i: u8) -> ErrorClass {
    ErrorClass::from_index(i as usize % 3).unwrap()
}

/// Batch of 2 maps at 4×3 with random labels, masks, and softmax probabilities.
fn batch() -> impl Strategy<Value = (Tensor<f64>, Vec<ErrorLabelMap>, [f64; 3])> {
    (
        prop::collection::vec(-3.0f64..3.0, 72),
        prop::collection::vec(0u8..3, 24),
        prop::collection::vec(prop::bool::weighted(0.7), 24),
        prop::array::uniform3(0.1f64..3.0),
    )
        .prop_map(|(logits, labels, mask, weights)| {
            let mut probs = vec![0.0; 72];
            for n in 0..2 {
                for i in 0..12 {
                    let z: Vec<f64> = (0..3).map(|c| logits[(n * 3 + c) * 12 + i].exp()).collect();
                    let s: f64 = z.iter().sum();
                    for c in 0..3 {
                        probs[(n * 3 + c) * 12 + i] = z[c] / s;
                    }
                }
            }
            let maps = (0..2)
                .map(|n| {
                    let l = labels[n * 12..(n + 1) * 12]
                        .iter()
                        .map(|&v| class(v))
                        .collect();
                    ErrorLabelMap::new(4, 3, l, mask[n * 12..(n + 1) * 12].to_vec()).unwrap()
                })
                .collect();
            (Tensor::new(vec![2, 3, 3, 4], probs).unwrap(), maps, weights)
        })
}

fn cfg(w: [f64; 3]) -> LossConfig {
    LossConfig::new(ClassWeights::from_array(w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analytic_gradient_matches_finite_differences((probs, maps, w) in batch()) {
        let refs: Vec<&ErrorLabelMap> = maps.iter().collect();
        let (_, grad) = weighted_ce(&probs, &refs, &cfg(w)).unwrap();
        let h = 1e-7;
        for k in 0..probs.len() {
            let mut plus = probs.clone();
            let mut minus = probs.clone();
            plus.data_mut()[k] += h;
            minus.data_mut()[k] -= h;
            let numeric = (weighted_ce(&plus, &refs, &cfg(w)).unwrap().0 - weighted_ce(&minus, &refs, &cfg(w)).unwrap().0) / (2.0 * h);
            let analytic = grad.data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            prop_assert!(rel <= 1e-3, "entry {}: {} vs {}", k, analytic, numeric);
        }
    }

    #[test]
    fn masked_pixels_do_not_matter((probs, maps, w) in batch(), noise in prop::collection::vec(0.0f64..1.0, 72)) {
        let refs: Vec<&ErrorLabelMap> = maps.iter().collect();
        let (base, grad) = weighted_ce(&probs, &refs, &cfg(w)).unwrap();
        let mut perturbed = probs.clone();
        for n in 0..2 {
            for i in 0..12 {
                if !maps[n].mask()[i] {
                    for c in 0..3 {
                        perturbed.data_mut()[(n * 3 + c) * 12 + i] = noise[(n * 3 + c) * 12 + i];
                        prop_assert_eq!(grad.data()[(n * 3 + c) * 12 + i], 0.0);
                    }
                }
            }
        }
        prop_assert_eq!(weighted_ce(&perturbed, &refs, &cfg(w)).unwrap().0, base);
    }

    #[test]
    fn loss_is_linear_in_class_weights((probs, maps, w) in batch()) {
        let refs: Vec<&ErrorLabelMap> = maps.iter().collect();
        let (l1, _) = weighted_ce(&probs, &refs, &cfg(w)).unwrap();
        let (l2, _) = weighted_ce(&probs, &refs, &cfg(w.map(|v| 2.0 * v))).unwrap();
        prop_assert!(l1 >= 0.0);
        prop_assert!((l2 - 2.0 * l1).abs() <= 1e-9 * l1.abs().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn perfect_predictions_score_near_zero((_, maps, w) in batch()) {
        let mut probs = vec![0.0; 72];
        for (n, m) in maps.iter().enumerate() {
            for (i, l) in m.labels().iter().enumerate() {
                probs[(n * 3 + l.index()) * 12 + i] = 1.0;
            }
        }
        let refs: Vec<&ErrorLabelMap> = maps.iter().collect();
        let t = Tensor::new(vec![2, 3, 3, 4], probs).unwrap();
        let (loss, _) = weighted_ce(&t, &refs, &cfg(w)).unwrap();
        prop_assert!(loss <= 1e-6);
    }
}
