use depth_introspect::dedn::{
    pretrain_distill, Ablation, DednConfig, DednModel, DistillConfig, EncoderBranch, ViewTensors,
};
use depth_introspect::depth::{generate_scene, SceneConfig};
use depth_introspect::tensor::{gradcheck, GradcheckConfig, Layer, LayerSpec, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn views<S: depth_introspect::tensor::Scalar>(
    cfg: &DednConfig,
    n: usize,
    seed: u64,
) -> Vec<ViewTensors<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_views)
        .map(|_| ViewTensors {
            rgb: Tensor::from_fn(&[n, 3, cfg.height, cfg.width], |_| {
                S::from_f64_lossy(rng.random_range(0.0..1.0))
            }),
            depth: Tensor::from_fn(&[n, 1, cfg.height, cfg.width], |_| {
                S::from_f64_lossy(rng.random_range(0.05..1.0))
            }),
        })
        .collect()
}

fn flat(views: &[ViewTensors<f64>]) -> Vec<Tensor<f64>> {
    views
        .iter()
        .flat_map(|v| [v.rgb.clone(), v.depth.clone()])
        .collect()
}

#[test]
fn full_toy_model_passes_gradcheck_at_8x8() {
    for n_views in [1, 2] {
        let cfg = DednConfig::toy(n_views);
        let mut model = DednModel::<f64>::new(cfg.clone(), 11).unwrap();
        // batch 4: with only two samples the 1×1 bottleneck batchnorm normalizes
        // pairs of values and finite differences become ill-conditioned
        let inputs = flat(&views(&cfg, 4, 5));
        let check = GradcheckConfig {
            max_entries_per_block: 24,
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&mut model, &inputs, &check).unwrap();
        assert!(
            report.passed(),
            "{n_views} views: max rel error {:e}: {:?}",
            report.max_rel_error(),
            report.blocks
        );
    }
}

#[test]
fn encoder_weights_are_shared_across_view_slots() {
    let cfg = DednConfig {
        n_views: 2,
        ..DednConfig::toy(2)
    };
    let model = DednModel::<f32>::new(cfg.clone(), 3).unwrap();
    let v = views::<f32>(&cfg, 1, 9);
    let ab = model.embeddings(&v).unwrap();
    let ba = model.embeddings(&[v[1].clone(), v[0].clone()]).unwrap();
    assert_eq!(ab[0].data(), ba[1].data());
    assert_eq!(ab[1].data(), ba[0].data());
}

#[test]
fn every_skip_connection_carries_signal() {
    let cfg = DednConfig {
        width: 16,
        height: 16,
        ..DednConfig::toy(1)
    };
    let model = DednModel::<f64>::new(cfg.clone(), 4).unwrap();
    let v = views::<f64>(&cfg, 1, 2);
    let base = model.eval(&v).unwrap();
    for s in 0..cfg.stages() - 1 {
        let ablated = model
            .eval_ablated(
                &v,
                &Ablation {
                    zero_skip: Some(s),
                    ..Ablation::default()
                },
            )
            .unwrap();
        assert_ne!(ablated.data(), base.data(), "skip {s} is dead");
    }
    assert!(model
        .eval_ablated(
            &v,
            &Ablation {
                zero_skip: Some(cfg.stages()),
                ..Ablation::default()
            }
        )
        .is_err());
}

#[test]
fn zeroed_second_embedding_leaves_a_function_of_view_one() {
    let cfg = DednConfig::toy(2);
    let model = DednModel::<f64>::new(cfg.clone(), 8).unwrap();
    let a = views::<f64>(&cfg, 1, 1);
    let b = views::<f64>(&cfg, 1, 2);
    let zero = Ablation {
        zero_second_embedding: true,
        ..Ablation::default()
    };
    let with_b = model
        .eval_ablated(&[a[0].clone(), b[1].clone()], &zero)
        .unwrap();
    let with_c = model
        .eval_ablated(&[a[0].clone(), b[0].clone()], &zero)
        .unwrap();
    assert_eq!(with_b.data(), with_c.data());
    let live = model.eval(&[a[0].clone(), b[1].clone()]).unwrap();
    assert_ne!(live.data(), with_b.data());
}

#[test]
fn duplicated_view_gives_a_valid_map() {
    let cfg = DednConfig::toy(2);
    let model = DednModel::<f64>::new(cfg.clone(), 8).unwrap();
    let a = views::<f64>(&cfg, 2, 1);
    let out = model.eval(&[a[0].clone(), a[0].clone()]).unwrap();
    let p = cfg.width * cfg.height;
    for n in 0..2 {
        for i in 0..p {
            let s: f64 = (0..3).map(|c| out.data()[(n * 3 + c) * p + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

fn flip_w(t: &Tensor<f64>) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let w = shape[3];
    Tensor::from_fn(&shape, |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

/// Mirrors every 3×3 kernel left-right and averages, making convolutions flip-symmetric.
fn symmetrize(layer: &mut Layer<f64>) {
    for p in layer.params_mut() {
        if p.shape().len() == 4 && p.shape()[3] == 3 {
            let flipped = flip_w(p);
            for (a, b) in p.data_mut().iter_mut().zip(flipped.data()) {
                *a = 0.5 * (*a + b);
            }
        }
    }
}

fn run(layers: &[Layer<f64>], x: &Tensor<f64>) -> Tensor<f64> {
    layers
        .iter()
        .fold(x.clone(), |cur, l| l.eval(&[&cur]).unwrap())
}

#[test]
fn symmetric_kernels_make_stride_one_paths_flip_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let specs = [
        LayerSpec::conv3x3(3, 4),
        LayerSpec::batchnorm(4),
        LayerSpec::leaky_relu(4),
        LayerSpec::residual(4),
        LayerSpec::upsample(4),
        LayerSpec::conv3x3(4, 3),
        LayerSpec::softmax(3),
    ];
    let mut layers: Vec<Layer<f64>> = specs
        .iter()
        .map(|s| Layer::new(s, &mut rng).unwrap())
        .collect();
    layers.iter_mut().for_each(symmetrize);
    let x = Tensor::from_fn(&[2, 3, 5, 6], |_| rng.random_range(-1.0..1.0));
    // run once in training mode so batchnorm has non-trivial running statistics
    let mut cur = x.clone();
    for l in layers.iter_mut() {
        cur = l.forward(&[&cur], Mode::Train).unwrap();
    }
    layers.iter_mut().for_each(Layer::clear_records);
    let direct = run(&layers, &x);
    let via_flip = flip_w(&run(&layers, &flip_w(&x)));
    for (a, b) in direct.data().iter().zip(via_flip.data()) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn symmetric_downsample_is_flip_equivariant_at_odd_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut down = Layer::<f64>::new(&LayerSpec::downsample(2, 3), &mut rng).unwrap();
    symmetrize(&mut down);
    let x = Tensor::from_fn(&[1, 2, 7, 9], |_| rng.random_range(-1.0..1.0));
    let direct = down.eval(&[&x]).unwrap();
    let via_flip = flip_w(&down.eval(&[&flip_w(&x)]).unwrap());
    for (a, b) in direct.data().iter().zip(via_flip.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

fn conv(i: usize, o: usize) -> usize {
    9 * i * o + o
}

fn closed_form_params(cfg: &DednConfig) -> (usize, usize) {
    let ch = &cfg.channels;
    let b = cfg.blocks_per_stage;
    let residual = |c: usize| 2 * conv(c, c) + 4 * c;
    let branch = |input: usize| {
        let mut prev = input;
        ch.iter()
            .map(|&c| {
                let n = conv(prev, c) + 2 * c + b * residual(c);
                prev = c;
                n
            })
            .sum::<usize>()
    };
    let merges: usize = ch.iter().map(|&c| conv(2 * c, c)).sum();
    let mut decoder = 0;
    for s in 0..ch.len() - 1 {
        decoder += conv(ch[s + 1] + ch[s], ch[s]) + 2 * ch[s];
    }
    decoder += conv(ch[0] + 4, ch[0]) + 2 * ch[0] + conv(ch[0], 3);
    let last = *ch.last().unwrap();
    (
        branch(3) + branch(1) + merges + decoder,
        conv(2 * last, last),
    )
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [DednConfig::default(), DednConfig::toy(1)] {
        let (single, fusion) = closed_form_params(&cfg);
        let s = DednModel::<f32>::new(cfg.clone(), 0).unwrap().describe();
        assert_eq!(s.total_params, single);
        assert_eq!(s.fusion_params, 0);
        let m = DednModel::<f32>::new(
            DednConfig {
                n_views: 2,
                ..cfg.clone()
            },
            0,
        )
        .unwrap()
        .describe();
        assert_eq!(m.fusion_params, fusion);
        assert_eq!(m.total_params, single + fusion);
        assert!(s.to_string().contains(&format!("total_params={single}")));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = DednConfig {
        width: 16,
        height: 16,
        ..DednConfig::toy(2)
    };
    let mut model = DednModel::<f32>::new(cfg.clone(), 21).unwrap();
    let v = views::<f32>(&cfg, 2, 3);
    // update batchnorm running statistics so they are part of the round trip
    model.forward(&v, Mode::Train).unwrap();
    model.clear_records();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = DednModel::load(cfg.clone(), &path).unwrap();
    assert_eq!(
        model.eval(&v).unwrap().data(),
        loaded.eval(&v).unwrap().data()
    );
    let other = DednConfig {
        channels: vec![2, 3, 5],
        ..cfg
    };
    assert!(DednModel::load(other, &path).is_err());
}

fn pairs(n: usize, seed: u64) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    let cfg = SceneConfig {
        width: 16,
        height: 16,
        ..SceneConfig::default()
    };
    (0..n)
        .map(|i| {
            let s = generate_scene(&cfg, seed + i as u64).unwrap();
            let v = ViewTensors::<f32>::from_images(&s.rgb, &s.pred_depth, 10.0).unwrap();
            (v.rgb, v.depth)
        })
        .collect()
}

#[test]
fn distilling_a_branch_against_itself_starts_at_zero() {
    let teacher = EncoderBranch::<f32>::new(3, &[4, 6], 1, 0.01, 5).unwrap();
    let mut student = teacher.clone();
    let data: Vec<_> = pairs(4, 1)
        .into_iter()
        .map(|(rgb, _)| (rgb.clone(), rgb))
        .collect();
    let curve = pretrain_distill(
        &mut student,
        &teacher,
        &data,
        &DistillConfig {
            epochs: 0,
            ..DistillConfig::default()
        },
    )
    .unwrap();
    assert_eq!(curve, vec![0.0]);
}

#[test]
fn distillation_reduces_held_out_loss_and_freezes_teacher() {
    let teacher = EncoderBranch::<f32>::new(3, &[4, 6], 1, 0.01, 5).unwrap();
    let frozen = format!("{:?}", teacher);
    let mut student = EncoderBranch::<f32>::new(1, &[4, 6], 1, 0.01, 6).unwrap();
    let train = pairs(64, 0);
    let held_out = pairs(16, 1000);
    let cfg = DistillConfig {
        epochs: 0,
        ..DistillConfig::default()
    };
    let before = pretrain_distill(&mut student.clone(), &teacher, &held_out, &cfg).unwrap()[0];
    let curve = pretrain_distill(
        &mut student,
        &teacher,
        &train,
        &DistillConfig {
            epochs: 10,
            learning_rate: 3e-2,
            ..DistillConfig::default()
        },
    )
    .unwrap();
    assert_eq!(curve.len(), 11);
    let after = pretrain_distill(&mut student.clone(), &teacher, &held_out, &cfg).unwrap()[0];
    assert!(after < before, "held-out loss {before} -> {after}");
    assert_eq!(format!("{:?}", teacher), frozen);
}

#[test]
fn unpaired_distillation_input_is_rejected() {
    let teacher = EncoderBranch::<f32>::new(3, &[4], 1, 0.01, 5).unwrap();
    let mut student = EncoderBranch::<f32>::new(1, &[4], 1, 0.01, 6).unwrap();
    let mut data = pairs(2, 1);
    data[1].1 = Tensor::zeros(&[1, 1, 8, 8]);
    assert!(pretrain_distill(&mut student, &teacher, &data, &DistillConfig::default()).is_err());
}
