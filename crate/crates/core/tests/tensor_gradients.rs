use depth_introspect::tensor::{
    gradcheck, Fragment, GradcheckConfig, Layer, LayerKind, LayerSpec, Mode, Result, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn spec_for(kind: LayerKind, c: usize) -> LayerSpec {
    match kind {
        LayerKind::Conv3x3 => LayerSpec::conv3x3(c, c + 1),
        LayerKind::DownsampleStride2 => LayerSpec::downsample(c, c + 2),
        LayerKind::ResidualBlock => LayerSpec::residual(c),
        LayerKind::UpsampleNearest2x => LayerSpec::upsample(c),
        LayerKind::BatchNorm => LayerSpec::batchnorm(c),
        LayerKind::LeakyRelu => LayerSpec::leaky_relu(c),
        LayerKind::Sigmoid => LayerSpec::sigmoid(c),
        LayerKind::SoftmaxChannels => LayerSpec::softmax(c),
        LayerKind::ConcatChannels => LayerSpec::concat(&[c, 2]),
        LayerKind::MseHead => LayerSpec::mse_head(c),
    }
}

#[test]
fn every_layer_kind_passes_finite_differences_on_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shapes = [(1, 2, 4, 4), (2, 3, 5, 6), (3, 1, 8, 2)];
    let cfg = GradcheckConfig::default();
    for kind in LayerKind::ALL {
        for &(n, c, h, w) in &shapes {
            let spec = spec_for(kind, c);
            let mut layer = Layer::<f64>::new(&spec, &mut rng).unwrap();
            let inputs = match kind {
                LayerKind::ConcatChannels => vec![
                    random(&[n, c, h, w], &mut rng),
                    random(&[n, 2, h, w], &mut rng),
                ],
                LayerKind::MseHead => vec![
                    random(&[n, c, h, w], &mut rng),
                    random(&[n, c, h, w], &mut rng),
                ],
                _ => vec![random(&[n, c, h, w], &mut rng)],
            };
            let report = gradcheck(&mut layer, &inputs, &cfg).unwrap();
            assert!(
                report.passed(),
                "{} on {:?}: max rel error {:e} ({:?})",
                kind.name(),
                (n, c, h, w),
                report.max_rel_error(),
                report.blocks
            );
        }
    }
}

#[test]
fn batchnorm_2x4x5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bn = Layer::<f64>::new(&LayerSpec::batchnorm(4), &mut rng).unwrap();
    let x = random(&[2, 4, 5, 5], &mut rng);
    let report = gradcheck(&mut bn, &[x], &GradcheckConfig::default()).unwrap();
    assert!(report.passed());
    assert!(report.max_rel_error() <= 1e-3);
}

struct TwoConvs {
    a: Layer<f64>,
    b: Layer<f64>,
}

impl Fragment<f64> for TwoConvs {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let h = self.a.forward(&[&inputs[0]], Mode::Train)?;
        self.b.forward(&[&h], Mode::Train)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let g = self.b.backward(grad)?;
        self.a.backward(&g[0])
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = self.a.params_mut();
        v.extend(self.b.params_mut());
        v
    }
    fn clear_records(&mut self) {
        self.a.clear_records();
        self.b.clear_records();
    }
}

#[test]
fn chain_of_two_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut frag = TwoConvs {
        a: Layer::new(&LayerSpec::conv3x3(2, 3), &mut rng).unwrap(),
        b: Layer::new(&LayerSpec::conv3x3(3, 2), &mut rng).unwrap(),
    };
    let x = random(&[2, 2, 6, 5], &mut rng);
    let report = gradcheck(&mut frag, &[x], &GradcheckConfig::default()).unwrap();
    assert_eq!(report.blocks.len(), 5);
    assert!(report.passed(), "{:?}", report.blocks);
}

struct Identity;

impl Fragment<f64> for Identity {
    fn forward(&mut self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].clone())
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![grad.clone()])
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        Vec::new()
    }
    fn clear_records(&mut self) {}
}

#[test]
fn identity_fragment_has_empty_passing_report() {
    let cfg = GradcheckConfig {
        check_inputs: false,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&mut Identity, &[Tensor::zeros(&[1, 1, 2, 2])], &cfg).unwrap();
    assert!(report.blocks.is_empty());
    assert!(report.passed());
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Layer::<f32>::new(&LayerSpec::residual(4), &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 4, 8, 8], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
    let a = layer.eval(&[&x]).unwrap();
    let b = layer.eval(&[&x]).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-30.0f32..30.0, 3 * 12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::<f32>::new(&LayerSpec::softmax(3), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 3, 3, 4], vals).unwrap();
        let y = layer.eval(&[&x]).unwrap();
        for p in 0..12 {
            let s: f64 = (0..3).map(|c| y.data()[c * 12 + p] as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for c in 0..3 {
                let v = y.data()[c * 12 + p];
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn upsample_then_average_pool_is_identity(vals in prop::collection::vec(-100.0f32..100.0, 2 * 3 * 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::<f32>::new(&LayerSpec::upsample(2), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 2, 3, 5], vals).unwrap();
        let y = layer.eval(&[&x]).unwrap();
        let (h, w) = (3, 5);
        for c in 0..2 {
            for r in 0..h {
                for q in 0..w {
                    let at = |yy: usize, xx: usize| y.data()[c * 4 * h * w + yy * 2 * w + xx];
                    let avg = (at(2 * r, 2 * q) + at(2 * r, 2 * q + 1) + at(2 * r + 1, 2 * q) + at(2 * r + 1, 2 * q + 1)) / 4.0;
                    prop_assert_eq!(avg, x.data()[c * h * w + r * w + q]);
                }
            }
        }
    }
}
