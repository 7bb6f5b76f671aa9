use depth_introspect::decn::{
    correct_iterative, correct_once, CorrectionConfig, ErrorDetector, OracleDetector,
};
use depth_introspect::depth::{
    generate_scene, CorruptionModel, DepthRaster, RgbImage, SceneConfig,
};
use depth_introspect::labeling::{ErrorClass, ErrorProbabilityMap, LabelerConfig};
use depth_introspect::Result;
use proptest::prelude::*;

fn scene(seed: u64) -> depth_introspect::depth::SceneSample {
    let cfg = SceneConfig {
        width: 32,
        height: 32,
        gt_hole_fraction: 0.05,
        corruption: vec![
            CorruptionModel::region_offset(0.3, 0.6),
            CorruptionModel::boundary_erosion(1.0, 2),
            CorruptionModel::smooth_noise(0.2, 8),
        ],
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_correction_is_monotone_and_converges_into_the_band(seed in 0u64..10_000) {
        let s = scene(seed);
        let oracle = OracleDetector { gt: &s.gt_depth, labeler: LabelerConfig::default() };
        let cfg = CorrectionConfig { iterations: 500, ..CorrectionConfig::default() };
        let r = correct_iterative(&oracle, &[(&s.rgb, &s.pred_depth)], Some(&s.gt_depth), &cfg).unwrap();
        prop_assert!(r.converged);
        let rmse: Vec<f64> = r.trace.iter().map(|e| e.metrics.unwrap().rmse).collect();
        for (k, w) in rmse.windows(2).enumerate() {
            prop_assert!(w[1] <= w[0], "iteration {}: {} -> {}", k + 1, w[0], w[1]);
            if r.trace[k + 1].adjusted > 0 {
                prop_assert!(w[1] < w[0]);
            }
        }
        for i in 0..s.gt_depth.len() {
            if r.depth.is_valid(i) && s.gt_depth.is_valid(i) {
                prop_assert!((r.depth.depths()[i] - s.gt_depth.depths()[i]).abs() <= 0.1);
            }
        }
        prop_assert_eq!(r.depth.valid_mask(), s.pred_depth.valid_mask());
    }

    #[test]
    fn one_pass_moves_only_confident_pixels_by_at_most_a_step(
        seed in 0u64..1000,
        raw in prop::collection::vec(prop::array::uniform3(0.0f32..1.0), 1024),
    ) {
        let s = scene(seed);
        let mut planes = vec![0.0f32; 3 * 1024];
        for (i, p) in raw.iter().enumerate() {
            let sum: f32 = p.iter().sum::<f32>().max(1e-6);
            for c in 0..3 {
                planes[c * 1024 + i] = p[c] / sum;
            }
        }
        let probs = ErrorProbabilityMap::new(32, 32, planes).unwrap();
        let cfg = CorrectionConfig::default();
        let pass = correct_once(&s.pred_depth, &probs, &cfg).unwrap();
        for i in 0..1024 {
            let (a, b) = (s.pred_depth.depths()[i], pass.depth.depths()[i]);
            prop_assert!((a - b).abs() <= cfg.step + 1e-12);
            let confident = [ErrorClass::Under, ErrorClass::Over]
                .iter()
                .any(|&c| probs.prob(c, i) as f64 > cfg.confidence_threshold);
            if a != b {
                prop_assert!(confident && s.pred_depth.is_valid(i));
            }
        }
    }
}

/// Detector that reports uniform probabilities and counts calls.
struct Unsure(std::cell::Cell<usize>);

impl ErrorDetector for Unsure {
    fn detect(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<ErrorProbabilityMap> {
        self.0.set(self.0.get() + 1);
        let (w, h) = views[0].1.dims();
        ErrorProbabilityMap::uniform(w, h)
    }
}

#[test]
fn fixed_point_returns_input_bit_identically() {
    let s = scene(3);
    let unsure = Unsure(Default::default());
    let r = correct_iterative(
        &unsure,
        &[(&s.rgb, &s.pred_depth)],
        None,
        &CorrectionConfig::default(),
    )
    .unwrap();
    assert_eq!(r.depth, s.pred_depth);
    assert!(r.converged);
    assert_eq!(r.iterations_run(), 1);
    assert_eq!(unsure.0.get(), 1);
    assert!(r.trace.iter().all(|e| e.metrics.is_none()));
}

#[test]
fn iteration_budget_is_respected() {
    let s = scene(4);
    let oracle = OracleDetector {
        gt: &s.gt_depth,
        labeler: LabelerConfig::default(),
    };
    let cfg = CorrectionConfig {
        iterations: 3,
        ..CorrectionConfig::default()
    };
    let r =
        correct_iterative(&oracle, &[(&s.rgb, &s.pred_depth)], Some(&s.gt_depth), &cfg).unwrap();
    assert_eq!(r.iterations_run(), 3);
    assert!(!r.converged);
}
