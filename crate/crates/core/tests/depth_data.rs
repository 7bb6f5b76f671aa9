use depth_introspect::depth::{
    corrupt, discontinuities, generate_scene, read_depth, write_depth, CorruptionModel,
    DepthRaster, SceneConfig,
};
use proptest::prelude::*;

#[allow(clippy::needless_range_loop)]
fn plane_fit_max_residual(r: &DepthRaster) -> f64 {
    // normal equations for d = a + b·x + c·y
    let (w, _) = r.dims();
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    let rows: Vec<([f64; 3], f64)> = (0..r.len())
        .filter(|&i| r.is_valid(i))
        .map(|i| ([1.0, (i % w) as f64, (i / w) as f64], r.depths()[i]))
        .collect();
    for (a, b) in &rows {
        for i in 0..3 {
            atb[i] += a[i] * b;
            for j in 0..3 {
                ata[i][j] += a[i] * a[j];
            }
        }
    }
    // Gaussian elimination, 3x3 with partial pivoting
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&ata[i]);
        m[i][3] = atb[i];
    }
    for col in 0..3 {
        let p = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, p);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..3).map(|i| m[i][3] / m[i][i]).collect();
    rows.iter()
        .map(|(a, b)| (coef[0] + coef[1] * a[1] + coef[2] * a[2] - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_region_scene_is_one_plane() {
    let cfg = SceneConfig {
        regions: 1,
        ..SceneConfig::default()
    };
    for seed in 0..10 {
        let s = generate_scene(&cfg, seed).unwrap();
        let res = plane_fit_max_residual(&s.gt_depth);
        assert!(res < 1e-6, "seed {seed}: residual {res}");
    }
}

#[test]
fn depth_file_round_trip_on_generated_scene() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(&SceneConfig::default(), 5).unwrap();
    let path = dir.path().join("pred.png");
    write_depth(&s.pred_depth, &path).unwrap();
    let back = read_depth(&path).unwrap();
    assert_eq!(back.valid_mask(), s.pred_depth.valid_mask());
    for (a, b) in back.depths().iter().zip(s.pred_depth.depths()) {
        assert!((a - b).abs() <= 0.0005 + 1e-6);
    }
}

fn any_model() -> impl Strategy<Value = CorruptionModel> {
    prop_oneof![
        (0.0f64..1.0).prop_map(CorruptionModel::global_bias),
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(m, f)| CorruptionModel::region_offset(m, f)),
        (0.0f64..2.0, 1usize..4).prop_map(|(m, r)| CorruptionModel::boundary_erosion(m, r)),
        (0.0f64..0.5, 2usize..20).prop_map(|(m, c)| CorruptionModel::smooth_noise(m, c)),
        (0.0f64..0.5).prop_map(CorruptionModel::holes),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_valid_depth_within_configured_range(seed in any::<u64>(), regions in 1usize..12) {
        let cfg = SceneConfig { regions, multi_view: true, ..SceneConfig::default() };
        let s = generate_scene(&cfg, seed).unwrap();
        let second = s.second.unwrap();
        for r in [&s.gt_depth, &second.gt_depth] {
            prop_assert_eq!(r.valid_count(), r.len());
            prop_assert!(r.depths().iter().all(|d| (0.5..=10.0).contains(d)));
        }
    }

    #[test]
    fn corruption_never_resurrects_invalid_pixels(
        seed in any::<u64>(),
        models in prop::collection::vec(any_model(), 1..4),
    ) {
        let cfg = SceneConfig { gt_hole_fraction: 0.2, ..SceneConfig::default() };
        let gt = generate_scene(&cfg, seed).unwrap().gt_depth;
        let pred = corrupt(&gt, &models, seed ^ 0xabc).unwrap();
        for i in 0..gt.len() {
            if !gt.is_valid(i) {
                prop_assert!(!pred.is_valid(i));
                prop_assert_eq!(pred.depths()[i], 0.0);
            } else if pred.is_valid(i) {
                prop_assert!(pred.depths()[i] >= 0.05);
            }
        }
    }

    #[test]
    fn erosion_stays_near_discontinuities(seed in any::<u64>(), radius in 1usize..4, mag in 0.1f64..2.0) {
        let gt = generate_scene(&SceneConfig::default(), seed).unwrap().gt_depth;
        let pred = corrupt(&gt, &[CorruptionModel::boundary_erosion(mag, radius)], seed).unwrap();
        let edges = discontinuities(&gt);
        let w = gt.width() as isize;
        let h = gt.height() as isize;
        for i in 0..gt.len() {
            if pred.depths()[i] == gt.depths()[i] {
                continue;
            }
            let (x, y) = ((i as isize) % w, (i as isize) / w);
            let r = radius as isize;
            let near = (-r..=r).any(|dy| (-r..=r).any(|dx| {
                let (xx, yy) = (x + dx, y + dy);
                xx >= 0 && yy >= 0 && xx < w && yy < h && edges[(yy * w + xx) as usize]
            }));
            prop_assert!(near, "pixel ({x}, {y}) altered far from any discontinuity");
            prop_assert!((pred.depths()[i] - gt.depths()[i]).abs() <= mag + 1e-5);
        }
    }

    #[test]
    fn rgb_varies_less_within_regions_than_across(seed in any::<u64>()) {
        let s = generate_scene(&SceneConfig::default(), seed).unwrap();
        let labels = &s.region_map;
        let count = labels.iter().max().unwrap() + 1;
        prop_assume!(labels.iter().min() != labels.iter().max());
        let (w, h) = s.rgb.dims();
        let mut sums = vec![[0.0f64; 3]; count];
        let mut sq = vec![0.0f64; count];
        let mut n = vec![0usize; count];
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                let p = s.rgb.pixel(x, y);
                for c in 0..3 {
                    sums[l][c] += p[c] as f64;
                    sq[l] += (p[c] as f64).powi(2);
                }
                n[l] += 1;
            }
        }
        let total: usize = n.iter().sum();
        let means: Vec<[f64; 3]> = (0..count).map(|l| sums[l].map(|s| s / n[l].max(1) as f64)).collect();
        let within: f64 = (0..count)
            .map(|l| sq[l] - n[l] as f64 * means[l].iter().map(|m| m * m).sum::<f64>())
            .sum::<f64>() / total as f64;
        let grand: Vec<f64> = (0..3).map(|c| sums.iter().map(|s| s[c]).sum::<f64>() / total as f64).collect();
        let across: f64 = (0..count)
            .map(|l| n[l] as f64 * (0..3).map(|c| (means[l][c] - grand[c]).powi(2)).sum::<f64>())
            .sum::<f64>() / total as f64;
        prop_assert!(within < across, "within {within} vs across {across}");
    }
}
