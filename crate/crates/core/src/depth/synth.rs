//! Procedural piecewise-planar RGB-D scenes.
//!
//! A scene is a Voronoi partition of the image plane; every cell carries a
//! depth plane (affine in pixel coordinates) and an albedo colour of fixed
//! luminance. Shading combines the surface slope with a headlight falloff, so
//! image brightness carries information about absolute depth.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{corrupt, CorruptionModel, DepthRaster, RgbImage};
use crate::error::{Error, Result};

const ALBEDO_LUMINANCE: f64 = 0.75;
const MAX_SLOPE: f64 = 1.5;
/// Horizontal camera translation of the second view, as a fraction of width.
pub const SECOND_VIEW_SHIFT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub regions: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub multi_view: bool,
    /// Fraction of ground-truth pixels dropped as sensor holes.
    pub gt_hole_fraction: f64,
    pub corruption: Vec<CorruptionModel>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            regions: 6,
            depth_min: 0.5,
            depth_max: 10.0,
            multi_view: false,
            gt_hole_fraction: 0.0,
            corruption: vec![
                CorruptionModel::region_offset(0.3, 0.6),
                CorruptionModel::boundary_erosion(1.0, 2),
            ],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {}x{} must be positive",
                self.width, self.height
            )));
        }
        if self.regions == 0 {
            return Err(Error::InvalidConfig(
                "region count must be at least 1".into(),
            ));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max && self.depth_max.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "depth range [{}, {}] is invalid",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..1.0).contains(&self.gt_hole_fraction) {
            return Err(Error::InvalidConfig(
                "gt_hole_fraction must be in [0, 1)".into(),
            ));
        }
        if self.corruption.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one corruption model is required".into(),
            ));
        }
        self.corruption
            .iter()
            .try_for_each(CorruptionModel::validate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondView {
    pub rgb: RgbImage,
    pub gt_depth: DepthRaster,
    pub pred_depth: DepthRaster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub rgb: RgbImage,
    pub gt_depth: DepthRaster,
    pub pred_depth: DepthRaster,
    pub second: Option<SecondView>,
    /// Index of the scene cell seen at each first-view pixel.
    pub region_map: Vec<usize>,
    /// Corruption models applied to produce `pred_depth`, in order.
    pub corruption: Vec<CorruptionModel>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct Cell {
    cx: f64,
    cy: f64,
    /// depth = base + slope_x·(u − ½) + slope_y·(v − ½), u, v in image-normalized units
    base: f64,
    slope_x: f64,
    slope_y: f64,
    albedo: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

struct Scene {
    cells: Vec<Cell>,
    width: usize,
    height: usize,
}

impl Scene {
    fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let shift = SECOND_VIEW_SHIFT * w;
        let (lo, hi) = (cfg.depth_min, cfg.depth_max);
        let cells = (0..cfg.regions)
            .map(|_| {
                let cx = rng.random_range(0.0..w + shift);
                let cy = rng.random_range(0.0..h);
                // log-uniform base depth: indoor scenes are denser near the camera
                let base = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
                let mut slope_x = rng.random_range(-MAX_SLOPE..MAX_SLOPE);
                let mut slope_y = rng.random_range(-MAX_SLOPE..MAX_SLOPE);
                // u spans [-0.5, 0.5 + shift fraction] over both views; keep every pixel in range
                let reach = slope_x.abs() * (0.5 + SECOND_VIEW_SHIFT) + slope_y.abs() * 0.5;
                let slack = (base - lo).min(hi - base);
                if reach > slack {
                    let k = slack / reach;
                    slope_x *= k;
                    slope_y *= k;
                }
                let hue = rng.random::<f64>();
                let sat = rng.random_range(0.2..0.7);
                let raw = hsv_to_rgb(hue, sat, 1.0);
                let k = ALBEDO_LUMINANCE / luminance(raw);
                let albedo = raw.map(|c| (c * k).min(1.0));
                Cell {
                    cx,
                    cy,
                    base,
                    slope_x,
                    slope_y,
                    albedo,
                }
            })
            .collect();
        Self {
            cells,
            width: cfg.width,
            height: cfg.height,
        }
    }

    fn cell_at(&self, px: f64, py: f64) -> usize {
        (0..self.cells.len())
            .min_by(|&a, &b| {
                let (a, b) = (&self.cells[a], &self.cells[b]);
                let da = (a.cx - px).powi(2) + (a.cy - py).powi(2);
                let db = (b.cx - px).powi(2) + (b.cy - py).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one cell")
    }

    /// Renders the view whose pixel (x, y) sees scene point (x + ½ + offset, y + ½).
    fn render(&self, offset: f64, lo: f64, hi: f64) -> (RgbImage, Vec<f64>, Vec<usize>) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let mut planes = vec![0.0f32; 3 * n];
        let mut depth = vec![0.0f64; n];
        let mut cell_ids = vec![0usize; n];
        let (wf, hf) = (w as f64, h as f64);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 + offset, y as f64 + 0.5);
                let i = y * w + x;
                cell_ids[i] = self.cell_at(px, py);
                let c = &self.cells[cell_ids[i]];
                let d = (c.base + c.slope_x * (px / wf - 0.5) + c.slope_y * (py / hf - 0.5))
                    .clamp(lo, hi);
                depth[i] = d;
                // metric surface slopes with focal length = image width
                let sx = c.slope_x / d;
                let sy = c.slope_y * wf / (hf * d);
                let nz = 1.0 / (1.0 + sx * sx + sy * sy).sqrt();
                let shade = (0.25 + 0.75 * nz) / (1.0 + d / 3.0);
                for ch in 0..3 {
                    planes[ch * n + i] = (c.albedo[ch] * shade).clamp(0.0, 1.0) as f32;
                }
            }
        }
        (
            RgbImage::from_planes(w, h, planes).expect("rendered intensities are in range"),
            depth,
            cell_ids,
        )
    }
}

fn with_holes(
    w: usize,
    h: usize,
    mut depth: Vec<f64>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DepthRaster> {
    if fraction > 0.0 {
        for d in depth.iter_mut() {
            if rng.random_bool(fraction) {
                *d = 0.0;
            }
        }
    }
    DepthRaster::from_depths(w, h, depth)
}

/// Generates one RGB-D sample with its corrupted prediction; deterministic in `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(cfg, &mut rng);
    let (w, h) = (cfg.width, cfg.height);
    let (lo, hi) = (cfg.depth_min, cfg.depth_max);

    let (rgb, depth, region_map) = scene.render(0.0, lo, hi);
    let gt_depth = with_holes(w, h, depth, cfg.gt_hole_fraction, &mut rng)?;
    let pred_depth = corrupt(&gt_depth, &cfg.corruption, rng.next_u64())?;

    let second = if cfg.multi_view {
        let (rgb2, depth2, _) = scene.render(SECOND_VIEW_SHIFT * w as f64, lo, hi);
        let gt2 = with_holes(w, h, depth2, cfg.gt_hole_fraction, &mut rng)?;
        let pred2 = corrupt(&gt2, &cfg.corruption, rng.next_u64())?;
        Some(SecondView {
            rgb: rgb2,
            gt_depth: gt2,
            pred_depth: pred2,
        })
    } else {
        None
    };

    Ok(SceneSample {
        rgb,
        gt_depth,
        pred_depth,
        second,
        region_map,
        corruption: cfg.corruption.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SceneConfig {
            multi_view: true,
            ..SceneConfig::default()
        };
        assert_eq!(
            generate_scene(&cfg, 9).unwrap(),
            generate_scene(&cfg, 9).unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, 9).unwrap().gt_depth,
            generate_scene(&cfg, 10).unwrap().gt_depth
        );
    }

    #[test]
    fn degenerate_configs_rejected() {
        for cfg in [
            SceneConfig {
                regions: 0,
                ..SceneConfig::default()
            },
            SceneConfig {
                width: 0,
                ..SceneConfig::default()
            },
            SceneConfig {
                corruption: vec![],
                ..SceneConfig::default()
            },
        ] {
            assert!(matches!(
                generate_scene(&cfg, 1),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn second_view_present_iff_multi_view() {
        let single = generate_scene(&SceneConfig::default(), 3).unwrap();
        assert!(single.second.is_none());
        // width 60 makes the 5% shift exactly three pixels
        let multi = generate_scene(
            &SceneConfig {
                multi_view: true,
                width: 60,
                ..SceneConfig::default()
            },
            3,
        )
        .unwrap();
        let second = multi.second.unwrap();
        assert_eq!(second.gt_depth.dims(), multi.gt_depth.dims());
        // pure horizontal translation: view-2 column x sees view-1 column x + shift
        let shift = 3;
        let (a, b) = (multi.gt_depth.depths(), second.gt_depth.depths());
        let same = (0..64)
            .flat_map(|y| (0..60 - shift).map(move |x| (y, x)))
            .filter(|&(y, x)| a[y * 60 + x + shift] == b[y * 60 + x])
            .count();
        assert_eq!(same, 64 * (60 - shift));
    }
}
