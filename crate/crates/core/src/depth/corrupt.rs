//! Synthetic "depth predictor" errors applied to ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DepthRaster, DEPTH_FLOOR};
use crate::error::{Error, Result};

/// Neighbouring depths differing by more than this (meters) form a discontinuity.
pub const EDGE_THRESHOLD: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Every pixel shifted by `magnitude` (away from the camera unless `nearer`).
    GlobalBias,
    /// A `fraction` of planar regions shifted by ±`magnitude`·U(0.5, 1.5).
    RegionOffset,
    /// Depth smeared across discontinuities within `radius` pixels, displacement capped at `magnitude`.
    BoundaryErosion,
    /// Bilinear low-frequency noise in [-magnitude, magnitude] on a grid of `cell` pixels.
    SmoothNoise,
    /// A `fraction` of pixels dropped.
    Holes,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_radius() -> usize {
    2
}

fn default_cell() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionModel {
    pub kind: CorruptionKind,
    #[serde(default)]
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_cell")]
    pub cell: usize,
    #[serde(default)]
    pub nearer: bool,
}

impl CorruptionModel {
    pub fn new(kind: CorruptionKind, magnitude: f64) -> Self {
        Self {
            kind,
            magnitude,
            seed: 0,
            fraction: default_fraction(),
            radius: default_radius(),
            cell: default_cell(),
            nearer: false,
        }
    }

    pub fn global_bias(magnitude: f64) -> Self {
        Self::new(CorruptionKind::GlobalBias, magnitude)
    }

    pub fn region_offset(magnitude: f64, fraction: f64) -> Self {
        Self {
            fraction,
            ..Self::new(CorruptionKind::RegionOffset, magnitude)
        }
    }

    pub fn boundary_erosion(magnitude: f64, radius: usize) -> Self {
        Self {
            radius,
            ..Self::new(CorruptionKind::BoundaryErosion, magnitude)
        }
    }

    pub fn smooth_noise(magnitude: f64, cell: usize) -> Self {
        Self {
            cell,
            ..Self::new(CorruptionKind::SmoothNoise, magnitude)
        }
    }

    pub fn holes(fraction: f64) -> Self {
        Self {
            fraction,
            ..Self::new(CorruptionKind::Holes, 0.0)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "corruption magnitude {} must be >= 0",
                self.magnitude
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidConfig(format!(
                "corruption fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if self.radius == 0 || self.cell == 0 {
            return Err(Error::InvalidConfig(
                "corruption radius and cell must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Marks valid pixels with a valid 4-neighbour more than [`EDGE_THRESHOLD`] away in depth.
pub fn discontinuities(gt: &DepthRaster) -> Vec<bool> {
    let (w, h) = gt.dims();
    let d = gt.depths();
    (0..w * h)
        .map(|i| {
            gt.is_valid(i)
                && neighbours(i, w, h)
                    .any(|j| gt.is_valid(j) && (d[i] - d[j]).abs() > EDGE_THRESHOLD)
        })
        .collect()
}

/// Connected components of valid pixels joined across depth steps of at most
/// [`EDGE_THRESHOLD`]. Invalid pixels get `usize::MAX`. Returns (labels, count).
pub fn segment_regions(gt: &DepthRaster) -> (Vec<usize>, usize) {
    let (w, h) = gt.dims();
    let d = gt.depths();
    let mut labels = vec![usize::MAX; w * h];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !gt.is_valid(start) || labels[start] != usize::MAX {
            continue;
        }
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in neighbours(i, w, h) {
                if gt.is_valid(j)
                    && labels[j] == usize::MAX
                    && (d[i] - d[j]).abs() <= EDGE_THRESHOLD
                {
                    labels[j] = count;
                    stack.push(j);
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

fn mix(seed: u64, model_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z =
        seed ^ model_seed.rotate_left(17) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies `models` in order to a copy of `gt`. Invalid pixels never become
/// valid again; valid depths are clamped to at least [`DEPTH_FLOOR`].
pub fn corrupt(gt: &DepthRaster, models: &[CorruptionModel], seed: u64) -> Result<DepthRaster> {
    if models.is_empty() {
        return Err(Error::InvalidConfig(
            "corruption model list is empty".into(),
        ));
    }
    for m in models {
        m.validate()?;
    }
    let (w, h) = gt.dims();
    let mut out = gt.clone();
    for (idx, model) in models.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, model.seed, idx));
        let mag = model.magnitude;
        match model.kind {
            CorruptionKind::GlobalBias => {
                let delta = if model.nearer { -mag } else { mag };
                shift_valid(&mut out, |_| delta);
            }
            CorruptionKind::RegionOffset => {
                let (labels, count) = segment_regions(gt);
                let offsets: Vec<f64> = (0..count)
                    .map(|_| {
                        let hit = rng.random_bool(model.fraction);
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let scale: f64 = rng.random_range(0.5..1.5);
                        if hit {
                            sign * mag * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                shift_valid(&mut out, |i| match labels[i] {
                    usize::MAX => 0.0,
                    l => offsets[l],
                });
            }
            CorruptionKind::BoundaryErosion => {
                let r = model.radius;
                let band = dilate(&discontinuities(gt), w, h, r);
                let src = out.clone();
                let d = src.depths();
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        if !band[i] || !src.is_valid(i) {
                            continue;
                        }
                        let (mut sum, mut n) = (0.0f64, 0usize);
                        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                                let j = yy * w + xx;
                                if src.is_valid(j) {
                                    sum += d[j];
                                    n += 1;
                                }
                            }
                        }
                        let blurred = sum / n as f64;
                        let delta = (blurred - d[i]).clamp(-mag, mag);
                        out.set(i, (d[i] + delta).max(DEPTH_FLOOR));
                    }
                }
            }
            CorruptionKind::SmoothNoise => {
                let cell = model.cell;
                let gw = w.div_ceil(cell) + 1;
                let gh = h.div_ceil(cell) + 1;
                let grid: Vec<f64> = (0..gw * gh)
                    .map(|_| rng.random_range(-1.0f64..=1.0) * mag)
                    .collect();
                shift_valid(&mut out, |i| {
                    let (x, y) = ((i % w) as f64 / cell as f64, (i / w) as f64 / cell as f64);
                    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    let g = |gx: usize, gy: usize| grid[gy * gw + gx];
                    let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
                    let bottom = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
                    top * (1.0 - fy) + bottom * fy
                });
            }
            CorruptionKind::Holes => {
                for i in 0..w * h {
                    if rng.random_bool(model.fraction) {
                        out.invalidate(i);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn shift_valid(r: &mut DepthRaster, delta: impl Fn(usize) -> f64) {
    for i in 0..r.len() {
        if r.is_valid(i) {
            let d = r.depths()[i] + delta(i);
            r.set(i, d.max(DEPTH_FLOOR));
        }
    }
}
