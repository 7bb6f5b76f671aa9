//! Depth and RGB rasters, PNG I/O, and the synthetic RGB-D scene generator.

mod corrupt;
pub(crate) mod io;
mod manifest;
mod synth;

pub use corrupt::{
    corrupt, discontinuities, segment_regions, CorruptionKind, CorruptionModel, EDGE_THRESHOLD,
};
pub use io::{read_depth, read_raster, read_rgb, write_depth, write_rgb, Raster};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use synth::{generate_scene, SceneConfig, SceneSample, SecondView};

use crate::error::{Error, Result};

/// Depth values below this are clamped after corruption or correction.
pub const DEPTH_FLOOR: f64 = 0.05;

/// Metric depth raster with a validity mask; invalid pixels hold 0.0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthRaster {
    /// Builds a raster from raw depths: nonpositive or non-finite values become invalid.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "raster dimensions must be positive".into(),
            ));
        }
        if depth.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values for {width}x{height}",
                depth.len()
            )));
        }
        let valid: Vec<bool> = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depth = depth
            .into_iter()
            .zip(&valid)
            .map(|(d, &v)| if v { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_depths(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    /// Sets a pixel; values that are not finite and positive mark it invalid.
    pub fn set(&mut self, i: usize, d: f64) {
        if d.is_finite() && d > 0.0 {
            self.depth[i] = d;
            self.valid[i] = true;
        } else {
            self.invalidate(i);
        }
    }

    pub fn invalidate(&mut self, i: usize) {
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Depth scaled for network input; invalid pixels stay 0.
    pub fn normalized(&self, scale: f64) -> Vec<f64> {
        self.depth.iter().map(|&d| d / scale).collect()
    }
}

/// Three-channel image with intensities in [0, 1], stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    planes: Vec<f32>,
}

impl RgbImage {
    /// `planes` holds the R plane, then G, then B.
    pub fn from_planes(width: usize, height: usize, planes: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || planes.len() != 3 * width * height {
            return Err(Error::InvalidInput(format!(
                "rgb buffer has {} values for 3x{width}x{height}",
                planes.len()
            )));
        }
        if planes.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "rgb intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            planes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.planes[i], self.planes[n + i], self.planes[2 * n + i]]
    }
}
