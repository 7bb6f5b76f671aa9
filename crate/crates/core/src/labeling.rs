//! Three-class labeling of predicted depth against ground truth, class
//! weights for the imbalanced loss, and label-map PNG I/O.

use std::fs;
use std::path::Path;

use png::{BitDepth, ColorType};
use serde::{Deserialize, Serialize};

use crate::depth::io::{decode_png, encode_png, fmt_err};
use crate::depth::DepthRaster;
use crate::error::{check_dims, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ErrorClass {
    Under = 0,
    Correct = 1,
    Over = 2,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 3] = [ErrorClass::Under, ErrorClass::Correct, ErrorClass::Over];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Under => "under",
            ErrorClass::Correct => "correct",
            ErrorClass::Over => "over",
        }
    }

    /// Display colour: red = under, green = correct, blue = over.
    pub fn color(self) -> [u8; 3] {
        match self {
            ErrorClass::Under => [255, 0, 0],
            ErrorClass::Correct => [0, 255, 0],
            ErrorClass::Over => [0, 0, 255],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    /// Half-width of the CORRECT band, in meters.
    pub threshold: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { threshold: 0.1 }
    }
}

impl LabelerConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        let cfg = Self { threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold > 0.0 && self.threshold.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "label threshold must be positive, got {}",
                self.threshold
            )))
        }
    }
}

/// Signed-error rule for one pixel. The band edge |d − d*| = t counts as correct.
pub fn classify(pred: f64, gt: f64, threshold: f64) -> ErrorClass {
    let diff = pred - gt;
    if diff < -threshold {
        ErrorClass::Under
    } else if diff > threshold {
        ErrorClass::Over
    } else {
        ErrorClass::Correct
    }
}

/// Per-pixel class labels plus the loss mask; masked pixels carry `Correct`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorLabelMap {
    width: usize,
    height: usize,
    labels: Vec<ErrorClass>,
    mask: Vec<bool>,
}

impl ErrorLabelMap {
    pub fn new(
        width: usize,
        height: usize,
        mut labels: Vec<ErrorClass>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height || mask.len() != labels.len()
        {
            return Err(Error::InvalidInput(format!(
                "label map of {}x{} needs {} labels and mask entries, got {} and {}",
                width,
                height,
                width * height,
                labels.len(),
                mask.len()
            )));
        }
        for (l, &m) in labels.iter_mut().zip(&mask) {
            if !m {
                *l = ErrorClass::Correct;
            }
        }
        Ok(Self {
            width,
            height,
            labels,
            mask,
        })
    }

    /// All pixels valid with the same label.
    pub fn uniform(width: usize, height: usize, class: ErrorClass) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![class; width * height],
            vec![true; width * height],
        )
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
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ErrorClass] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Masked-in pixel counts per class, indexed by [`ErrorClass::index`].
    pub fn counts(&self) -> [u64; 3] {
        let mut c = [0u64; 3];
        for (l, &m) in self.labels.iter().zip(&self.mask) {
            if m {
                c[l.index()] += 1;
            }
        }
        c
    }
}

pub fn label(pred: &DepthRaster, gt: &DepthRaster, cfg: &LabelerConfig) -> Result<ErrorLabelMap> {
    cfg.validate()?;
    check_dims("prediction vs ground truth", gt.dims(), pred.dims())?;
    let mask: Vec<bool> = (0..gt.len())
        .map(|i| pred.is_valid(i) && gt.is_valid(i))
        .collect();
    let labels = pred
        .depths()
        .iter()
        .zip(gt.depths())
        .zip(&mask)
        .map(|((&d, &g), &m)| {
            if m {
                classify(d, g, cfg.threshold)
            } else {
                ErrorClass::Correct
            }
        })
        .collect();
    Ok(ErrorLabelMap {
        width: gt.width(),
        height: gt.height(),
        labels,
        mask,
    })
}

/// Per-pixel class probabilities, stored as three planes in [`ErrorClass`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorProbabilityMap {
    width: usize,
    height: usize,
    planes: Vec<f32>,
}

impl ErrorProbabilityMap {
    pub fn new(width: usize, height: usize, planes: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || planes.len() != 3 * width * height {
            return Err(Error::InvalidInput(format!(
                "probability map of {width}x{height} needs {} values, got {}",
                3 * width * height,
                planes.len()
            )));
        }
        if let Some(v) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            planes,
        })
    }

    pub fn uniform(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![1.0 / 3.0; 3 * width * height])
    }

    /// Puts all mass on each pixel's label; masked pixels get `Correct`.
    pub fn one_hot(labels: &ErrorLabelMap) -> Self {
        let n = labels.len();
        let mut planes = vec![0.0; 3 * n];
        for (i, l) in labels.labels().iter().enumerate() {
            planes[l.index() * n + i] = 1.0;
        }
        Self {
            width: labels.width,
            height: labels.height,
            planes,
        }
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
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn plane(&self, class: ErrorClass) -> &[f32] {
        let n = self.len();
        &self.planes[class.index() * n..(class.index() + 1) * n]
    }

    pub fn prob(&self, class: ErrorClass, i: usize) -> f32 {
        self.planes[class.index() * self.len() + i]
    }

    /// Most probable class per pixel. Any tie involving the maximum resolves to
    /// `Correct`, so ambiguous pixels are never reported as errors.
    pub fn argmax(&self) -> Vec<ErrorClass> {
        (0..self.len())
            .map(|i| {
                let p = ErrorClass::ALL.map(|c| self.prob(c, i));
                let best = p[0].max(p[1]).max(p[2]);
                let winners = p.iter().filter(|&&v| v == best).count();
                if winners > 1 || p[1] == best {
                    ErrorClass::Correct
                } else if p[0] == best {
                    ErrorClass::Under
                } else {
                    ErrorClass::Over
                }
            })
            .collect()
    }

    /// Argmax labels carrying the mask of `reference`.
    pub fn to_label_map(&self, reference: &ErrorLabelMap) -> Result<ErrorLabelMap> {
        check_dims("probabilities vs labels", reference.dims(), self.dims())?;
        ErrorLabelMap::new(
            self.width,
            self.height,
            self.argmax(),
            reference.mask.clone(),
        )
    }

    /// Argmax labels with every pixel marked valid.
    pub fn to_unmasked_label_map(&self) -> ErrorLabelMap {
        ErrorLabelMap {
            width: self.width,
            height: self.height,
            labels: self.argmax(),
            mask: vec![true; self.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub under: f64,
    pub correct: f64,
    pub over: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        under: 1.0,
        correct: 1.0,
        over: 1.0,
    };

    /// c_j = N_valid / (3 N_j); classes with no pixels get 0.
    pub fn from_counts(counts: [u64; 3]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus("no masked-in pixels to weight".into()));
        }
        let w = counts.map(|n| {
            if n == 0 {
                0.0
            } else {
                total as f64 / (3.0 * n as f64)
            }
        });
        Ok(Self::from_array(w))
    }

    pub fn from_array(w: [f64; 3]) -> Self {
        Self {
            under: w[0],
            correct: w[1],
            over: w[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.under, self.correct, self.over]
    }

    pub fn get(&self, class: ErrorClass) -> f64 {
        self.as_array()[class.index()]
    }
}

pub fn corpus_counts<'a>(maps: impl IntoIterator<Item = &'a ErrorLabelMap>) -> Result<[u64; 3]> {
    let mut total = [0u64; 3];
    let mut any = false;
    for m in maps {
        any = true;
        for (t, c) in total.iter_mut().zip(m.counts()) {
            *t += c;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus("no label maps".into()));
    }
    Ok(total)
}

pub fn class_weights<'a>(
    maps: impl IntoIterator<Item = &'a ErrorLabelMap>,
) -> Result<ClassWeights> {
    ClassWeights::from_counts(corpus_counts(maps)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub under: f64,
    pub correct: f64,
    pub over: f64,
}

impl ClassDistribution {
    pub fn from_counts(counts: [u64; 3]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus("no masked-in pixels".into()));
        }
        Ok(Self::from_array(counts.map(|n| n as f64 / total as f64)))
    }

    pub fn from_array(p: [f64; 3]) -> Self {
        Self {
            under: p[0],
            correct: p[1],
            over: p[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.under, self.correct, self.over]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.as_array();
        let sum: f64 = p.iter().sum();
        if p.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() <= 1e-6 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "class distribution {p:?} does not sum to 1"
            )))
        }
    }
}

pub fn class_distribution<'a>(
    maps: impl IntoIterator<Item = &'a ErrorLabelMap>,
) -> Result<ClassDistribution> {
    ClassDistribution::from_counts(corpus_counts(maps)?)
}

const MASKED_COLOR: [u8; 3] = [0, 0, 0];

/// Palette index 0 is masked; 1..=3 follow [`ErrorClass`] order.
pub fn encode_label_map(map: &ErrorLabelMap) -> Result<Vec<u8>> {
    let mut palette = MASKED_COLOR.to_vec();
    for c in ErrorClass::ALL {
        palette.extend_from_slice(&c.color());
    }
    let data: Vec<u8> = map
        .labels
        .iter()
        .zip(&map.mask)
        .map(|(l, &m)| if m { 1 + *l as u8 } else { 0 })
        .collect();
    encode_png(
        map.width,
        map.height,
        ColorType::Indexed,
        BitDepth::Eight,
        Some(&palette),
        &data,
    )
}

pub fn write_label_map(map: &ErrorLabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_label_map(map)?)?;
    Ok(())
}

/// Reads an 8-bit paletted label map, interpreting entries by palette colour.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<ErrorLabelMap> {
    let path = path.as_ref();
    let d = decode_png(&fs::read(path)?, path)?;
    if (d.color, d.depth) != (ColorType::Indexed, BitDepth::Eight) {
        return Err(fmt_err(
            path,
            format!("unknown format: {:?} at {:?} bits", d.color, d.depth),
        ));
    }
    let palette = d
        .palette
        .ok_or_else(|| fmt_err(path, "indexed image without palette"))?;
    let entries: Vec<Option<Option<ErrorClass>>> = palette
        .chunks_exact(3)
        .map(|rgb| {
            if rgb == MASKED_COLOR {
                Some(None)
            } else {
                ErrorClass::ALL
                    .into_iter()
                    .find(|c| c.color() == rgb)
                    .map(Some)
            }
        })
        .collect();
    let n = d.width * d.height;
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for &idx in &d.bytes[..n] {
        match entries.get(idx as usize).copied().flatten() {
            Some(Some(c)) => {
                labels.push(c);
                mask.push(true);
            }
            Some(None) => {
                labels.push(ErrorClass::Correct);
                mask.push(false);
            }
            None => {
                return Err(fmt_err(
                    path,
                    format!("palette index {idx} is not a label colour"),
                ))
            }
        }
    }
    ErrorLabelMap::new(d.width, d.height, labels, mask)
}
