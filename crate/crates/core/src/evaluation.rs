//! Detection precision/recall, the random-assignment baseline, and depth metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthRaster;
use crate::error::{check_dims, Error, Result};
use crate::labeling::{ClassDistribution, ErrorClass, ErrorLabelMap, ErrorProbabilityMap};

/// Confusion counts indexed `[ground truth][prediction]`, masked-in pixels only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub confusion: [[u64; 3]; 3],
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DetectionReport {
    pub fn record(&mut self, gt: ErrorClass, pred: ErrorClass) {
        self.confusion[gt.index()][pred.index()] += 1;
    }

    /// Adds another report's counts; evaluation shards merge this way.
    pub fn merge(&mut self, other: &DetectionReport) {
        for (row, o) in self.confusion.iter_mut().zip(&other.confusion) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn valid_pixels(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Ground-truth pixels of `class`.
    pub fn support(&self, class: ErrorClass) -> u64 {
        self.confusion[class.index()].iter().sum()
    }

    pub fn predicted(&self, class: ErrorClass) -> u64 {
        self.confusion.iter().map(|row| row[class.index()]).sum()
    }

    /// `None` when nothing was predicted as `class`.
    pub fn precision(&self, class: ErrorClass) -> Option<f64> {
        let c = class.index();
        ratio(self.confusion[c][c], self.predicted(class))
    }

    /// `None` when `class` is absent from the ground truth.
    pub fn recall(&self, class: ErrorClass) -> Option<f64> {
        let c = class.index();
        ratio(self.confusion[c][c], self.support(class))
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(
            (0..3).map(|c| self.confusion[c][c]).sum(),
            self.valid_pixels(),
        )
    }

    /// Under/over precision and recall, in that order.
    pub fn error_class_metrics(&self) -> [Option<f64>; 4] {
        [
            self.precision(ErrorClass::Under),
            self.recall(ErrorClass::Under),
            self.precision(ErrorClass::Over),
            self.recall(ErrorClass::Over),
        ]
    }

    pub fn summary(&self) -> DetectionSummary {
        let [under_precision, under_recall, over_precision, over_recall] =
            self.error_class_metrics();
        DetectionSummary {
            under_precision,
            under_recall,
            over_precision,
            over_recall,
            accuracy: self.accuracy(),
            valid_pixels: self.valid_pixels(),
            confusion: self.confusion,
        }
    }

    /// `key=value` lines; undefined ratios print as `n/a`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let s = self.summary();
        for (k, v) in [
            ("under_precision", s.under_precision),
            ("under_recall", s.under_recall),
            ("over_precision", s.over_precision),
            ("over_recall", s.over_recall),
            ("accuracy", s.accuracy),
        ] {
            writeln!(out, "{k}={}", fmt_opt(v)).unwrap();
        }
        writeln!(out, "valid_pixels={}", s.valid_pixels).unwrap();
        for gt in ErrorClass::ALL {
            for pred in ErrorClass::ALL {
                writeln!(
                    out,
                    "confusion.{}.{}={}",
                    gt.name(),
                    pred.name(),
                    self.confusion[gt.index()][pred.index()]
                )
                .unwrap();
            }
        }
        out
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

/// Flat, serializable view of a [`DetectionReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub under_precision: Option<f64>,
    pub under_recall: Option<f64>,
    pub over_precision: Option<f64>,
    pub over_recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub valid_pixels: u64,
    pub confusion: [[u64; 3]; 3],
}

/// Compares predicted labels against ground truth over the ground-truth mask.
pub fn detection_report(pred: &ErrorLabelMap, gt: &ErrorLabelMap) -> Result<DetectionReport> {
    check_dims("predicted vs ground-truth labels", gt.dims(), pred.dims())?;
    Ok(report_from_labels(pred.labels(), gt))
}

/// Same as [`detection_report`] after a per-pixel argmax.
pub fn detection_report_from_probs(
    probs: &ErrorProbabilityMap,
    gt: &ErrorLabelMap,
) -> Result<DetectionReport> {
    check_dims(
        "probabilities vs ground-truth labels",
        gt.dims(),
        probs.dims(),
    )?;
    Ok(report_from_labels(&probs.argmax(), gt))
}

pub(crate) fn report_from_labels(pred: &[ErrorClass], gt: &ErrorLabelMap) -> DetectionReport {
    let mut r = DetectionReport::default();
    for ((&p, &g), &m) in pred.iter().zip(gt.labels()).zip(gt.mask()) {
        if m {
            r.record(g, p);
        }
    }
    r
}

pub const BASELINE_MAPS: usize = 10;
pub const BASELINE_SIZE: usize = 224;

fn draw(dist: &[f64; 3], rng: &mut ChaCha8Rng) -> ErrorClass {
    let u: f64 = rng.random();
    if u < dist[0] {
        ErrorClass::Under
    } else if u < dist[0] + dist[1] {
        ErrorClass::Correct
    } else {
        ErrorClass::Over
    }
}

/// Random-assignment baseline: [`BASELINE_MAPS`] label maps of
/// [`BASELINE_SIZE`]² pixels drawn i.i.d. from `dist`, each pixel scored
/// against a ground-truth label drawn uniformly from the corpus's masked-in pixels.
pub fn random_baseline<'a>(
    dist: &ClassDistribution,
    gt_corpus: impl IntoIterator<Item = &'a ErrorLabelMap>,
    seed: u64,
) -> Result<DetectionReport> {
    random_baseline_sized(
        dist,
        gt_corpus,
        seed,
        BASELINE_MAPS,
        BASELINE_SIZE * BASELINE_SIZE,
    )
}

pub fn random_baseline_sized<'a>(
    dist: &ClassDistribution,
    gt_corpus: impl IntoIterator<Item = &'a ErrorLabelMap>,
    seed: u64,
    maps: usize,
    pixels_per_map: usize,
) -> Result<DetectionReport> {
    dist.validate()?;
    let pool: Vec<ErrorClass> = gt_corpus
        .into_iter()
        .flat_map(|m| {
            m.labels()
                .iter()
                .zip(m.mask())
                .filter(|(_, &v)| v)
                .map(|(&l, _)| l)
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyCorpus(
            "baseline needs at least one masked-in ground-truth pixel".into(),
        ));
    }
    let p = dist.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DetectionReport::default();
    for _ in 0..maps * pixels_per_map {
        let pred = draw(&p, &mut rng);
        let gt = pool[rng.random_range(0..pool.len())];
        r.record(gt, pred);
    }
    Ok(r)
}

/// Draws a label map with classes i.i.d. from `dist`, all pixels valid.
pub fn sample_label_map(
    dist: &ClassDistribution,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<ErrorLabelMap> {
    dist.validate()?;
    let p = dist.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..width * height).map(|_| draw(&p, &mut rng)).collect();
    ErrorLabelMap::new(width, height, labels, vec![true; width * height])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Fraction of pixels with max(d/d*, d*/d) strictly below 1.25.
    pub delta1: f64,
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
}

impl DepthMetrics {
    pub fn to_key_values(&self, prefix: &str) -> String {
        format!(
            "{prefix}delta1={:.6}\n{prefix}abs_rel={:.6}\n{prefix}rmse={:.6}\n{prefix}log10={:.6}\n",
            self.delta1, self.abs_rel, self.rmse, self.log10
        )
    }
}

/// Metrics over pixels valid in both rasters, accumulated in f64.
pub fn depth_metrics(pred: &DepthRaster, gt: &DepthRaster) -> Result<DepthMetrics> {
    check_dims("prediction vs ground truth", gt.dims(), pred.dims())?;
    let (mut n, mut hits, mut rel, mut sq, mut lg) = (0usize, 0usize, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..gt.len() {
        if !(gt.is_valid(i) && pred.is_valid(i)) {
            continue;
        }
        let (d, g) = (pred.depths()[i], gt.depths()[i]);
        n += 1;
        if (d / g).max(g / d) < 1.25 {
            hits += 1;
        }
        rel += (d - g).abs() / g;
        sq += (d - g) * (d - g);
        lg += (d.log10() - g.log10()).abs();
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "no pixel is valid in both rasters".into(),
        ));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        delta1: hits as f64 / nf,
        abs_rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        log10: lg / nf,
    })
}

/// Per-image metrics averaged over the corpus.
pub fn corpus_depth_metrics<'a>(
    pairs: impl IntoIterator<Item = (&'a DepthRaster, &'a DepthRaster)>,
) -> Result<DepthMetrics> {
    let mut acc = [0.0f64; 4];
    let mut n = 0usize;
    for (pred, gt) in pairs {
        let m = depth_metrics(pred, gt)?;
        for (a, v) in acc.iter_mut().zip([m.delta1, m.abs_rel, m.rmse, m.log10]) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus("no images to evaluate".into()));
    }
    let [delta1, abs_rel, rmse, log10] = acc.map(|v| v / n as f64);
    Ok(DepthMetrics {
        delta1,
        abs_rel,
        rmse,
        log10,
    })
}
