//! Iterative correction: nudge confidently mislabeled depths and re-detect.

use serde::{Deserialize, Serialize};

use crate::dedn::DednModel;
use crate::depth::{DepthRaster, RgbImage, DEPTH_FLOOR};
use crate::error::{check_dims, Error, Result};
use crate::evaluation::{depth_metrics, DepthMetrics};
use crate::labeling::{label, ErrorClass, ErrorProbabilityMap, LabelerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub confidence_threshold: f64,
    /// Meters added or removed per iteration.
    pub step: f64,
    pub iterations: usize,
    pub depth_floor: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.7,
            step: 0.01,
            iterations: 15,
            depth_floor: DEPTH_FLOOR,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold {} must be in (0.5, 1)",
                self.confidence_threshold
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step {} must be positive",
                self.step
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.depth_floor > 0.0 && self.depth_floor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "depth_floor {} must be positive",
                self.depth_floor
            )));
        }
        Ok(())
    }
}

/// Outcome of a single correction pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionPass {
    pub depth: DepthRaster,
    pub adjusted: usize,
    /// Pixels where both error classes cleared the threshold and were left alone.
    pub ties: usize,
}

/// Moves each valid pixel one step in the direction its confident error class indicates.
pub fn correct_once(
    pred: &DepthRaster,
    probs: &ErrorProbabilityMap,
    cfg: &CorrectionConfig,
) -> Result<CorrectionPass> {
    cfg.validate()?;
    check_dims("depth vs probabilities", probs.dims(), pred.dims())?;
    let th = cfg.confidence_threshold;
    let mut depth = pred.clone();
    let (mut adjusted, mut ties) = (0, 0);
    for (i, &d) in pred.depths().iter().enumerate() {
        if !pred.is_valid(i) {
            continue;
        }
        let under = probs.prob(ErrorClass::Under, i) as f64 > th;
        let over = probs.prob(ErrorClass::Over, i) as f64 > th;
        let next = match (under, over) {
            (true, true) => {
                ties += 1;
                continue;
            }
            (true, false) => d + cfg.step,
            (false, true) => (d - cfg.step).max(d.min(cfg.depth_floor)),
            (false, false) => continue,
        };
        if next != d {
            depth.set(i, next);
            adjusted += 1;
        }
    }
    if ties > 0 {
        log::debug!("correction skipped {ties} pixels flagged both under and over");
    }
    Ok(CorrectionPass {
        depth,
        adjusted,
        ties,
    })
}

/// Source of error probabilities for the first view's depth.
pub trait ErrorDetector {
    fn detect(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<ErrorProbabilityMap>;
}

impl ErrorDetector for DednModel<f32> {
    fn detect(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<ErrorProbabilityMap> {
        self.infer(views)
    }
}

/// Detector that knows the ground truth and reports its labels with certainty.
#[derive(Clone, Debug)]
pub struct OracleDetector<'a> {
    pub gt: &'a DepthRaster,
    pub labeler: LabelerConfig,
}

impl ErrorDetector for OracleDetector<'_> {
    fn detect(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<ErrorProbabilityMap> {
        let (_, depth) = views.first().ok_or(Error::ViewCount {
            expected: 1,
            actual: 0,
        })?;
        Ok(ErrorProbabilityMap::one_hot(&label(
            depth,
            self.gt,
            &self.labeler,
        )?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 0 is the uncorrected input.
    pub iteration: usize,
    pub adjusted: usize,
    pub ties: usize,
    pub metrics: Option<DepthMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionResult {
    pub depth: DepthRaster,
    pub trace: Vec<TraceEntry>,
    /// True when a pass adjusted nothing, so later passes would repeat it.
    pub converged: bool,
}

impl CorrectionResult {
    pub fn iterations_run(&self) -> usize {
        self.trace.len() - 1
    }
}

/// Runs up to `cfg.iterations` rounds of detect → [`correct_once`] on the first
/// view's depth. Other views are passed through unchanged. With `gt`, every
/// trace entry carries depth metrics.
pub fn correct_iterative<D: ErrorDetector + ?Sized>(
    detector: &D,
    views: &[(&RgbImage, &DepthRaster)],
    gt: Option<&DepthRaster>,
    cfg: &CorrectionConfig,
) -> Result<CorrectionResult> {
    cfg.validate()?;
    let (_, first) = views.first().ok_or(Error::ViewCount {
        expected: 1,
        actual: 0,
    })?;
    let metrics = |d: &DepthRaster| gt.map(|g| depth_metrics(d, g)).transpose();
    let mut depth = (*first).clone();
    let mut trace = vec![TraceEntry {
        iteration: 0,
        adjusted: 0,
        ties: 0,
        metrics: metrics(&depth)?,
    }];
    let mut converged = false;
    for iteration in 1..=cfg.iterations {
        let mut current: Vec<(&RgbImage, &DepthRaster)> = views.to_vec();
        current[0].1 = &depth;
        let probs = detector.detect(&current)?;
        let pass = correct_once(&depth, &probs, cfg)?;
        depth = pass.depth;
        trace.push(TraceEntry {
            iteration,
            adjusted: pass.adjusted,
            ties: pass.ties,
            metrics: metrics(&depth)?,
        });
        if pass.adjusted == 0 {
            converged = true;
            break;
        }
    }
    Ok(CorrectionResult {
        depth,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_for(n: usize, p: [f32; 3]) -> ErrorProbabilityMap {
        let planes = p.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        ErrorProbabilityMap::new(n, 1, planes).unwrap()
    }

    #[test]
    fn uniform_probabilities_change_nothing() {
        let d = DepthRaster::from_depths(3, 1, vec![1.0, 0.0, 2.5]).unwrap();
        let pass = correct_once(
            &d,
            &ErrorProbabilityMap::uniform(3, 1).unwrap(),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(pass.depth, d);
        assert_eq!(pass.adjusted, 0);
    }

    #[test]
    fn confident_under_steps_up() {
        let d = DepthRaster::constant(1, 1, 2.0).unwrap();
        let pass = correct_once(
            &d,
            &probs_for(1, [0.9, 0.05, 0.05]),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert!((pass.depth.depths()[0] - 2.01).abs() < 1e-12);
    }

    #[test]
    fn over_at_floor_stays() {
        let d = DepthRaster::constant(1, 1, DEPTH_FLOOR).unwrap();
        let pass = correct_once(
            &d,
            &probs_for(1, [0.1, 0.1, 0.8]),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(pass.depth.depths()[0], DEPTH_FLOOR);
        assert_eq!(pass.adjusted, 0);
        let near = DepthRaster::constant(1, 1, DEPTH_FLOOR + 0.004).unwrap();
        let pass = correct_once(
            &near,
            &probs_for(1, [0.1, 0.1, 0.8]),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(pass.depth.depths()[0], DEPTH_FLOOR);
    }

    #[test]
    fn invalid_pixels_untouched() {
        let d = DepthRaster::from_depths(2, 1, vec![0.0, 1.0]).unwrap();
        let pass = correct_once(
            &d,
            &probs_for(2, [0.95, 0.025, 0.025]),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert!(!pass.depth.is_valid(0));
        assert!((pass.depth.depths()[1] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn conflicting_evidence_is_skipped() {
        let d = DepthRaster::constant(1, 1, 3.0).unwrap();
        let pass = correct_once(
            &d,
            &probs_for(1, [0.8, 0.0, 0.8]),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(pass.depth, d);
        assert_eq!(pass.ties, 1);
    }

    #[test]
    fn dimension_mismatch_and_bad_config() {
        let d = DepthRaster::constant(2, 1, 3.0).unwrap();
        assert!(correct_once(
            &d,
            &ErrorProbabilityMap::uniform(1, 1).unwrap(),
            &CorrectionConfig::default()
        )
        .is_err());
        for cfg in [
            CorrectionConfig {
                confidence_threshold: 0.5,
                ..CorrectionConfig::default()
            },
            CorrectionConfig {
                step: 0.0,
                ..CorrectionConfig::default()
            },
            CorrectionConfig {
                iterations: 0,
                ..CorrectionConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn oracle_single_iteration_equals_one_pass() {
        let gt = DepthRaster::from_depths(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let pred = DepthRaster::from_depths(3, 1, vec![1.5, 2.05, 2.5]).unwrap();
        let rgb = RgbImage::from_planes(3, 1, vec![0.5; 9]).unwrap();
        let oracle = OracleDetector {
            gt: &gt,
            labeler: LabelerConfig::default(),
        };
        let cfg = CorrectionConfig {
            iterations: 1,
            ..CorrectionConfig::default()
        };
        let run = correct_iterative(&oracle, &[(&rgb, &pred)], Some(&gt), &cfg).unwrap();
        let once = correct_once(&pred, &oracle.detect(&[(&rgb, &pred)]).unwrap(), &cfg).unwrap();
        assert_eq!(run.depth, once.depth);
        assert_eq!(run.trace.len(), 2);
        assert!(run.trace[1].metrics.unwrap().rmse < run.trace[0].metrics.unwrap().rmse);
    }
}
