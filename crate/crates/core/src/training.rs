//! Class-weighted per-pixel cross-entropy and the SGD training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dedn::{DednModel, ViewTensors};
use crate::depth::{DepthRaster, RgbImage};
use crate::error::{check_dims, Error, Result};
use crate::evaluation::{fmt_opt, report_from_labels, DetectionReport};
use crate::labeling::{
    class_weights, label, ClassWeights, ErrorClass, ErrorLabelMap, ErrorProbabilityMap,
    LabelerConfig,
};
use crate::tensor::{Mode, Scalar, Sgd, Tensor, TensorError};

pub const DEFAULT_LOG_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_weights: ClassWeights,
    /// Probabilities are clamped to at least this inside the logarithm.
    pub epsilon: f64,
}

impl LossConfig {
    pub fn new(class_weights: ClassWeights) -> Self {
        Self {
            class_weights,
            epsilon: DEFAULT_LOG_EPSILON,
        }
    }

    /// Weights computed once over the whole training corpus.
    pub fn for_corpus(corpus: &[LabeledSample]) -> Result<Self> {
        Ok(Self::new(class_weights(corpus.iter().map(|s| &s.labels))?))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "log epsilon {} outside (0, 1e-3]",
                self.epsilon
            )));
        }
        if self
            .class_weights
            .as_array()
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "class weights must be finite and nonnegative: {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }
}

/// Batched loss on network output `[N, 3, H, W]`: the per-image loss
/// −(1/P) Σᵢ Σⱼ mᵢ·cⱼ·yᵢⱼ·ln max(ȳᵢⱼ, ε) with P the image's pixel count,
/// averaged over the batch. Returns the loss and its exact gradient.
pub fn weighted_ce<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[&ErrorLabelMap],
    cfg: &LossConfig,
) -> Result<(f64, Tensor<S>)> {
    cfg.validate()?;
    let (n, c, h, w) = probs.dims4()?;
    if c != 3 || n != labels.len() {
        return Err(Error::InvalidInput(format!(
            "loss expects [{}, 3, H, W] probabilities, got {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    if !probs.all_finite() {
        return Err(Error::InvalidInput("non-finite probability".into()));
    }
    let p = h * w;
    let weights = cfg.class_weights.as_array();
    let scale = 1.0 / (p as f64 * n as f64);
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(probs.shape());
    for (s, lab) in labels.iter().enumerate() {
        check_dims("probabilities vs labels", lab.dims(), (w, h))?;
        for (i, (&l, &m)) in lab.labels().iter().zip(lab.mask()).enumerate() {
            if !m {
                continue;
            }
            let k = (s * 3 + l.index()) * p + i;
            let y = probs.data()[k].as_f64();
            let cw = weights[l.index()];
            if y >= cfg.epsilon {
                loss -= cw * y.ln() * scale;
                grad.data_mut()[k] = S::from_f64_lossy(-cw * scale / y);
            } else {
                loss -= cw * cfg.epsilon.ln() * scale;
            }
        }
    }
    Ok((loss, grad))
}

/// Single-image loss with a planar `[3·H·W]` gradient w.r.t. `probs`.
pub fn weighted_ce_loss(
    probs: &ErrorProbabilityMap,
    labels: &ErrorLabelMap,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dims("probabilities vs labels", labels.dims(), probs.dims())?;
    let (w, h) = probs.dims();
    let t = Tensor::new(
        vec![1, 3, h, w],
        probs.planes().iter().map(|&v| v as f64).collect(),
    )?;
    let (loss, grad) = weighted_ce(&t, &[labels], cfg)?;
    Ok((loss, grad.into_data()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be ≥ 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training example: the network's views and labels for the first view.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub views: Vec<ViewTensors<f32>>,
    pub labels: ErrorLabelMap,
}

impl LabeledSample {
    /// Labels the first view's depth against `gt`.
    pub fn new(
        views: &[(&RgbImage, &DepthRaster)],
        gt: &DepthRaster,
        label_cfg: &LabelerConfig,
        depth_scale: f64,
    ) -> Result<Self> {
        let (_, pred) = views.first().ok_or(Error::ViewCount {
            expected: 1,
            actual: 0,
        })?;
        Ok(Self {
            labels: label(pred, gt, label_cfg)?,
            views: views
                .iter()
                .map(|(rgb, d)| ViewTensors::from_images(rgb, d, depth_scale))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Detection counts of the training-mode predictions seen during the epoch.
    pub report: DetectionReport,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        let r = &self.report;
        let mut line = format!("epoch={} loss={:.6}", self.epoch, self.loss);
        for c in ErrorClass::ALL {
            line.push_str(&format!(
                " {0}_precision={1} {0}_recall={2}",
                c.name(),
                fmt_opt(r.precision(c)),
                fmt_opt(r.recall(c))
            ));
        }
        line
    }
}

/// Attaches the epoch and batch to a layer's non-finite report.
fn non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { layer }) => Error::NonFinite {
            what: layer,
            epoch,
            batch,
        },
        other => other,
    }
}

pub fn stack_views(samples: &[&LabeledSample]) -> Result<Vec<ViewTensors<f32>>> {
    let n_views = samples[0].views.len();
    (0..n_views)
        .map(|v| {
            let parts: Vec<&ViewTensors<f32>> = samples.iter().map(|s| &s.views[v]).collect();
            ViewTensors::stack(&parts)
        })
        .collect()
}

/// Trains with SGD + momentum. `on_epoch` sees the model after each epoch
/// (e.g. to write checkpoints) and may abort by returning an error.
pub fn train_with<F>(
    model: &mut DednModel<f32>,
    corpus: &[LabeledSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&DednModel<f32>, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("training corpus has no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    model.zero_grad();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut report = DetectionReport::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &corpus[i]).collect();
            let views = stack_views(&batch)?;
            let probs = model.forward(&views, Mode::Train).map_err(|e| {
                model.clear_records();
                non_finite(e, epoch, b)
            })?;
            if !probs.all_finite() {
                model.clear_records();
                return Err(Error::NonFinite {
                    what: "network output".into(),
                    epoch,
                    batch: b,
                });
            }
            let labels: Vec<&ErrorLabelMap> = batch.iter().map(|s| &s.labels).collect();
            let (loss, grad) = weighted_ce(&probs, &labels, loss_cfg)?;
            if !loss.is_finite() || !grad.all_finite() {
                model.clear_records();
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    epoch,
                    batch: b,
                });
            }
            model.backward(&grad).map_err(|e| {
                model.clear_records();
                non_finite(e, epoch, b)
            })?;
            opt.step(model.params_mut())?;
            loss_sum += loss * batch.len() as f64;
            let (_, _, h, w) = probs.dims4()?;
            let p = h * w;
            for (s, lab) in labels.iter().enumerate() {
                let planes = &probs.data()[s * 3 * p..(s + 1) * 3 * p];
                let pm = ErrorProbabilityMap::new(
                    w,
                    h,
                    planes.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                )?;
                report.merge(&report_from_labels(&pm.argmax(), lab));
            }
        }
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / corpus.len() as f64,
            report,
        };
        log::info!("{}", metrics.log_line());
        on_epoch(model, &metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

pub fn train(
    model: &mut DednModel<f32>,
    corpus: &[LabeledSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<EpochMetrics>> {
    train_with(model, corpus, cfg, loss_cfg, |_, _| Ok(()))
}

/// Eval-mode predictions for a labeled corpus, in batches.
pub fn predict_corpus(
    model: &DednModel<f32>,
    corpus: &[LabeledSample],
    batch: usize,
) -> Result<Vec<ErrorProbabilityMap>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(batch.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let probs = model.eval(&stack_views(&refs)?)?;
        let (n, _, h, w) = probs.dims4()?;
        let p = 3 * h * w;
        for i in 0..n {
            out.push(ErrorProbabilityMap::new(
                w,
                h,
                probs.data()[i * p..(i + 1) * p]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect(),
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ErrorClass::*;

    fn probs(w: usize, planes: Vec<f32>) -> ErrorProbabilityMap {
        ErrorProbabilityMap::new(w, 1, planes).unwrap()
    }

    #[test]
    fn single_pixel_hand_value() {
        let labels = ErrorLabelMap::uniform(1, 1, Under).unwrap();
        let cfg = LossConfig::new(ClassWeights::from_array([2.0, 1.0, 1.0]));
        let (loss, grad) =
            weighted_ce_loss(&probs(1, vec![0.5, 0.25, 0.25]), &labels, &cfg).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((grad[0] + 4.0).abs() < 1e-12);
        assert_eq!(&grad[1..], &[0.0, 0.0]);
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let labels = ErrorLabelMap::new(3, 1, vec![Under, Correct, Over], vec![true; 3]).unwrap();
        let p = ErrorProbabilityMap::one_hot(&labels);
        let (loss, _) =
            weighted_ce_loss(&p, &labels, &LossConfig::new(ClassWeights::UNIT)).unwrap();
        assert!(loss <= -(1.0 - DEFAULT_LOG_EPSILON).ln() + 1e-15);
    }

    #[test]
    fn fully_masked_is_zero() {
        let labels = ErrorLabelMap::new(2, 1, vec![Under, Over], vec![false, false]).unwrap();
        let (loss, grad) = weighted_ce_loss(
            &probs(2, vec![0.1, 0.2, 0.3, 0.4, 0.6, 0.4]),
            &labels,
            &LossConfig::new(ClassWeights::UNIT),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn clamp_bounds_confident_mistakes() {
        let labels = ErrorLabelMap::uniform(1, 1, Over).unwrap();
        let (loss, grad) = weighted_ce_loss(
            &probs(1, vec![1.0, 0.0, 0.0]),
            &labels,
            &LossConfig::new(ClassWeights::UNIT),
        )
        .unwrap();
        assert!((loss + DEFAULT_LOG_EPSILON.ln()).abs() < 1e-12);
        assert_eq!(grad, vec![0.0; 3]);
    }

    #[test]
    fn errors_on_mismatch_and_non_finite() {
        let labels = ErrorLabelMap::uniform(2, 1, Over).unwrap();
        let cfg = LossConfig::new(ClassWeights::UNIT);
        assert!(weighted_ce_loss(&probs(1, vec![0.2, 0.3, 0.5]), &labels, &cfg).is_err());
        let t =
            Tensor::<f64>::new(vec![1, 3, 1, 2], vec![f64::NAN, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!(weighted_ce(&t, &[&labels], &cfg).is_err());
        let bad = LossConfig {
            epsilon: 0.1,
            ..cfg
        };
        assert!(weighted_ce_loss(&probs(2, vec![0.2; 6]), &labels, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(zero_batch.validate().is_err());
    }
}
