//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Result, Scalar, Tensor};

/// Anything with a recorded forward pass and a matching backward pass.
pub trait Fragment<S: Scalar> {
    /// Training-mode forward that records state for `backward`.
    fn forward(&mut self, inputs: &[Tensor<S>]) -> Result<Tensor<S>>;
    /// Returns gradients w.r.t. the inputs, accumulating parameter gradients.
    fn backward(&mut self, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>>;
    fn clear_records(&mut self);
}

impl<S: Scalar> Fragment<S> for Layer<S> {
    fn forward(&mut self, inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = inputs.iter().collect();
        Layer::forward(self, &refs, Mode::Train)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        Layer::backward(self, grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        Layer::params_mut(self)
    }

    fn clear_records(&mut self) {
        Layer::clear_records(self)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub perturbation: f64,
    pub tolerance: f64,
    /// Denominator floor for the per-entry relative error.
    pub floor: f64,
    pub check_inputs: bool,
    /// Entries sampled per block; larger blocks are subsampled.
    pub max_entries_per_block: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            perturbation: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            check_inputs: true,
            max_entries_per_block: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub shape: Vec<usize>,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.max_rel_error <= self.tolerance)
    }
}

fn objective<S: Scalar>(y: &Tensor<S>, proj: &[S]) -> f64 {
    y.data()
        .iter()
        .zip(proj)
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares analytic gradients of the scalar objective `Σ r·f(inputs)` (with a
/// fixed random projection `r`) against central finite differences.
pub fn gradcheck<S: Scalar, F: Fragment<S> + ?Sized>(
    fragment: &mut F,
    inputs: &[Tensor<S>],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fragment.clear_records();
    for p in fragment.params_mut() {
        p.grad_mut();
        p.zero_grad();
    }
    let y = fragment.forward(inputs)?;
    let proj: Vec<S> = (0..y.len())
        .map(|_| S::from_f64_lossy(rng.random_range(-1.0..1.0)))
        .collect();
    let upstream = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let input_grads = fragment.backward(&upstream)?;
    fragment.clear_records();
    let param_grads: Vec<Vec<S>> = fragment
        .params_mut()
        .into_iter()
        .map(|p| p.grad_mut().to_vec())
        .collect();

    let h = S::from_f64_lossy(cfg.perturbation);
    let two_h = 2.0 * cfg.perturbation;
    let mut blocks = Vec::new();

    for (b, grads) in param_grads.iter().enumerate() {
        let shape = fragment.params_mut()[b].shape().to_vec();
        let entries = pick(grads.len(), cfg.max_entries_per_block, &mut rng);
        let mut worst = 0.0f64;
        for &i in &entries {
            let orig = fragment.params_mut()[b].data()[i];
            fragment.params_mut()[b].data_mut()[i] = orig + h;
            let plus = objective(&fragment.forward(inputs)?, &proj);
            fragment.clear_records();
            fragment.params_mut()[b].data_mut()[i] = orig - h;
            let minus = objective(&fragment.forward(inputs)?, &proj);
            fragment.clear_records();
            fragment.params_mut()[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / two_h;
            worst = worst.max(rel_error(grads[i].as_f64(), numeric, cfg.floor));
        }
        blocks.push(BlockError {
            name: format!("param{b}"),
            shape,
            entries_checked: entries.len(),
            max_rel_error: worst,
        });
    }

    if cfg.check_inputs {
        let mut work: Vec<Tensor<S>> = inputs.to_vec();
        for (k, g) in input_grads.iter().enumerate().take(inputs.len()) {
            let entries = pick(g.len(), cfg.max_entries_per_block, &mut rng);
            let mut worst = 0.0f64;
            for &i in &entries {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + h;
                let plus = objective(&fragment.forward(&work)?, &proj);
                fragment.clear_records();
                work[k].data_mut()[i] = orig - h;
                let minus = objective(&fragment.forward(&work)?, &proj);
                fragment.clear_records();
                work[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / two_h;
                worst = worst.max(rel_error(g.data()[i].as_f64(), numeric, cfg.floor));
            }
            blocks.push(BlockError {
                name: format!("input{k}"),
                shape: inputs[k].shape().to_vec(),
                entries_checked: entries.len(),
                max_rel_error: worst,
            });
        }
    }

    Ok(GradcheckReport {
        blocks,
        tolerance: cfg.tolerance,
    })
}
