//! Dense NCHW tensors with layer-level reverse-mode gradients.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape plus a flat
//! row-major buffer, and every trainable operation lives in a [`Layer`]
//! that records what it needs on `forward` and consumes it on `backward`.
//! Recorded state is kept on a stack, so a layer whose weights are shared
//! between several inputs (e.g. two camera views) can be run several times
//! before backpropagating in reverse order.

mod checkpoint;
mod conv;
mod gradcheck;
mod layers;
mod optim;

pub use checkpoint::{
    load_layers, read_checkpoint, snapshot_layers, write_checkpoint, CheckpointLayer,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradcheck, BlockError, Fragment, GradcheckConfig, GradcheckReport};
pub use layers::{
    BatchNorm, Concat, Conv, Layer, LayerKind, LayerSpec, LeakyRelu, Mode, MseHead, ResidualBlock,
    Sigmoid, SoftmaxChannels, UpsampleNearest2x, BN_MOMENTUM, DEFAULT_BN_EPSILON,
    DEFAULT_LEAKY_SLOPE,
};
pub use optim::Sgd;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

/// Errors raised by the tensor engine.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{layer}: shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        what: String,
        expected: String,
        actual: String,
    },
    #[error("{layer}: backward called before forward")]
    BackwardBeforeForward { layer: String },
    #[error("{layer}: non-finite value produced")]
    NonFinite { layer: String },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(
    layer: impl Into<String>,
    what: impl Into<String>,
    expected: impl Display,
    actual: impl Display,
) -> TensorError {
    TensorError::ShapeMismatch {
        layer: layer.into(),
        what: what.into(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Element type of a tensor. `f32` is used for training and inference,
/// `f64` for finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor with an optional gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(mismatch(
                "tensor",
                "buffer length",
                format!("{expected} (shape {shape:?})"),
                data.len(),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); len])
    }

    /// Split borrow of values and (allocated) gradient.
    pub fn data_and_grad_mut(&mut self) -> (&mut [S], &mut [S]) {
        let len = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); len]);
        (&mut self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Interprets the tensor as N×C×H×W.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(mismatch("tensor", "rank", "4 (NCHW)", format!("{other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(mismatch(
                "tensor",
                "reshape",
                self.data.len(),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type (values only; the gradient is dropped).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.as_f64()))
                .collect(),
            grad: None,
        }
    }

    /// Stacks equally shaped NCHW tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidSpec("empty batch".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut n_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (n, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(mismatch(
                    "stack_batch",
                    "sample shape",
                    format!("{c}x{h}x{w}"),
                    format!("{pc}x{ph}x{pw}"),
                ));
            }
            n_total += n;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![n_total, c, h, w], data)
    }

    /// Extracts sample `i` of an NCHW tensor as a 1×C×H×W tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(mismatch("batch_item", "index", format!("< {n}"), i));
        }
        let stride = c * h * w;
        Tensor::new(
            vec![1, c, h, w],
            self.data[i * stride..(i + 1) * stride].to_vec(),
        )
    }
}

pub(crate) fn ensure_finite<S: Scalar>(t: &Tensor<S>, layer: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            layer: layer.to_string(),
        })
    }
}
