//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "DEDNCKPT"
//! version     u32
//! layers      u32
//! per layer:
//!   kind tag  u8
//!   tensors   u32
//!   per tensor:
//!     rank    u32
//!     dims    u32 × rank
//!     payload f32 × product(dims)
//! ```

use std::io::{Read, Write};

use super::{Layer, LayerKind, Result, Scalar, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointLayer {
    pub kind: LayerKind,
    pub tensors: Vec<Tensor<f32>>,
}

fn corrupt(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint(w: &mut impl Write, layers: &[CheckpointLayer]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        w.write_all(&[layer.kind.tag()])?;
        w.write_all(&(layer.tensors.len() as u32).to_le_bytes())?;
        for t in &layer.tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| corrupt("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<CheckpointLayer>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::new();
    for li in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|_| corrupt("truncated file"))?;
        let kind = LayerKind::from_tag(tag[0])
            .ok_or_else(|| corrupt(format!("layer {li}: unknown kind tag {}", tag[0])))?;
        let n_tensors = read_u32(r)? as usize;
        if n_tensors > 64 {
            return Err(corrupt(format!(
                "layer {li}: implausible tensor count {n_tensors}"
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = read_u32(r)? as usize;
            if rank > MAX_RANK {
                return Err(corrupt(format!("layer {li}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut elements: usize = 1;
            for _ in 0..rank {
                let d = read_u32(r)? as usize;
                elements = elements
                    .checked_mul(d)
                    .filter(|&e| e <= MAX_ELEMENTS)
                    .ok_or_else(|| corrupt(format!("layer {li}: dimension overflow")))?;
                shape.push(d);
            }
            let mut buf = vec![0u8; elements * 4];
            r.read_exact(&mut buf)
                .map_err(|_| corrupt("truncated payload"))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        layers.push(CheckpointLayer { kind, tensors });
    }
    Ok(layers)
}

/// Captures parameters and running statistics of `layers` as 32-bit tensors.
pub fn snapshot_layers<'a, S: Scalar>(
    layers: impl IntoIterator<Item = &'a Layer<S>>,
) -> Vec<CheckpointLayer> {
    layers
        .into_iter()
        .map(|l| CheckpointLayer {
            kind: l.kind(),
            tensors: l.state().into_iter().map(|t| t.cast::<f32>()).collect(),
        })
        .collect()
}

/// Restores state captured by [`snapshot_layers`]; kinds and shapes must match exactly.
pub fn load_layers<'a, S: Scalar>(
    layers: impl IntoIterator<Item = &'a mut Layer<S>>,
    saved: &[CheckpointLayer],
) -> Result<()> {
    let mut layers: Vec<&mut Layer<S>> = layers.into_iter().collect();
    if layers.len() != saved.len() {
        return Err(corrupt(format!(
            "model has {} layers, checkpoint has {}",
            layers.len(),
            saved.len()
        )));
    }
    for (i, (layer, ck)) in layers.iter_mut().zip(saved).enumerate() {
        if layer.kind() != ck.kind {
            return Err(corrupt(format!(
                "layer {i}: expected {}, checkpoint has {}",
                layer.kind().name(),
                ck.kind.name()
            )));
        }
        let mut state = layer.state_mut();
        if state.len() != ck.tensors.len() {
            return Err(corrupt(format!("layer {i}: tensor count mismatch")));
        }
        for (dst, src) in state.iter_mut().zip(&ck.tensors) {
            if dst.shape() != src.shape() {
                return Err(corrupt(format!(
                    "layer {i}: shape {:?} vs checkpoint {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = S::from_f64_lossy(s as f64);
            }
        }
    }
    Ok(())
}
