//! im2col / col2im for 3×3 kernels with zero padding 1.

use super::Scalar;

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

pub(crate) fn out_size(len: usize, stride: usize) -> usize {
    (len + 2 - KERNEL) / stride + 1
}

/// Geometry of one convolution over a single C×H×W sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            out_h: out_size(height, stride),
            out_w: out_size(width, stride),
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * TAPS
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - 1;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

/// Unfolds `x` (C×H×W) into `col` ((C·9)×(Ho·Wo)).
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let plane = g.height * g.width;
    let cols = g.cols();
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * cols;
                let dst = &mut col[row..row + cols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ky, g.height) {
                        None => line.iter_mut().for_each(|v| *v = S::zero()),
                        Some(iy) => {
                            let src = &xc[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx, g.width) {
                                    Some(ix) => src[ix],
                                    None => S::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `col` back, accumulating into `dx` (C×H×W).
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, dx: &mut [S]) {
    let plane = g.height * g.width;
    let cols = g.cols();
    for c in 0..g.channels {
        let dc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * cols;
                let src = &col[row..row + cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut dc[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            drow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(out_size(64, 1), 64);
        assert_eq!(out_size(64, 2), 32);
        assert_eq!(out_size(1, 2), 1);
        assert_eq!(out_size(5, 2), 3);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 2);
        let x: Vec<f64> = (0..g.channels * 20)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let y: Vec<f64> = (0..g.rows() * g.cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
