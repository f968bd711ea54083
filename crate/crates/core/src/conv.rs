//! 2-D convolution on `H×W×C` maps via im2col.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::he_uniform;
use crate::tensor::{Real, Tensor};

/// Geometry of one square-kernel convolution over an `in_h×in_w×in_c` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_c: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_c == 0 || self.out_c == 0 {
            return Err(Error::invalid("conv2d", format!("degenerate geometry {self:?}")));
        }
        if self.in_h + 2 * self.pad < self.kernel || self.in_w + 2 * self.pad < self.kernel {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {} larger than padded input {}x{}",
                    self.kernel,
                    self.in_h + 2 * self.pad,
                    self.in_w + 2 * self.pad
                ),
            ));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Width of one im2col row: `kernel² · in_c`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_c, self.out_c]
    }

    /// Input coordinate touched by output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds `x` into `[out_h·out_w, kernel²·in_c]` patches, zero outside the image.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![T::zero(); oh * ow * pl];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * pl..][..pl];
            for ky in 0..g.kernel {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let src = (iy * g.in_w + ix) * g.in_c;
                    let dst = (ky * g.kernel + kx) * g.in_c;
                    row[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx` (accumulating).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..][..pl];
            for ky in 0..g.kernel {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let dst = (iy * g.in_w + ix) * g.in_c;
                    let src = (ky * g.kernel + kx) * g.in_c;
                    for c in 0..g.in_c {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Weights `[k, k, C_in, C_out]` and bias `[C_out]` of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn init(kernel: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan = kernel * kernel;
        ConvParams {
            w: he_uniform([kernel, kernel, c_in, c_out], fan * c_in, rng),
            b: Tensor::zeros([c_out]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[3]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> (Var, Var) {
        (g.param(&self.w), g.param(&self.b))
    }
}
