//! Spatial pyramid pooling and global average pooling.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Real, Tensor};

/// Pyramid levels; level `L` splits the grid into `L×L` bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SppConfig {
    pub levels: Vec<usize>,
}

impl Default for SppConfig {
    fn default() -> Self {
        SppConfig { levels: vec![1, 2] }
    }
}

impl SppConfig {
    /// Output length per channel: `ΣL²`.
    pub fn bins(&self) -> usize {
        spp_len(&self.levels)
    }
}

pub fn spp_len(levels: &[usize]) -> usize {
    levels.iter().map(|l| l * l).sum()
}

/// Half-open cell range of bin `idx` at `level` on a side of length `k`:
/// `[floor(idx·k/L), ceil((idx+1)·k/L))`.
pub fn bin_range(idx: usize, level: usize, k: usize) -> (usize, usize) {
    let start = idx * k / level;
    let end = ((idx + 1) * k).div_ceil(level);
    (start, end)
}

/// Max-pools every bin of every level. Returns values and the flat source index
/// of each maximum (first in row-major order on ties).
pub fn spp_forward<T: Real>(x: &[T], k: usize, d: usize, levels: &[usize]) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(d * spp_len(levels));
    let mut argmax = Vec::with_capacity(out.capacity());
    for &level in levels {
        for by in 0..level {
            let (r0, r1) = bin_range(by, level, k);
            for bx in 0..level {
                let (c0, c1) = bin_range(bx, level, k);
                for c in 0..d {
                    let mut best = (r0 * k + c0) * d + c;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            let src = (i * k + j) * d + c;
                            if x[src] > x[best] {
                                best = src;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (out, argmax)
}

/// Bin containing cell index `i` at `level` (the one whose range starts at or before it).
fn owner(i: usize, level: usize, k: usize) -> usize {
    i * level / k
}

/// Broadcasts pooled bins onto a `k×k×d` grid; each cell averages the bins
/// that own it across levels.
pub fn bin_tile_forward<T: Real>(v: &[T], k: usize, d: usize, levels: &[usize]) -> Vec<T> {
    let scale = T::one() / T::of(levels.len() as f64);
    let mut out = vec![T::zero(); k * k * d];
    let mut offset = 0;
    for &level in levels {
        for i in 0..k {
            for j in 0..k {
                let bin = offset + owner(i, level, k) * level + owner(j, level, k);
                let src = &v[bin * d..(bin + 1) * d];
                let dst = &mut out[(i * k + j) * d..(i * k + j + 1) * d];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s * scale;
                }
            }
        }
        offset += level * level;
    }
    out
}

pub fn bin_tile_backward<T: Real>(g: &[T], k: usize, d: usize, levels: &[usize]) -> Vec<T> {
    let scale = T::one() / T::of(levels.len() as f64);
    let mut dv = vec![T::zero(); d * spp_len(levels)];
    let mut offset = 0;
    for &level in levels {
        for i in 0..k {
            for j in 0..k {
                let bin = offset + owner(i, level, k) * level + owner(j, level, k);
                let src = &g[(i * k + j) * d..(i * k + j + 1) * d];
                for (o, &s) in dv[bin * d..(bin + 1) * d].iter_mut().zip(src) {
                    *o += s * scale;
                }
            }
        }
        offset += level * level;
    }
    dv
}

/// Pyramid descriptor of a map: `D·ΣL²` values, levels in order, bins row-major.
pub fn spp_pool<T: Real>(f: &ActivationMap<T>, cfg: &SppConfig) -> Result<Tensor<T>> {
    if let Some(&l) = cfg.levels.iter().find(|&&l| l > f.side()) {
        return Err(Error::invalid(
            "spp_pool",
            format!("level {l} exceeds map side {}", f.side()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let y = g.spp_pool(x, &cfg.levels)?;
    Ok(g.value(y).clone())
}

/// Every output cell holds the spatial mean vector.
pub fn global_avg_unpool<T: Real>(f: &ActivationMap<T>) -> ActivationMap<T> {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let y = g.global_avg_unpool(x).expect("activation maps are rank 3");
    ActivationMap::from_tensor(g.value(y).clone()).expect("shape preserved")
}
