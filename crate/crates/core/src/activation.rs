//! `K×K×D` activation maps and their binary file format.
//!
//! Layout of a `.miam` file (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MIAM"
//! 4       2     version (u16, currently 1)
//! 6       4     K (u32)
//! 10      4     D (u32)
//! 14      1     precision tag (4 = f32, 8 = f64)
//! 15      ...   K·K·D values, row-major (row, column, channel)
//! ```
//!
//! Score matrices use the same layout under magic `"MISM"`, with the two
//! `u32` fields holding rows and columns.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MAP_MAGIC: [u8; 4] = *b"MIAM";
pub const SCORE_MAGIC: [u8; 4] = *b"MISM";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;

/// Square feature grid indexed by (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap<T> {
    values: Tensor<T>,
}

impl<T: Real> ActivationMap<T> {
    pub fn new(k: usize, d: usize, data: Vec<T>) -> Result<Self> {
        Self::from_tensor(Tensor::new([k, k, d], data)?)
    }

    /// Wraps a `K×K×D` tensor; rectangular grids are rejected.
    pub fn from_tensor(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::invalid(
                "activation map",
                format!("expected a square K×K×D grid, got {s:?}"),
            ));
        }
        Ok(ActivationMap { values })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        ActivationMap {
            values: Tensor::zeros([k, k, d]),
        }
    }

    pub fn side(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.values.at(&[i, j, c])
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let d = self.depth();
        let k = self.side();
        &self.values.data()[(i * k + j) * d..(i * k + j + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    /// Mirror across the vertical axis: column `j` moves to `K−1−j`.
    pub fn flip_horizontal(&self) -> Self {
        let (k, d) = (self.side(), self.depth());
        let mut out = Vec::with_capacity(self.values.len());
        for i in 0..k {
            for j in (0..k).rev() {
                out.extend_from_slice(self.cell(i, j));
            }
        }
        ActivationMap::new(k, d, out).expect("same shape")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_activation_map(self, path)
    }
}

fn encode_grid<T: Real>(magic: [u8; 4], a: u32, b: u32, data: &[T]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * T::PRECISION.width());
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&a.to_le_bytes());
    bytes.extend_from_slice(&b.to_le_bytes());
    bytes.push(T::PRECISION.tag());
    for &v in data {
        v.put_le(&mut bytes);
    }
    bytes
}

/// Parses a grid file; returns the two header dimensions, the stored precision
/// and the values converted to `T` (exact when the precisions agree).
fn decode_grid<T: Real>(
    path: &Path,
    bytes: &[u8],
    magic: [u8; 4],
    count: impl Fn(usize, usize) -> usize,
) -> Result<(usize, usize, Precision, Vec<T>)> {
    let truncated = |needed: usize| Error::Truncated {
        path: path.to_path_buf(),
        needed: needed as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let a = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let precision = Precision::from_tag(bytes[14]).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        msg: format!("unknown precision tag {}", bytes[14]),
    })?;
    let n = count(a, b);
    let w = precision.width();
    let needed = HEADER_LEN + n * w;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - needed),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let values = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::get_le(c) as f64))
            .collect(),
        Precision::F64 => payload.chunks_exact(8).map(|c| T::of(f64::get_le(c))).collect(),
    };
    Ok((a, b, precision, values))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_activation_map<T: Real>(m: &ActivationMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_grid(
        MAP_MAGIC,
        m.side() as u32,
        m.depth() as u32,
        m.tensor().data(),
    );
    write(path.as_ref(), &bytes)
}

pub fn load_activation_map<T: Real>(path: impl AsRef<Path>) -> Result<ActivationMap<T>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (k, d, _, values) = decode_grid::<T>(path, &bytes, MAP_MAGIC, |k, d| k * k * d)?;
    ActivationMap::new(k, d, values)
}

/// Writes a `rows×cols` score matrix in the `MISM` layout.
pub fn save_score_grid<T: Real>(
    rows: usize,
    cols: usize,
    data: &[T],
    path: impl AsRef<Path>,
) -> Result<()> {
    assert_eq!(rows * cols, data.len(), "score grid size");
    write(path.as_ref(), &encode_grid(SCORE_MAGIC, rows as u32, cols as u32, data))
}

pub fn load_score_grid<T: Real>(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<T>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (r, c, _, values) = decode_grid::<T>(path, &bytes, SCORE_MAGIC, |r, c| r * c)?;
    Ok((r, c, values))
}
