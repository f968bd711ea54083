//! Datasets on disk, image codecs, augmentation and batch sampling.
//!
//! Layout: `<root>/<identity>/<camera>_<index>.<ppm|png>` with numeric
//! identity, camera and index. An optional `<root>/splits.txt` assigns whole
//! identities to splits, one `<identity> <train|val|test>` per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Supervision;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const SPLITS_FILE: &str = "splits.txt";

/// One image with its labels. Pixels are `H×W×C` in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub identity: usize,
    pub camera: usize,
    /// Index within `(identity, camera)` as named on disk.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Images loaded from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct identities in ascending order.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn images(&self) -> Vec<&Tensor<T>> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Per-channel mean over every pixel of every image.
    pub fn pixel_mean(&self) -> Vec<f64> {
        let Some(first) = self.samples.first() else { return vec![] };
        let c = first.image.last_dim();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for s in &self.samples {
            for px in s.image.data().chunks(c) {
                for (acc, &v) in sum.iter_mut().zip(px) {
                    *acc += v.as_f64();
                }
                count += 1;
            }
        }
        sum.iter().map(|v| v / count.max(1) as f64).collect()
    }
}

/// Identity → split assignment from `splits.txt`.
pub fn read_splits(root: &Path) -> Result<Option<BTreeMap<usize, Split>>> {
    let path = root.join(SPLITS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!("{}:{}: expected `<identity> <split>`", path.display(), n + 1)));
        };
        let id: usize = id
            .parse()
            .map_err(|_| Error::Dataset(format!("{}:{}: bad identity {id:?}", path.display(), n + 1)))?;
        out.insert(id, split.parse()?);
    }
    Ok(Some(out))
}

pub fn write_splits(root: &Path, splits: &BTreeMap<usize, Split>) -> Result<()> {
    let path = root.join(SPLITS_FILE);
    let mut text = String::new();
    for (id, s) in splits {
        text += &format!("{id:04} {s}\n");
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_stem(stem: &str) -> Option<(usize, usize)> {
    let (cam, idx) = stem.split_once('_')?;
    Some((cam.parse().ok()?, idx.parse().ok()?))
}

/// Loads every image of the identities assigned to `split` (all identities
/// when `split` is `None`), sorted by identity, camera, index.
pub fn load_dataset<T: Real>(root: &Path, split: Option<Split>) -> Result<Dataset<T>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset directory {} not found", root.display())));
    }
    let splits = read_splits(root)?;
    if split.is_some() && splits.is_none() {
        return Err(Error::Dataset(format!(
            "split requested but {} has no {SPLITS_FILE}",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        let p = e.path();
        if !p.is_dir() {
            continue;
        }
        let name = e.file_name().to_string_lossy().into_owned();
        let id: usize = name
            .parse()
            .map_err(|_| Error::Dataset(format!("identity directory {name:?} is not numeric")))?;
        dirs.push((id, p));
    }
    dirs.sort();
    for (id, dir) in dirs {
        if let (Some(want), Some(map)) = (split, &splits) {
            if map.get(&id) != Some(&want) {
                continue;
            }
        }
        let mut files: Vec<(usize, usize, PathBuf)> = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            let ext = p.extension().and_then(|x| x.to_str()).unwrap_or("");
            if !matches!(ext, "ppm" | "png") {
                continue;
            }
            let stem = p.file_stem().and_then(|x| x.to_str()).unwrap_or("");
            let (cam, idx) = parse_stem(stem).ok_or_else(|| {
                Error::Dataset(format!("{} is not named <camera>_<index>", p.display()))
            })?;
            files.push((cam, idx, p));
        }
        files.sort();
        for (camera, index, p) in files {
            samples.push(Sample {
                image: read_image(&p)?,
                identity: id,
                camera,
                index,
            });
        }
    }
    if let Some(first) = samples.first() {
        let shape = first.image.shape().to_vec();
        if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape) {
            return Err(Error::Dataset(format!(
                "mixed image sizes: {:?} and {:?} (identity {}, camera {}, index {})",
                shape,
                bad.image.shape(),
                bad.identity,
                bad.camera,
                bad.index
            )));
        }
    }
    Ok(Dataset { samples })
}

/// Reads an 8-bit PPM (P6) or PNG into `[0,1]` RGB pixels.
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(path, &bytes)
    } else {
        Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: "neither a binary PPM nor a PNG".into(),
        })
    }
}

fn decode_ppm<T: Real>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    let malformed = |msg: &str| Error::Malformed {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace/comments.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("bad header"))?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad PPM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(malformed("only 8-bit PPM (maxval 255) is supported"));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: (pos + need) as u64,
            found: bytes.len() as u64,
        });
    }
    let scale = T::one() / T::of(255.0);
    let data = bytes[pos..pos + need].iter().map(|&b| T::of(b as f64) * scale).collect();
    Tensor::new([h, w, 3], data)
}

fn decode_png<T: Real>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    let malformed = |msg: String| Error::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| malformed(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| malformed("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| malformed(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let scale = T::one() / T::of(255.0);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks(channels) {
        let rgb = match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        data.extend(rgb.iter().map(|&b| T::of(b as f64) * scale));
    }
    Tensor::new([h, w, 3], data)
}

/// Writes `[0,1]` RGB pixels as a binary PPM.
pub fn write_ppm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("write_ppm", s, &[0, 0, 3]));
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write!(w, "P6\n{} {}\n255\n", s[1], s[0])
        .and_then(|_| w.write_all(&bytes))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Horizontal mirror; labels preserved.
pub fn augment_flip<T: Real>(s: &Sample<T>) -> Sample<T> {
    let (h, w, c) = dims(&s.image);
    let src = s.image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in (0..w).rev() {
            out.extend_from_slice(&src[(r * w + col) * c..(r * w + col + 1) * c]);
        }
    }
    Sample {
        image: Tensor::new([h, w, c], out).expect("same shape"),
        ..s.clone()
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Moves content by `(dy, dx)` pixels, replicating edge pixels into the gap.
fn translate<T: Real>(image: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let (h, w, c) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        let sr = (r as isize - dy).clamp(0, h as isize - 1) as usize;
        for col in 0..w {
            let sc = (col as isize - dx).clamp(0, w as isize - 1) as usize;
            out.extend_from_slice(&src[(sr * w + sc) * c..(sr * w + sc + 1) * c]);
        }
    }
    Tensor::new([h, w, c], out).expect("same shape")
}

/// Horizontal and vertical shift amounts for an `h×w` image: 5 and 10 pixels
/// at a 224-pixel reference size, scaled down proportionally, at least 1.
pub fn shift_amounts(h: usize, w: usize) -> (usize, usize) {
    let scaled = |px: usize, size: usize| (px * size / 224).max(1);
    (scaled(5, w), scaled(10, h))
}

/// Two-step shift family: left and right first, then up and down applied to
/// each of those. Returns `[left, right, left+up, left+down, right+up, right+down]`.
pub fn augment_shift<T: Real>(s: &Sample<T>) -> Result<Vec<Sample<T>>> {
    let (h, w, _) = dims(&s.image);
    let (sx, sy) = shift_amounts(h, w);
    if sx >= w || sy >= h {
        return Err(Error::invalid(
            "augment_shift",
            format!("shift ({sx}, {sy}) exceeds image {h}x{w}"),
        ));
    }
    let (sx, sy) = (sx as isize, sy as isize);
    let with = |image| Sample { image, ..s.clone() };
    let stage1 = [translate(&s.image, 0, -sx), translate(&s.image, 0, sx)];
    let mut out: Vec<Sample<T>> = stage1.iter().cloned().map(with).collect();
    for img in &stage1 {
        out.push(with(translate(img, -sy, 0)));
        out.push(with(translate(img, sy, 0)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub shift: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, shift: true }
    }
}

/// Training pool: originals, mirrors, and the shift family of both.
pub fn augment_all<T: Real>(samples: &[Sample<T>], cfg: AugmentConfig) -> Result<Vec<Sample<T>>> {
    let mut base: Vec<Sample<T>> = samples.to_vec();
    if cfg.flip {
        base.extend(samples.iter().map(augment_flip));
    }
    if !cfg.shift {
        return Ok(base);
    }
    let mut out = base.clone();
    for s in &base {
        out.extend(augment_shift(s)?);
    }
    Ok(out)
}

/// Indices and supervision of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub supervision: Supervision,
}

/// At least one off-diagonal positive and one negative pair.
fn usable(labels: &[usize]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    let repeated = labels.iter().any(|l| !seen.insert(*l));
    repeated && seen.len() >= 2
}

const MAX_RESAMPLES: usize = 1000;

/// The batches of one epoch: a seeded shuffle of the pool cut into
/// `batch_size` chunks (the remainder is dropped). A chunk without both a
/// repeated identity and two distinct identities is replaced by a fresh draw
/// without replacement.
pub fn epoch_batches(labels: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<PairBatch>> {
    let n = labels.len();
    let distinct = {
        let mut v = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct < 2 || batch_size < 3 || n < batch_size || distinct == n {
        return Err(Error::Dataset(format!(
            "cannot form batches of {batch_size} from {n} images of {distinct} identities"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::mix(&[seed, epoch])));
    let mut out = Vec::with_capacity(n / batch_size);
    for (b, chunk) in order.chunks_exact(batch_size).enumerate() {
        let mut indices = chunk.to_vec();
        let mut attempt = 0u64;
        while !usable(&indices.iter().map(|&i| labels[i]).collect::<Vec<_>>()) {
            attempt += 1;
            if attempt as usize > MAX_RESAMPLES {
                return Err(Error::Dataset("could not draw a batch with positive and negative pairs".into()));
            }
            let mut r = rng::seeded(rng::mix(&[seed, epoch, b as u64, attempt]));
            indices = rand::seq::index::sample(&mut r, n, batch_size).into_vec();
        }
        let batch_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
        out.push(PairBatch {
            supervision: Supervision::from_labels(&batch_labels)?,
            indices,
            labels: batch_labels,
        });
    }
    Ok(out)
}

/// One batch drawn without replacement (resampled until usable).
pub fn sample_batch(labels: &[usize], batch_size: usize, r: &mut rng::Rng) -> Result<PairBatch> {
    let seed = r.random::<u64>();
    Ok(epoch_batches(labels, batch_size, seed, 0)?.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(h: usize, w: usize, r: usize, c: usize) -> Sample<f64> {
        let mut t = Tensor::zeros([h, w, 1]);
        t.set(&[r, c, 0], 1.0);
        Sample { image: t, identity: 3, camera: 1, index: 0 }
    }

    #[test]
    fn flip_moves_columns() {
        let s = one_hot(2, 5, 1, 1);
        let f = augment_flip(&s);
        assert_eq!(f.image.at(&[1, 3, 0]), 1.0);
        assert_eq!(augment_flip(&f), s);
        assert_eq!(f.identity, 3);
    }

    #[test]
    fn shift_amounts_scale_down() {
        assert_eq!(shift_amounts(224, 224), (5, 10));
        assert_eq!(shift_amounts(64, 64), (1, 2));
        assert_eq!(shift_amounts(32, 32), (1, 1));
    }

    #[test]
    fn left_shift_moves_pixel_left() {
        let s = one_hot(224, 224, 50, 60);
        let fam = augment_shift(&s).unwrap();
        assert_eq!(fam.len(), 6);
        assert_eq!(fam[0].image.at(&[50, 55, 0]), 1.0);
        assert_eq!(fam[1].image.at(&[50, 65, 0]), 1.0);
        // left then up
        assert_eq!(fam[2].image.at(&[40, 55, 0]), 1.0);
        assert_eq!(fam[3].image.at(&[60, 55, 0]), 1.0);
        assert!(fam.iter().all(|v| v.identity == 3 && v.image.sum() == 1.0));
    }

    #[test]
    fn constant_image_shift_invariant() {
        let s = Sample { image: Tensor::full([8, 8, 3], 0.4), identity: 0, camera: 0, index: 0 };
        for v in augment_shift(&s).unwrap() {
            assert_eq!(v.image, s.image);
        }
    }

    #[test]
    fn augmented_pool_sizes() {
        let s = vec![one_hot(8, 8, 2, 2), one_hot(8, 8, 3, 3)];
        assert_eq!(augment_all(&s, AugmentConfig { flip: true, shift: false }).unwrap().len(), 4);
        assert_eq!(augment_all(&s, AugmentConfig { flip: true, shift: true }).unwrap().len(), 28);
    }

    #[test]
    fn batches_are_deterministic_and_usable() {
        let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let a = epoch_batches(&labels, 8, 7, 0).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, epoch_batches(&labels, 8, 7, 0).unwrap());
        assert_ne!(a, epoch_batches(&labels, 8, 8, 0).unwrap());
        assert_ne!(a, epoch_batches(&labels, 8, 7, 1).unwrap());
        for b in &a {
            assert!(usable(&b.labels));
            let mut idx = b.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 8);
        }
    }

    #[test]
    fn single_identity_rejected() {
        assert!(epoch_batches(&[1, 1, 1, 1], 3, 0, 0).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Tensor::<f64>::from_fn([3, 4, 3], |i| (i * 7 % 256) as f64 / 255.0);
        write_ppm(&p, &img).unwrap();
        let back: Tensor<f64> = read_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_image::<f64>(&p), Err(Error::Truncated { .. })));
    }
}
