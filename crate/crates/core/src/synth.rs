//! Synthetic matching datasets: identities defined by planted glyph patches
//! that move between views.
//!
//! Each identity owns `glyphs_per_identity` binary `glyph_size²` patches at
//! fixed base positions, either private to it or a distinct subset of a
//! shared pool. Every image translates the whole layout by an
//! independent offset in `[0, max_translation]` per axis and draws it over a
//! uniform noise background, so two views of one identity are misaligned by
//! at most `max_translation` pixels in each axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, write_splits, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "glyphs.txt";
pub const LIBRARY_FILE: &str = "glyph_library.txt";
pub const CAMERAS: usize = 2;

const LIBRARY_TAG: u64 = 0x6c69_6272;
const LAYOUT_TAG: u64 = 0x6c61_796f;
const IMAGE_TAG: u64 = 0x696d_6167;
const SUBSET_TAG: u64 = 0x7375_6273;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub image_size: usize,
    #[serde(default = "defaults::images_per_camera")]
    pub images_per_camera: usize,
    #[serde(default = "defaults::glyph_size")]
    pub glyph_size: usize,
    #[serde(default = "defaults::glyphs_per_identity")]
    pub glyphs_per_identity: usize,
    /// Size of the shared glyph pool. Each identity draws a distinct subset;
    /// when absent every identity gets glyphs of its own.
    #[serde(default)]
    pub library_size: Option<usize>,
    /// Largest per-axis displacement between two views, in pixels.
    #[serde(default)]
    pub max_translation: usize,
    /// Background pixels are uniform in `[0, noise]`.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Identities assigned to the test split (the last ones).
    #[serde(default)]
    pub test_identities: usize,
    /// Identities assigned to the validation split (just before the test ones).
    #[serde(default)]
    pub val_identities: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn images_per_camera() -> usize {
        8
    }
    pub fn glyph_size() -> usize {
        8
    }
    pub fn glyphs_per_identity() -> usize {
        2
    }
    pub fn noise() -> f64 {
        0.3
    }
}

impl SyntheticSpec {
    /// Spec of the mechanism-efficacy benchmark: 16 identities, 8 images per
    /// identity and camera, translation up to a quarter of the image size.
    /// Identities share a pool of 6 glyphs, 3 each, so test identities are
    /// new arrangements of glyphs seen in training.
    pub fn benchmark(seed: u64) -> Self {
        SyntheticSpec {
            identities: 16,
            image_size: 32,
            images_per_camera: 8,
            glyph_size: 8,
            glyphs_per_identity: 3,
            library_size: Some(6),
            max_translation: 8,
            noise: 0.3,
            test_identities: 8,
            val_identities: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth: {msg}")));
        if self.identities < 2 {
            return bad(format!("identities must be at least 2, got {}", self.identities));
        }
        if self.images_per_camera == 0 || self.glyphs_per_identity == 0 || self.glyph_size < 2 {
            return bad("images_per_camera and glyphs_per_identity must be positive, glyph_size at least 2".into());
        }
        if self.glyph_size >= self.image_size || self.max_translation >= self.image_size - self.glyph_size {
            return bad(format!(
                "max_translation ({}) must be smaller than image_size - glyph_size ({} - {})",
                self.max_translation, self.image_size, self.glyph_size
            ));
        }
        if let Some(l) = self.library_size {
            if binomial(l, self.glyphs_per_identity) < self.identities as u128 {
                return bad(format!(
                    "a pool of {l} glyphs has fewer than {} distinct subsets of {}",
                    self.identities, self.glyphs_per_identity
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        if self.test_identities + self.val_identities >= self.identities {
            return bad(format!(
                "test_identities + val_identities ({}) leaves no training identities out of {}",
                self.test_identities + self.val_identities,
                self.identities
            ));
        }
        Ok(())
    }

    fn library_len(&self) -> usize {
        self.library_size.unwrap_or(self.identities * self.glyphs_per_identity)
    }

    /// Split of identity `id` (test identities last, validation just before).
    pub fn split_of(&self, id: usize) -> Split {
        if id >= self.identities - self.test_identities {
            Split::Test
        } else if id >= self.identities - self.test_identities - self.val_identities {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// Where one glyph was drawn in one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub identity: usize,
    pub camera: usize,
    pub index: usize,
    pub glyph: usize,
    pub row: usize,
    pub col: usize,
}

/// Binary patterns, all distinct, each with half its pixels on.
pub fn glyph_library(spec: &SyntheticSpec) -> Vec<Vec<bool>> {
    let mut r = rng::seeded(rng::mix(&[spec.seed, LIBRARY_TAG]));
    let cells = spec.glyph_size * spec.glyph_size;
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(spec.library_len());
    while out.len() < spec.library_len() {
        // Equal ink per glyph keeps global intensity statistics uninformative.
        let mut g: Vec<bool> = (0..cells).map(|i| i < cells / 2).collect();
        for i in (1..cells).rev() {
            g.swap(i, r.random_range(0..=i));
        }
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k as u128).fold(1, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// Library indices of each identity's glyphs, pairwise distinct as sets.
pub fn glyph_subsets(spec: &SyntheticSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let g = spec.glyphs_per_identity;
    let Some(l) = spec.library_size else {
        return Ok((0..spec.identities).map(|id| (id * g..(id + 1) * g).collect()).collect());
    };
    let mut r = rng::seeded(rng::mix(&[spec.seed, SUBSET_TAG]));
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(spec.identities);
    while out.len() < spec.identities {
        let pick = rand::seq::index::sample(&mut r, l, g).into_vec();
        let mut key = pick.clone();
        key.sort_unstable();
        if !out.iter().any(|o| {
            let mut k = o.clone();
            k.sort_unstable();
            k == key
        }) {
            out.push(pick);
        }
    }
    Ok(out)
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    a.0 < b.0 + size && b.0 < a.0 + size && a.1 < b.1 + size && b.1 < a.1 + size
}

/// Base glyph positions of one identity; non-overlapping when space allows.
fn layout(spec: &SyntheticSpec, id: usize) -> Vec<(usize, usize)> {
    let mut r = rng::seeded(rng::mix(&[spec.seed, LAYOUT_TAG, id as u64]));
    let span = spec.image_size - spec.glyph_size - spec.max_translation;
    let mut out: Vec<(usize, usize)> = Vec::new();
    for _ in 0..spec.glyphs_per_identity {
        let mut pos = (r.random_range(0..=span), r.random_range(0..=span));
        for _ in 0..100 {
            if out.iter().all(|&p| !overlaps(p, pos, spec.glyph_size)) {
                break;
            }
            pos = (r.random_range(0..=span), r.random_range(0..=span));
        }
        out.push(pos);
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Renders every image in memory. Pixel values are multiples of 1/255, so a
/// PPM round trip is exact.
pub fn render<T: Real>(spec: &SyntheticSpec) -> Result<(Vec<Sample<T>>, Vec<Placement>)> {
    spec.validate()?;
    let library = glyph_library(spec);
    let subsets = glyph_subsets(spec)?;
    let (n, gs) = (spec.image_size, spec.glyph_size);
    let mut samples = Vec::new();
    let mut placements = Vec::new();
    for id in 0..spec.identities {
        let base = layout(spec, id);
        for camera in 0..CAMERAS {
            for index in 0..spec.images_per_camera {
                let mut r = rng::seeded(rng::mix(&[spec.seed, IMAGE_TAG, id as u64, camera as u64, index as u64]));
                let dy = r.random_range(0..=spec.max_translation);
                let dx = r.random_range(0..=spec.max_translation);
                let mut px: Vec<f64> = (0..n * n * 3).map(|_| quantize(r.random::<f64>() * spec.noise)).collect();
                for (g, &(by, bx)) in base.iter().enumerate() {
                    let glyph = subsets[id][g];
                    let (row, col) = (by + dy, bx + dx);
                    for y in 0..gs {
                        for x in 0..gs {
                            let v = if library[glyph][y * gs + x] { 1.0 } else { 0.0 };
                            let o = ((row + y) * n + col + x) * 3;
                            px[o..o + 3].fill(v);
                        }
                    }
                    placements.push(Placement { identity: id, camera, index, glyph, row, col });
                }
                samples.push(Sample {
                    image: Tensor::new([n, n, 3], px.into_iter().map(T::of).collect())?,
                    identity: id,
                    camera,
                    index,
                });
            }
        }
    }
    Ok((samples, placements))
}

/// Counts of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub identities: usize,
    pub images: usize,
    pub per_split: BTreeMap<Split, usize>,
}

/// Writes the dataset under `root`. An existing non-empty directory is
/// replaced only with `force`, and only if it holds a generated dataset.
pub fn generate_pair_dataset(spec: &SyntheticSpec, root: &Path, force: bool) -> Result<SynthSummary> {
    spec.validate()?;
    if root.exists() {
        let nonempty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if nonempty {
            if !force {
                return Err(Error::Dataset(format!(
                    "{} already exists and is not empty (pass --force to replace it)",
                    root.display()
                )));
            }
            if !root.join(MANIFEST_FILE).exists() {
                return Err(Error::Dataset(format!(
                    "refusing to replace {}: it does not look like a generated dataset",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (samples, placements) = render::<f64>(spec)?;
    for s in &samples {
        let dir = root.join(format!("{:04}", s.identity));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ppm(&dir.join(format!("{}_{}.ppm", s.camera, s.index)), &s.image)?;
    }
    let splits: BTreeMap<usize, Split> = (0..spec.identities).map(|id| (id, spec.split_of(id))).collect();
    write_splits(root, &splits)?;

    let mut manifest = String::from("# identity camera index glyph row col\n");
    for p in &placements {
        let _ = writeln!(manifest, "{} {} {} {} {} {}", p.identity, p.camera, p.index, p.glyph, p.row, p.col);
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    let mut lib = String::new();
    for g in glyph_library(spec) {
        for row in g.chunks(spec.glyph_size) {
            lib.extend(row.iter().map(|&b| if b { '#' } else { '.' }));
            lib.push('\n');
        }
        lib.push('\n');
    }
    let path = root.join(LIBRARY_FILE);
    fs::write(&path, lib).map_err(|e| Error::io(&path, e))?;

    let mut per_split = BTreeMap::new();
    for s in &samples {
        *per_split.entry(spec.split_of(s.identity)).or_insert(0) += 1;
    }
    Ok(SynthSummary {
        identities: spec.identities,
        images: samples.len(),
        per_split,
    })
}

/// Parses a placement manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<Placement>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Malformed { path: path.clone(), msg: format!("line {}: not six integers", n + 1) })?;
        let [identity, camera, index, glyph, row, col] = v[..] else {
            return Err(Error::Malformed { path: path.clone(), msg: format!("line {}: expected six fields", n + 1) });
        };
        out.push(Placement { identity, camera, index, glyph, row, col });
    }
    Ok(out)
}

/// Rank-1 rate of nearest-neighbour matching on raw pixels: each identity's
/// first camera-0 image against the first camera-1 image of every identity,
/// by Euclidean distance (ties to the lower gallery index).
pub fn raw_pixel_rank1<T: Real>(data: &Dataset<T>) -> f64 {
    let first = |cam: usize| -> BTreeMap<usize, &Tensor<T>> {
        let mut m = BTreeMap::new();
        for s in data.samples.iter().filter(|s| s.camera == cam) {
            m.entry(s.identity).or_insert(&s.image);
        }
        m
    };
    let (probes, gallery) = (first(0), first(1));
    let gallery: Vec<(usize, &Tensor<T>)> = gallery.into_iter().collect();
    let mut hits = 0;
    for (id, p) in &probes {
        let mut best = (f64::INFINITY, usize::MAX);
        for &(gid, g) in &gallery {
            let d: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            if d < best.0 {
                best = (d, gid);
            }
        }
        if best.1 == *id {
            hits += 1;
        }
    }
    hits as f64 / probes.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            identities: 4,
            image_size: 16,
            images_per_camera: 2,
            glyph_size: 4,
            glyphs_per_identity: 2,
            library_size: None,
            max_translation: 3,
            test_identities: 2,
            ..SyntheticSpec::benchmark(3)
        }
    }

    #[test]
    fn zero_translation_zero_noise_views_identical() {
        let spec = SyntheticSpec { max_translation: 0, noise: 0.0, ..small() };
        let (s, _) = render::<f64>(&spec).unwrap();
        for id in 0..4 {
            let views: Vec<_> = s.iter().filter(|x| x.identity == id).collect();
            assert!(views.iter().all(|v| v.image == views[0].image));
        }
    }

    #[test]
    fn displacement_bounded() {
        let (_, p) = render::<f64>(&small()).unwrap();
        for a in &p {
            for b in p.iter().filter(|b| b.glyph == a.glyph) {
                assert!(a.row.abs_diff(b.row) <= 3 && a.col.abs_diff(b.col) <= 3);
            }
        }
    }

    #[test]
    fn library_distinct_and_balanced() {
        let lib = glyph_library(&small());
        assert_eq!(lib.len(), 8);
        for (i, a) in lib.iter().enumerate() {
            assert_eq!(a.iter().filter(|&&b| b).count(), 8);
            assert!(lib[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn shared_pool_subsets_distinct() {
        let spec = SyntheticSpec { library_size: Some(4), identities: 6, test_identities: 3, ..small() };
        let subsets = glyph_subsets(&spec).unwrap();
        let mut keys: Vec<Vec<usize>> = subsets
            .iter()
            .map(|s| {
                let mut k = s.clone();
                k.sort_unstable();
                k
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 6);
        assert!(subsets.iter().flatten().all(|&g| g < 4));
        let too_many = SyntheticSpec { identities: 7, ..spec };
        assert!(too_many.validate().is_err());
    }

    #[test]
    fn rejects_oversized_translation() {
        let spec = SyntheticSpec { max_translation: 12, ..small() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn splits_assign_last_identities_to_test() {
        let spec = SyntheticSpec { val_identities: 1, ..small() };
        let s: Vec<Split> = (0..4).map(|i| spec.split_of(i)).collect();
        assert_eq!(s, [Split::Train, Split::Val, Split::Test, Split::Test]);
    }
}
