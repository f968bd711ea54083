//! Ranking metrics (CMC, mAP), seeded probe/gallery trials, and Mahalanobis
//! region similarities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::Serialize;

use crate::activation::{save_score_grid, ActivationMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Probe × gallery scores; higher means more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    pub probe_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<f64>, probe_ids: Vec<usize>, gallery_ids: Vec<usize>) -> Result<Self> {
        if scores.len() != probe_ids.len() * gallery_ids.len() {
            return Err(Error::shape(
                "ScoreMatrix",
                &[scores.len()],
                &[probe_ids.len(), gallery_ids.len()],
            ));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "score matrix".into(), index: i });
        }
        Ok(ScoreMatrix { scores, probe_ids, gallery_ids })
    }

    pub fn from_tensor<T: Real>(s: &Tensor<T>, probe_ids: Vec<usize>, gallery_ids: Vec<usize>) -> Result<Self> {
        Self::new(s.data().iter().map(|v| v.as_f64()).collect(), probe_ids, gallery_ids)
    }

    pub fn rows(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.scores[p * self.cols()..(p + 1) * self.cols()]
    }

    pub fn at(&self, p: usize, g: usize) -> f64 {
        self.scores[p * self.cols() + g]
    }

    /// Restriction to the given probe rows and gallery columns.
    pub fn select(&self, probes: &[usize], gallery: &[usize]) -> ScoreMatrix {
        let scores = probes
            .iter()
            .flat_map(|&p| gallery.iter().map(move |&g| (p, g)))
            .map(|(p, g)| self.at(p, g))
            .collect();
        ScoreMatrix {
            scores,
            probe_ids: probes.iter().map(|&p| self.probe_ids[p]).collect(),
            gallery_ids: gallery.iter().map(|&g| self.gallery_ids[g]).collect(),
        }
    }

    /// Map transformed by `f` (used to check rank invariance).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreMatrix {
        ScoreMatrix { scores: self.scores.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Writes the scores in the `MISM` grid format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_score_grid(self.rows(), self.cols(), &self.scores, path)
    }
}

/// Gallery indices of one probe row, best first. Ties go to the lower index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// `rates[r-1]` is the fraction of probes matched within the top `r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmcCurve {
    pub rates: Vec<f64>,
}

impl CmcCurve {
    /// Rate at a 1-based rank.
    pub fn at(&self, rank: usize) -> f64 {
        self.rates[rank - 1]
    }

    pub fn rank1(&self) -> f64 {
        self.rates[0]
    }
}

/// Single-shot CMC: each probe identity must appear exactly once in the gallery.
pub fn cmc_single_shot(s: &ScoreMatrix) -> Result<CmcCurve> {
    if s.rows() == 0 || s.cols() == 0 {
        return Err(Error::invalid("cmc_single_shot", "empty score matrix"));
    }
    let mut hist = vec![0usize; s.cols()];
    for (p, id) in s.probe_ids.iter().enumerate() {
        let mut matches = s.gallery_ids.iter().enumerate().filter(|(_, g)| *g == id).map(|(i, _)| i);
        let (Some(target), None) = (matches.next(), matches.next()) else {
            return Err(Error::invalid(
                "cmc_single_shot",
                format!("probe {p} (identity {id}) must match exactly one gallery entry"),
            ));
        };
        let row = s.row(p);
        let t = row[target];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(g, &v)| v > t || (v == t && g < target))
            .count();
        hist[rank] += 1;
    }
    let mut acc = 0usize;
    let rates = hist
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / s.rows() as f64
        })
        .collect();
    Ok(CmcCurve { rates })
}

/// Average precision of one ranked list given relevance flags in rank order.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant_in_rank_order.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over probes of the average precision of the ranked gallery.
pub fn mean_average_precision(s: &ScoreMatrix) -> Result<f64> {
    if s.rows() == 0 {
        return Err(Error::invalid("mean_average_precision", "no probes"));
    }
    let mut total = 0.0;
    for (p, id) in s.probe_ids.iter().enumerate() {
        let rel: Vec<bool> = ranking(s.row(p)).into_iter().map(|g| s.gallery_ids[g] == *id).collect();
        total += average_precision(&rel).ok_or_else(|| {
            Error::invalid(
                "mean_average_precision",
                format!("probe {p} (identity {id}) has no gallery match"),
            )
        })?;
    }
    Ok(total / s.rows() as f64)
}

/// Probe and gallery indices of one evaluation trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// One camera-0 image per identity.
    pub probes: Vec<usize>,
    /// One camera-1 image per identity (single-shot).
    pub gallery: Vec<usize>,
}

/// Images of camera 0 and camera 1 grouped by identity.
fn by_identity<T: Real>(data: &Dataset<T>, camera: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate().filter(|(_, s)| s.camera == camera) {
        m.entry(s.identity).or_default().push(i);
    }
    m
}

/// Draws one trial. Only identities seen by both cameras take part. Indices
/// refer to `data.samples`.
pub fn draw_trial<T: Real>(data: &Dataset<T>, seed: u64) -> Result<Trial> {
    let (a, b) = (by_identity(data, 0), by_identity(data, 1));
    let mut r = rng::seeded(seed);
    let mut trial = Trial { probes: vec![], gallery: vec![] };
    for (id, pa) in &a {
        if let Some(pb) = b.get(id) {
            trial.probes.push(*pa.choose(&mut r).expect("non-empty"));
            trial.gallery.push(*pb.choose(&mut r).expect("non-empty"));
        }
    }
    if trial.probes.len() < 2 {
        return Err(Error::Dataset("evaluation needs at least 2 identities seen by both cameras".into()));
    }
    Ok(trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { trials: 10, seed: 0 }
    }
}

/// Results of repeated single-shot trials plus multi-shot mAP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub trials: Vec<CmcCurve>,
    /// Per trial: trial probes against every camera-1 image.
    pub map: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn gallery_size(&self) -> usize {
        self.trials[0].rates.len()
    }

    /// Mean and sample standard deviation across trials at a 1-based rank.
    pub fn cmc_mean_std(&self, rank: usize) -> (f64, f64) {
        mean_std(&self.trials.iter().map(|c| c.at(rank)).collect::<Vec<_>>())
    }

    pub fn rank1_mean_std(&self) -> (f64, f64) {
        self.cmc_mean_std(1)
    }

    pub fn map_mean_std(&self) -> (f64, f64) {
        mean_std(&self.map)
    }

    /// Plain-text table: rank, one column per trial, mean, std.
    pub fn cmc_table(&self) -> String {
        let mut out = String::from("rank");
        for t in 1..=self.trials.len() {
            let _ = write!(out, "\ttrial{t}");
        }
        out += "\tmean\tstd\n";
        for rank in 1..=self.gallery_size() {
            let _ = write!(out, "{rank}");
            for c in &self.trials {
                let _ = write!(out, "\t{:.4}", c.at(rank));
            }
            let (m, s) = self.cmc_mean_std(rank);
            let _ = writeln!(out, "\t{m:.4}\t{s:.4}");
        }
        out
    }

    /// One JSON object per trial, then a summary object.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (i, (c, m)) in self.trials.iter().zip(&self.map).enumerate() {
            let rec = serde_json::json!({"trial": i, "rank1": c.rank1(), "map": m, "cmc": c.rates});
            out += &rec.to_string();
            out.push('\n');
        }
        let (r1, r1s) = self.rank1_mean_std();
        let (m, ms) = self.map_mean_std();
        let rec = serde_json::json!({
            "summary": true, "trials": self.trials.len(),
            "rank1_mean": r1, "rank1_std": r1s, "map_mean": m, "map_std": ms,
        });
        out += &rec.to_string();
        out.push('\n');
        out
    }
}

/// Every camera-0 image scored against every camera-1 image, plus the
/// sample indices behind rows and columns.
pub fn full_scores<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<(ScoreMatrix, Vec<usize>, Vec<usize>)> {
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].camera == 0).collect();
    let cols: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].camera == 1).collect();
    let img = |v: &[usize]| v.iter().map(|&i| &data.samples[i].image).collect::<Vec<_>>();
    let s = model.score_matrix(&img(&rows), &img(&cols))?;
    let ids = |v: &[usize]| v.iter().map(|&i| data.samples[i].identity).collect();
    Ok((ScoreMatrix::from_tensor(&s, ids(&rows), ids(&cols))?, rows, cols))
}

/// `trials` seeded probe/gallery draws over a precomputed full score matrix.
pub fn evaluate_scores<T: Real>(
    data: &Dataset<T>,
    full: &ScoreMatrix,
    rows: &[usize],
    cols: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("eval.trials must be at least 1".into()));
    }
    let row_of: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let col_of: BTreeMap<usize, usize> = cols.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let mut report = EvalReport { trials: vec![], map: vec![] };
    for t in 0..cfg.trials {
        let trial = draw_trial(data, rng::mix(&[cfg.seed, t as u64]))?;
        let pr: Vec<usize> = trial.probes.iter().map(|i| row_of[i]).collect();
        let gc: Vec<usize> = trial.gallery.iter().map(|i| col_of[i]).collect();
        report.trials.push(cmc_single_shot(&full.select(&pr, &gc))?);
        let all: Vec<usize> = (0..cols.len()).collect();
        report.map.push(mean_average_precision(&full.select(&pr, &all))?);
    }
    Ok(report)
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>, cfg: &EvalConfig) -> Result<EvalReport> {
    let (full, rows, cols) = full_scores(model, data)?;
    evaluate_scores(data, &full, &rows, &cols, cfg)
}

/// Per-region metric matrices `W^r`, each symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSimilarityParams {
    matrices: Vec<Tensor<f64>>,
}

const PSD_TOL: f64 = 1e-10;

/// Semidefinite Cholesky: fails on a negative pivot, or on a zero pivot whose
/// column below is not zero.
fn is_psd(w: &Tensor<f64>) -> bool {
    let n = w.shape()[0];
    let scale = (0..n).map(|i| w.at(&[i, i]).abs()).fold(1.0f64, f64::max);
    let tol = PSD_TOL * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let d = w.at(&[j, j]) - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if d < -tol {
            return false;
        }
        let root = d.max(0.0).sqrt();
        l[j * n + j] = root;
        for i in j + 1..n {
            let v = w.at(&[i, j]) - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if root <= tol.sqrt() {
                if v.abs() > tol.sqrt() {
                    return false;
                }
                l[i * n + j] = 0.0;
            } else {
                l[i * n + j] = v / root;
            }
        }
    }
    true
}

impl RegionSimilarityParams {
    pub fn new(matrices: Vec<Tensor<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::invalid("RegionSimilarityParams", "need at least one region"));
        }
        for (r, w) in matrices.iter().enumerate() {
            let s = w.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(Error::invalid("RegionSimilarityParams", format!("W[{r}] is not square: {s:?}")));
            }
            w.ensure_finite(&format!("W[{r}]"))?;
            let n = s[0];
            for i in 0..n {
                for j in 0..i {
                    let (a, b) = (w.at(&[i, j]), w.at(&[j, i]));
                    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                        return Err(Error::invalid(
                            "RegionSimilarityParams",
                            format!("W[{r}] is not symmetric at ({i}, {j})"),
                        ));
                    }
                }
            }
            if !is_psd(w) {
                return Err(Error::invalid("RegionSimilarityParams", format!("W[{r}] is not positive semidefinite")));
            }
        }
        Ok(RegionSimilarityParams { matrices })
    }

    pub fn regions(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrix(&self, r: usize) -> &Tensor<f64> {
        &self.matrices[r]
    }
}

/// `(xa − xb)ᵀ W (xa − xb)`.
pub fn region_similarity(xa: &[f64], xb: &[f64], w: &Tensor<f64>) -> Result<f64> {
    let n = xa.len();
    if xb.len() != n || w.shape() != [n, n] {
        return Err(Error::shape("region_similarity", &[xa.len(), xb.len()], w.shape()));
    }
    let d: Vec<f64> = xa.iter().zip(xb).map(|(a, b)| a - b).collect();
    let wd = w.data();
    Ok((0..n).map(|i| d[i] * (0..n).map(|j| wd[i * n + j] * d[j]).sum::<f64>()).sum())
}

/// Sum of region similarities.
pub fn integrated_local_similarity(regions: &[(&[f64], &[f64], &Tensor<f64>)]) -> Result<f64> {
    if regions.is_empty() {
        return Err(Error::invalid("integrated_local_similarity", "no regions"));
    }
    regions.iter().map(|(a, b, w)| region_similarity(a, b, w)).sum()
}

/// Rectangular window of map cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Per-channel maximum over a window (a single 1×1 pyramid level).
pub fn region_descriptor<T: Real>(map: &ActivationMap<T>, w: Window) -> Result<Vec<f64>> {
    let k = map.side();
    if w.rows == 0 || w.cols == 0 || w.row + w.rows > k || w.col + w.cols > k {
        return Err(Error::invalid("region_descriptor", format!("window {w:?} outside a {k}x{k} map")));
    }
    let mut out = vec![f64::NEG_INFINITY; map.depth()];
    for i in w.row..w.row + w.rows {
        for j in w.col..w.col + w.cols {
            for (o, v) in out.iter_mut().zip(map.cell(i, j)) {
                *o = o.max(v.as_f64());
            }
        }
    }
    Ok(out)
}

/// `S^Local` between two maps over matching windows.
pub fn local_similarity<T: Real>(
    a: &ActivationMap<T>,
    b: &ActivationMap<T>,
    windows: &[Window],
    params: &RegionSimilarityParams,
) -> Result<f64> {
    if windows.len() != params.regions() {
        return Err(Error::invalid(
            "local_similarity",
            format!("{} windows for {} regions", windows.len(), params.regions()),
        ));
    }
    let mut total = 0.0;
    for (r, &w) in windows.iter().enumerate() {
        total += region_similarity(&region_descriptor(a, w)?, &region_descriptor(b, w)?, params.matrix(r))?;
    }
    Ok(total)
}
