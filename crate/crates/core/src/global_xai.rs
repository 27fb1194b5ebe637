//! Global explainability: aggregated-local-explanation (ALE) matrices, column
//! truncation, PCA and the 2-D density used to draw class regions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, Provenance, TokenizedReport};
use crate::error::{Error, Result};
use crate::explain::{ExplanationRecord, TargetKind};
use crate::mtcnn::Prediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    /// Task that must be predicted correctly (not abstained) for a report to enter.
    pub gating_task: Option<usize>,
    /// Optional restriction of the gating task's true class.
    #[serde(default)]
    pub gating_classes: Option<Vec<usize>>,
    /// Task under analysis.
    pub task: usize,
    /// Classes of the analysis task; both truth and prediction must be in it.
    pub classes: Vec<usize>,
    /// Maximum reports per (truth, prediction) cell.
    pub cap: usize,
    /// Build the abstained cohort (second-choice predictions) instead of the retained one.
    pub abstained: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Row metadata: where the report sits in the (truth, prediction) grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub report_id: usize,
    pub truth: usize,
    pub prediction: usize,
    pub provenance: Provenance,
    pub target_kind: TargetKind,
}

/// Reports × words matrix of summed attribution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AleMatrix {
    pub rows: Vec<RowMeta>,
    pub words: Vec<String>,
    /// Row-major `rows.len() × words.len()`.
    pub values: Vec<f64>,
}

impl AleMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.words.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_cols();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn column_abs_sums(&self) -> Vec<f64> {
        let m = self.n_cols();
        let mut sums = vec![0.0; m];
        for i in 0..self.n_rows() {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v.abs();
            }
        }
        sums
    }

    pub fn select_columns(&self, keep: &[usize]) -> AleMatrix {
        let mut values = Vec::with_capacity(self.n_rows() * keep.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(keep.iter().map(|&j| row[j]));
        }
        AleMatrix {
            rows: self.rows.clone(),
            words: keep.iter().map(|&j| self.words[j].clone()).collect(),
            values,
        }
    }

    /// `ale.csv` (header = words) plus `ale_rows.jsonl` (row metadata).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ale.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.words)?;
        for i in 0..self.n_rows() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_jsonl(&dir.join("ale_rows.jsonl"), &self.rows)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rows: Vec<RowMeta> = read_jsonl(&dir.join("ale_rows.jsonl"))?;
        let mut r = csv::Reader::from_path(dir.join("ale.csv"))?;
        let words: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut values = Vec::with_capacity(rows.len() * words.len());
        for rec in r.records() {
            for field in rec?.iter() {
                values.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("ale.csv: {e}")))?,
                );
            }
        }
        if values.len() != rows.len() * words.len() {
            return Err(Error::Shape("ale.csv does not match ale_rows.jsonl".into()));
        }
        Ok(AleMatrix { rows, words, values })
    }
}

/// The `n` most prevalent classes among `labels`, ties broken by class index.
pub fn top_classes(labels: impl IntoIterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut v: Vec<(usize, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(c, _)| c).collect()
}

/// Selects reports, caps each (truth, prediction) cell and assembles the ALE matrix.
pub fn build_cohort(
    reports: &[&TokenizedReport],
    predictions: &[Prediction],
    explanations: &[ExplanationRecord],
    spec: &CohortSpec,
) -> Result<AleMatrix> {
    if spec.cap == 0 {
        return Err(Error::InvalidArgument("cohort cap must be at least 1".into()));
    }
    if spec.classes.is_empty() {
        return Err(Error::InvalidArgument("cohort class subset is empty".into()));
    }
    let preds: HashMap<usize, &Prediction> = predictions.iter().map(|p| (p.report_id, p)).collect();
    let expl: HashMap<usize, &ExplanationRecord> = explanations.iter().map(|e| (e.report_id, e)).collect();

    let mut stage: Vec<(&TokenizedReport, &Prediction, &ExplanationRecord)> = reports
        .iter()
        .filter_map(|r| Some((*r, *preds.get(&r.id)?, *expl.get(&r.id)?)))
        .collect();
    let nonempty = |stage: &Vec<_>, filter: &str| {
        if stage.is_empty() {
            Err(Error::EmptyCohort {
                filter: filter.to_string(),
            })
        } else {
            Ok(())
        }
    };
    nonempty(&stage, "predictions and explanations available")?;
    for (_, p, _) in &stage {
        if spec.task >= p.tasks.len() || spec.gating_task.is_some_and(|g| g >= p.tasks.len()) {
            return Err(Error::InvalidArgument("cohort task index out of range".into()));
        }
    }

    if let Some(g) = spec.gating_task {
        stage.retain(|(r, p, _)| {
            let out = &p.tasks[g];
            !out.abstained && out.predicted == r.labels[g]
        });
        nonempty(&stage, "gating task predicted correctly")?;
        if let Some(classes) = &spec.gating_classes {
            stage.retain(|(r, _, _)| classes.contains(&r.labels[g]));
            nonempty(&stage, "gating class subset")?;
        }
    }
    stage.retain(|(_, p, _)| p.tasks[spec.task].abstained == spec.abstained);
    nonempty(
        &stage,
        if spec.abstained {
            "abstained on task"
        } else {
            "retained on task"
        },
    )?;
    stage.retain(|(r, p, _)| {
        spec.classes.contains(&r.labels[spec.task]) && spec.classes.contains(&p.tasks[spec.task].answer())
    });
    nonempty(&stage, "class subset")?;

    let expected_kind = if spec.abstained {
        TargetKind::SecondChoice
    } else {
        TargetKind::TopPrediction
    };
    let mut cells: BTreeMap<(usize, usize), Vec<(&TokenizedReport, &Prediction, &ExplanationRecord)>> = BTreeMap::new();
    for item in stage {
        let (r, p, e) = item;
        let out = &p.tasks[spec.task];
        if e.target_kind != expected_kind || e.target_class != out.answer() {
            return Err(Error::InvalidArgument(format!(
                "report {}: explanation target does not match the {} cohort",
                r.id,
                if spec.abstained { "abstained" } else { "retained" }
            )));
        }
        cells.entry((r.labels[spec.task], out.answer())).or_default().push(item);
    }

    let mut kept = Vec::new();
    for (&(truth, pred), members) in cells.iter_mut() {
        members.sort_by_key(|(r, _, _)| r.id);
        let cell_seed = spec
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(((truth as u64) << 32) ^ pred as u64);
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(cell_seed));
        members.truncate(spec.cap);
        members.sort_by_key(|(r, _, _)| r.id);
        kept.extend(members.iter().map(|&(r, _, e)| (truth, pred, r, e)));
    }

    let words: Vec<String> = kept
        .iter()
        .flat_map(|(_, _, _, e)| e.words.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col: HashMap<&str, usize> = words.iter().enumerate().map(|(j, w)| (w.as_str(), j)).collect();
    let m = words.len();
    let rows: Vec<(RowMeta, Vec<f64>)> = kept
        .par_iter()
        .map(|&(truth, prediction, r, e)| {
            let mut row = vec![0.0; m];
            for (w, v) in &e.words {
                row[col[w.as_str()]] = *v;
            }
            (
                RowMeta {
                    report_id: r.id,
                    truth,
                    prediction,
                    provenance: r.provenance,
                    target_kind: e.target_kind,
                },
                row,
            )
        })
        .collect();
    let mut meta = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * m);
    for (rm, row) in rows {
        meta.push(rm);
        values.extend(row);
    }
    Ok(AleMatrix {
        rows: meta,
        words,
        values,
    })
}

/// Keeps column `j` iff `Σ_i |w_ij| > threshold`.
pub fn truncate(matrix: &AleMatrix, threshold: f64) -> Result<AleMatrix> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    let keep: Vec<usize> = matrix
        .column_abs_sums()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(Error::AllColumnsRemoved { threshold });
    }
    Ok(matrix.select_columns(&keep))
}

/// Threshold that keeps (at most) the `n` heaviest columns.
pub fn threshold_for_top(matrix: &AleMatrix, n: usize) -> f64 {
    let mut sums = matrix.column_abs_sums();
    if sums.len() <= n {
        return 0.0;
    }
    sums.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sums[n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub words: Vec<String>,
    pub means: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[c]` is component `c` over the words.
    pub eigenvectors: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub retained: usize,
    /// `projections[i]` holds report `i` on the retained components.
    pub projections: Vec<Vec<f64>>,
    pub rows: Vec<RowMeta>,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n × n` row-major matrix.
/// Returns eigenvalues (unsorted) and the eigenvector matrix with eigenvectors
/// in its columns.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= frob * 1e-32 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Sample covariance (divisor n − 1) of the mean-centred columns.
pub fn covariance(matrix: &AleMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (matrix.n_rows(), matrix.n_cols());
    let mut means = vec![0.0; m];
    for i in 0..n {
        means.iter_mut().zip(matrix.row(i)).for_each(|(a, b)| *a += b);
    }
    means.iter_mut().for_each(|x| *x /= n as f64);
    let mut cov = vec![0.0; m * m];
    for i in 0..n {
        let c: Vec<f64> = matrix.row(i).iter().zip(&means).map(|(x, mu)| x - mu).collect();
        for a in 0..m {
            if c[a] == 0.0 {
                continue;
            }
            for b in a..m {
                cov[a * m + b] += c[a] * c[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..m {
        for b in a..m {
            let v = cov[a * m + b] / denom;
            cov[a * m + b] = v;
            cov[b * m + a] = v;
        }
    }
    (means, cov)
}

/// PCA on the centred (unscaled) ALE matrix. `retained` is the smallest
/// component count reaching `variance_goal`, but at least two when the matrix
/// has two columns.
pub fn pca(matrix: &AleMatrix, variance_goal: f64) -> Result<PcaResult> {
    let (n, m) = (matrix.n_rows(), matrix.n_cols());
    if n < 2 || m < 1 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 rows and 1 column, got {n}×{m}"
        )));
    }
    if !(variance_goal > 0.0 && variance_goal <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance goal {variance_goal} outside (0, 1]"
        )));
    }
    let (means, cov) = covariance(matrix);
    let trace: f64 = (0..m).map(|i| cov[i * m + i]).sum();
    if !(trace > 0.0) {
        return Err(Error::Degenerate("ALE matrix has zero variance (rank 0)".into()));
    }
    let (vals, vecs) = jacobi_eigen(cov, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = (0..m).map(|r| vecs[r * m + c]).collect();
            fix_sign(&mut v);
            v
        })
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_variance: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();
    let mut cum = 0.0;
    let mut retained = m;
    for (i, f) in explained_variance.iter().enumerate() {
        cum += f;
        if cum >= variance_goal - 1e-12 {
            retained = i + 1;
            break;
        }
    }
    let retained = retained.max(2).min(m);
    let projections = (0..n)
        .map(|i| {
            let centred: Vec<f64> = matrix.row(i).iter().zip(&means).map(|(x, mu)| x - mu).collect();
            eigenvectors[..retained]
                .iter()
                .map(|v| v.iter().zip(&centred).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        words: matrix.words.clone(),
        means,
        eigenvalues,
        eigenvectors,
        explained_variance,
        retained,
        projections,
        rows: matrix.rows.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordAnnotation {
    pub word: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// The `top_n` words with the largest loading magnitude on the first two components.
pub fn keyword_annotations(pca: &PcaResult, top_n: usize) -> Vec<KeywordAnnotation> {
    let pc = |c: usize, j: usize| pca.eigenvectors.get(c).map_or(0.0, |v| v[j]);
    let mut items: Vec<KeywordAnnotation> = pca
        .words
        .iter()
        .enumerate()
        .map(|(j, w)| KeywordAnnotation {
            word: w.clone(),
            pc1: pc(0, j),
            pc2: pc(1, j),
        })
        .collect();
    let score = |k: &KeywordAnnotation| k.pc1.abs().max(k.pc2.abs());
    items.sort_by(|a, b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap()
            .then_with(|| a.word.cmp(&b.word))
    });
    items.truncate(top_n);
    items
}

impl PcaResult {
    /// `pca.json`, `projections.csv` and `eigen_table.csv`.
    pub fn save(&self, dir: &Path, table_rows: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            words: &'a [String],
            means: &'a [f64],
            eigenvalues: &'a [f64],
            eigenvectors: &'a [Vec<f64>],
            explained_variance: &'a [f64],
            retained: usize,
        }
        crate::corpus::write_json(
            &dir.join("pca.json"),
            &Summary {
                words: &self.words,
                means: &self.means,
                eigenvalues: &self.eigenvalues,
                eigenvectors: &self.eigenvectors,
                explained_variance: &self.explained_variance,
                retained: self.retained,
            },
        )?;
        let path = dir.join("projections.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec![
            "report_id".to_string(),
            "truth".into(),
            "prediction".into(),
            "provenance".into(),
        ];
        header.extend((1..=self.retained).map(|c| format!("pc{c}")));
        w.write_record(&header)?;
        for (meta, proj) in self.rows.iter().zip(&self.projections) {
            let mut rec = vec![
                meta.report_id.to_string(),
                meta.truth.to_string(),
                meta.prediction.to_string(),
                meta.provenance.as_str().to_string(),
            ];
            rec.extend(proj.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.write_eigen_table(&dir.join("eigen_table.csv"), table_rows)
    }

    /// Words ranked by loading magnitude with their PC1/PC2 eigenvector entries,
    /// preceded by the eigenvalue and explained-variance rows.
    pub fn write_eigen_table(&self, path: &Path, rows: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["word", "PC1", "PC2"])?;
        let ev = |c: usize| self.eigenvalues.get(c).copied().unwrap_or(0.0);
        let ex = |c: usize| self.explained_variance.get(c).copied().unwrap_or(0.0);
        w.write_record(["eigenvalue", &format!("{:.6}", ev(0)), &format!("{:.6}", ev(1))])?;
        w.write_record(["explained_variance", &format!("{:.6}", ex(0)), &format!("{:.6}", ex(1))])?;
        for k in keyword_annotations(self, rows) {
            w.write_record([k.word.as_str(), &format!("{:.6}", k.pc1), &format!("{:.6}", k.pc2)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_summary(path: &Path) -> Result<serde_json::Value> {
        crate::corpus::read_json(path)
    }
}

/// Density on a regular grid of cell centres.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major over y then x.
    pub values: Vec<f64>,
    points: Vec<(f64, f64)>,
    bandwidth: f64,
    norm: f64,
}

impl DensityGrid {
    pub fn node(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x0 + (ix as f64 + 0.5) * self.dx,
            self.y0 + (iy as f64 + 0.5) * self.dy,
        )
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.x0,
            self.y0,
            self.x0 + self.nx as f64 * self.dx,
            self.y0 + self.ny as f64 * self.dy,
        )
    }

    /// Normalised density at an arbitrary point of the box.
    pub fn density_at(&self, x: f64, y: f64) -> f64 {
        raw_density(&self.points, self.bandwidth, x, y) / self.norm
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.nx, best / self.nx)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn raw_density(points: &[(f64, f64)], h: f64, x: f64, y: f64) -> f64 {
    let c = 1.0 / (2.0 * std::f64::consts::PI * h * h * points.len() as f64);
    points
        .iter()
        .map(|(px, py)| {
            let r2 = (x - px).powi(2) + (y - py).powi(2);
            (-r2 / (2.0 * h * h)).exp()
        })
        .sum::<f64>()
        * c
}

/// Isotropic Gaussian KDE over the bounding box of `points` widened by 10% on
/// each side, normalised to unit mass over that box.
pub fn kde2d(points: &[(f64, f64)], resolution: usize, bandwidth: f64) -> Result<DensityGrid> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("KDE needs at least 2 points".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "KDE bandwidth must be positive, got {bandwidth}"
        )));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument("KDE grid resolution must be at least 2".into()));
    }
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let margin = if hi > lo { 0.1 * (hi - lo) } else { 3.0 * bandwidth };
        (lo - margin, hi + margin)
    };
    let (xl, xh) = span(points.iter().map(|p| p.0).collect());
    let (yl, yh) = span(points.iter().map(|p| p.1).collect());
    let (dx, dy) = ((xh - xl) / resolution as f64, (yh - yl) / resolution as f64);
    let mut grid = DensityGrid {
        x0: xl,
        y0: yl,
        dx,
        dy,
        nx: resolution,
        ny: resolution,
        values: vec![],
        points: points.to_vec(),
        bandwidth,
        norm: 1.0,
    };
    let raw: Vec<f64> = (0..resolution * resolution)
        .into_par_iter()
        .map(|i| {
            let (x, y) = grid.node(i % resolution, i / resolution);
            raw_density(points, bandwidth, x, y)
        })
        .collect();
    let mass: f64 = raw.iter().sum::<f64>() * dx * dy;
    if !(mass > 0.0) {
        return Err(Error::Degenerate(
            "KDE mass vanished on the grid; bandwidth too small".into(),
        ));
    }
    grid.values = raw.into_iter().map(|v| v / mass).collect();
    grid.norm = mass;
    Ok(grid)
}

/// Silverman-style isotropic bandwidth.
pub fn default_bandwidth(points: &[(f64, f64)]) -> f64 {
    let n = points.len().max(2) as f64;
    let sd = |vals: Vec<f64>| {
        let mu = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let s = 0.5 * (sd(points.iter().map(|p| p.0).collect()) + sd(points.iter().map(|p| p.1).collect()));
    let s = if s > 0.0 { s } else { 1.0 };
    s * n.powf(-1.0 / 6.0)
}

pub type Segment = ((f64, f64), (f64, f64));

/// Marching-squares iso-lines of the grid at `level`, as line segments.
pub fn contour_segments(grid: &DensityGrid, level: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    let lerp = |a: (f64, f64), b: (f64, f64), va: f64, vb: f64| {
        let t = if vb != va { (level - va) / (vb - va) } else { 0.5 };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    for iy in 0..grid.ny.saturating_sub(1) {
        for ix in 0..grid.nx.saturating_sub(1) {
            let p = [
                grid.node(ix, iy),
                grid.node(ix + 1, iy),
                grid.node(ix + 1, iy + 1),
                grid.node(ix, iy + 1),
            ];
            let v = [
                grid.value(ix, iy),
                grid.value(ix + 1, iy),
                grid.value(ix + 1, iy + 1),
                grid.value(ix, iy + 1),
            ];
            let case = v
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &x)| acc | (u8::from(x >= level) << i));
            let edge = |e: usize| {
                let (a, b) = (e, (e + 1) % 4);
                lerp(p[a], p[b], v[a], v[b])
            };
            let center_high = v.iter().sum::<f64>() / 4.0 >= level;
            let pairs: &[(usize, usize)] = match case {
                0 | 15 => &[],
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(2, 3)],
                5 if center_high => &[(0, 1), (2, 3)],
                5 => &[(3, 0), (1, 2)],
                10 if center_high => &[(3, 0), (1, 2)],
                _ => &[(0, 1), (2, 3)],
            };
            out.extend(pairs.iter().map(|&(a, b)| (edge(a), edge(b))));
        }
    }
    out
}

/// Five evenly spaced levels strictly between 0 and the grid maximum.
pub fn contour_levels(grid: &DensityGrid) -> Vec<f64> {
    let max = grid.max();
    (1..=5).map(|i| max * i as f64 / 6.0).collect()
}

pub fn write_rows_jsonl(path: &Path, rows: &[RowMeta]) -> Result<()> {
    write_jsonl(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtcnn::TaskOutput;
    use rand::Rng;

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> AleMatrix {
        AleMatrix {
            rows: (0..rows)
                .map(|i| RowMeta {
                    report_id: i,
                    truth: 0,
                    prediction: 0,
                    provenance: Provenance::Clean,
                    target_kind: TargetKind::TopPrediction,
                })
                .collect(),
            words: (0..cols).map(|j| format!("w{j}")).collect(),
            values: data,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> AleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn truncation_rules() {
        let m = matrix(2, 3, vec![5.0, 0.05, 0.0, 0.0, -0.05, 0.0]);
        assert_eq!(truncate(&m, 0.0).unwrap().words, vec!["w0", "w1"]);
        assert_eq!(truncate(&m, 1.0).unwrap().words, vec!["w0"]);
        assert!(matches!(truncate(&m, 10.0), Err(Error::AllColumnsRemoved { .. })));
    }

    #[test]
    fn truncation_matches_brute_force_and_is_idempotent() {
        let m = random_matrix(30, 12, 4);
        for t in [0.0, 5.0, 10.0, 14.0] {
            let kept = truncate(&m, t).unwrap();
            let brute: Vec<String> = (0..12)
                .filter(|&j| (0..30).map(|i| m.get(i, j).abs()).sum::<f64>() > t)
                .map(|j| format!("w{j}"))
                .collect();
            assert_eq!(kept.words, brute);
            assert_eq!(truncate(&kept, t).unwrap(), kept);
        }
    }

    #[test]
    fn top_columns_threshold() {
        let m = random_matrix(10, 30, 5);
        let t = threshold_for_top(&m, 7);
        assert_eq!(truncate(&m, t).unwrap().n_cols(), 7);
        assert_eq!(threshold_for_top(&m, 40), 0.0);
    }

    #[test]
    fn pca_on_a_line() {
        let m = matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let p = pca(&m, 0.9).unwrap();
        assert!(p.eigenvalues[1].abs() <= 1e-10);
        assert!((p.explained_variance[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.retained, 2);
    }

    #[test]
    fn pca_isotropic_square() {
        let m = matrix(4, 2, vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let p = pca(&m, 0.9).unwrap();
        assert!((p.eigenvalues[0] - p.eigenvalues[1]).abs() < 1e-12);
        assert!((p.eigenvalues[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_rank_zero_and_tiny_input() {
        let m = matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(pca(&m, 0.9), Err(Error::Degenerate(_))));
        assert!(pca(&matrix(1, 2, vec![1.0, 2.0]), 0.9).is_err());
    }

    #[test]
    fn pca_sign_convention_and_orthonormality() {
        let m = random_matrix(40, 6, 9);
        let p = pca(&m, 0.9).unwrap();
        for v in &p.eigenvectors {
            let imax = (0..v.len())
                .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
                .unwrap();
            assert!(v[imax] > 0.0);
        }
        for a in 0..6 {
            for b in 0..6 {
                let d: f64 = p.eigenvectors[a]
                    .iter()
                    .zip(&p.eigenvectors[b])
                    .map(|(x, y)| x * y)
                    .sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        assert!(p.explained_variance.iter().sum::<f64>() <= 1.0 + 1e-9);
        assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn keyword_annotation_cases() {
        let m = matrix(3, 1, vec![1.0, 2.0, 4.0]);
        let p = pca(&m, 0.9).unwrap();
        let k = keyword_annotations(&p, 1);
        assert_eq!(k.len(), 1);
        assert!((k[0].pc1.abs() - 1.0).abs() < 1e-12);

        let p = pca(&random_matrix(20, 5, 2), 0.9).unwrap();
        let all = keyword_annotations(&p, 5);
        assert_eq!(all.len(), 5);
        let s: Vec<f64> = all.iter().map(|k| k.pc1.abs().max(k.pc2.abs())).collect();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn kde_single_cluster_peaks_near_origin() {
        let pts = vec![(-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (0.0, 0.0)];
        let g = kde2d(&pts, 21, 0.8).unwrap();
        let (ix, iy) = g.argmax();
        let nearest = (0..21 * 21)
            .map(|i| (i % 21, i / 21))
            .min_by(|a, b| {
                let na = g.node(a.0, a.1);
                let nb = g.node(b.0, b.1);
                (na.0.hypot(na.1)).partial_cmp(&nb.0.hypot(nb.1)).unwrap()
            })
            .unwrap();
        assert_eq!((ix, iy), nearest);
        assert!(kde2d(&pts, 21, 0.0).is_err());
        assert!(kde2d(&pts[..1], 21, 1.0).is_err());
    }

    #[test]
    fn kde_two_clusters_have_two_maxima() {
        let mut pts = vec![];
        for i in 0..10 {
            let e = i as f64 * 0.05;
            pts.push((e, e));
            pts.push((10.0 + e, 10.0 - e));
        }
        let g = kde2d(&pts, 40, 0.5).unwrap();
        let mut maxima = 0;
        for iy in 1..39 {
            for ix in 1..39 {
                let v = g.value(ix, iy);
                let neighbours = [(ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)];
                if neighbours.iter().all(|&(x, y)| g.value(x, y) < v) && v > 1e-6 {
                    maxima += 1;
                }
            }
        }
        assert_eq!(maxima, 2);
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|_| (rng.gen_range(-2.0..3.0), rng.gen_range(0.0..1.0)))
            .collect();
        let g = kde2d(&pts, 120, default_bandwidth(&pts)).unwrap();
        // Independent midpoint quadrature on a finer, offset grid.
        let (x0, y0, x1, y1) = g.bounds();
        let k = 300;
        let (hx, hy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                total += g.density_at(x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy);
            }
        }
        total *= hx * hy;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn contours_surround_a_peak() {
        let pts = vec![(0.0, 0.0), (0.1, 0.0), (0.0, 0.1), (-5.0, -5.0), (5.0, 5.0)];
        let g = kde2d(&pts, 40, 0.7).unwrap();
        for level in contour_levels(&g) {
            let segs = contour_segments(&g, level);
            assert!(!segs.is_empty());
        }
    }

    fn pred(id: usize, site: (usize, bool), hist: (usize, bool)) -> Prediction {
        let out = |task: &str, class: usize, abstain: bool, k: usize| {
            let mut z = vec![0.0; k + 1];
            z[class] = 2.0;
            if abstain {
                z[k] = 5.0;
            }
            TaskOutput::from_logits(task, &z)
        };
        Prediction {
            report_id: id,
            tasks: vec![out("site", site.0, site.1, 2), out("hist", hist.0, hist.1, 3)],
        }
    }

    fn record(id: usize, class: usize, kind: TargetKind, words: &[(&str, f64)]) -> ExplanationRecord {
        ExplanationRecord {
            report_id: id,
            task: "hist".into(),
            target_class: class,
            target_kind: kind,
            weights: vec![],
            words: words.iter().map(|(w, v)| (w.to_string(), *v)).collect(),
        }
    }

    fn rep(id: usize, labels: Vec<usize>) -> TokenizedReport {
        TokenizedReport {
            id,
            tokens: vec![],
            labels,
            provenance: Provenance::Clean,
        }
    }

    #[test]
    fn cohort_cap_and_filters() {
        let reports = vec![
            rep(0, vec![0, 1]),
            rep(1, vec![0, 1]),
            rep(2, vec![0, 2]),
            rep(3, vec![1, 2]),
        ];
        let preds = vec![
            pred(0, (0, false), (1, false)),
            pred(1, (0, false), (1, false)),
            pred(2, (0, false), (2, false)),
            pred(3, (0, false), (2, false)),
        ];
        let expl = vec![
            record(0, 1, TargetKind::TopPrediction, &[("a", 1.0)]),
            record(1, 1, TargetKind::TopPrediction, &[("b", 1.0)]),
            record(2, 2, TargetKind::TopPrediction, &[("a", -1.0), ("c", 0.5)]),
            record(3, 2, TargetKind::TopPrediction, &[("d", 1.0)]),
        ];
        let refs: Vec<&TokenizedReport> = reports.iter().collect();
        let spec = CohortSpec {
            gating_task: Some(0),
            gating_classes: None,
            task: 1,
            classes: vec![0, 1, 2],
            cap: 1,
            abstained: false,
            seed: 3,
        };
        let m = build_cohort(&refs, &preds, &expl, &spec).unwrap();
        // Report 3 fails the site gate; cell (1,1) keeps one of two.
        assert_eq!(m.n_rows(), 2);
        assert!(m.rows.iter().all(|r| r.report_id != 3));
        assert_eq!(m, build_cohort(&refs, &preds, &expl, &spec).unwrap());
        let c = m.words.iter().position(|w| w == "c").unwrap();
        let row2 = m.rows.iter().position(|r| r.report_id == 2).unwrap();
        assert_eq!(m.get(row2, c), 0.5);

        let abst = CohortSpec {
            abstained: true,
            ..spec.clone()
        };
        match build_cohort(&refs, &preds, &expl, &abst) {
            Err(Error::EmptyCohort { filter }) => assert!(filter.contains("abstained")),
            other => panic!("{other:?}"),
        }
        let gate_all = CohortSpec {
            gating_classes: Some(vec![1]),
            ..spec.clone()
        };
        assert!(matches!(
            build_cohort(&refs, &preds, &expl, &gate_all),
            Err(Error::EmptyCohort { .. })
        ));
    }

    #[test]
    fn abstained_cohort_requires_second_choice_targets() {
        let reports = vec![rep(0, vec![0, 1])];
        let preds = vec![pred(0, (0, false), (1, true))];
        let refs: Vec<&TokenizedReport> = reports.iter().collect();
        let spec = CohortSpec {
            gating_task: Some(0),
            gating_classes: None,
            task: 1,
            classes: vec![0, 1, 2],
            cap: 10,
            abstained: true,
            seed: 0,
        };
        let good = vec![record(0, 1, TargetKind::SecondChoice, &[("x", 1.0)])];
        let m = build_cohort(&refs, &preds, &good, &spec).unwrap();
        assert!(m.rows.iter().all(|r| r.target_kind == TargetKind::SecondChoice));
        let bad = vec![record(0, 1, TargetKind::TopPrediction, &[("x", 1.0)])];
        assert!(build_cohort(&refs, &preds, &bad, &spec).is_err());
    }

    #[test]
    fn ale_matrix_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_matrix(5, 4, 1);
        m.save(dir.path()).unwrap();
        assert_eq!(AleMatrix::load(dir.path()).unwrap(), m);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn pca_is_self_consistent(rows in 3usize..30, cols in 2usize..10, seed in 0u64..1000) {
            let m = random_matrix(rows, cols, seed);
            let p = pca(&m, 0.9).unwrap();
            let (_, cov) = covariance(&m);
            let trace: f64 = (0..cols).map(|i| cov[i * cols + i]).sum();
            proptest::prop_assert!((p.eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-8);
            for c in 0..p.retained {
                let xs: Vec<f64> = p.projections.iter().map(|r| r[c]).collect();
                let mu = xs.iter().sum::<f64>() / rows as f64;
                let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (rows - 1) as f64;
                let lambda = p.eigenvalues[c];
                proptest::prop_assert!((var - lambda).abs() <= 1e-6 * lambda.abs().max(1e-12));
            }
        }

        #[test]
        fn pca_is_column_permutation_equivariant(rows in 3usize..25, cols in 2usize..8, seed in 0u64..1000) {
            let m = random_matrix(rows, cols, seed);
            let mut perm: Vec<usize> = (0..cols).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
            let permuted = m.select_columns(&perm);
            let (a, b) = (pca(&m, 0.9).unwrap(), pca(&permuted, 0.9).unwrap());
            for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                proptest::prop_assert!((x - y).abs() < 1e-10);
            }
            proptest::prop_assert_eq!(a.retained, b.retained);
            for c in 0..a.retained {
                for (k, &j) in perm.iter().enumerate() {
                    proptest::prop_assert!((a.eigenvectors[c][j] - b.eigenvectors[c][k]).abs() < 1e-10);
                }
                for (ra, rb) in a.projections.iter().zip(&b.projections) {
                    proptest::prop_assert!((ra[c] - rb[c]).abs() < 1e-10);
                }
            }
        }
    }
}
