//! Evaluation: retained accuracy, abstention, per-class statistics, top-K
//! confusion matrices and the accuracy–abstention trade-off sweep.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, TokenizedReport};
use crate::dac::{self, DacConfig};
use crate::error::{Error, Result};
use crate::mtcnn::{Model, Prediction};
use crate::nn::Architecture;

pub const ABSTAIN_LABEL: &str = "abstain";
pub const OTHER_LABEL: &str = "other";

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `NA` for undefined ratios, as in the paper-style tables.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row labels (truth).
    pub labels: Vec<String>,
    /// Column labels (prediction); `labels` plus a trailing abstain column when present.
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Rows and columns restricted to the `k` most prevalent truth classes
    /// (ties by class index), the rest pooled into `other`. `None` predictions
    /// are abstentions; an abstain column appears when `include_abstain` is set
    /// or any prediction is `None`.
    pub fn top_k(truths: &[usize], preds: &[Option<usize>], names: &[String], k: usize, include_abstain: bool) -> Self {
        let k = k.max(1);
        let mut prevalence = vec![0usize; names.len()];
        for &t in truths {
            prevalence[t] += 1;
        }
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.sort_by(|&a, &b| prevalence[b].cmp(&prevalence[a]).then(a.cmp(&b)));
        let kept = &order[..k.min(names.len())];
        let pooled = names.len() > kept.len();
        let mut slot = vec![kept.len(); names.len()];
        for (i, &c) in kept.iter().enumerate() {
            slot[c] = i;
        }
        let mut labels: Vec<String> = kept.iter().map(|&c| names[c].clone()).collect();
        if pooled {
            labels.push(OTHER_LABEL.to_string());
        }
        let abstain = include_abstain || preds.iter().any(Option::is_none);
        let mut columns = labels.clone();
        if abstain {
            columns.push(ABSTAIN_LABEL.to_string());
        }
        let mut counts = vec![vec![0u64; columns.len()]; labels.len()];
        for (&t, p) in truths.iter().zip(preds) {
            let col = p.map_or(labels.len(), |c| slot[c]);
            counts[slot[t]][col] += 1;
        }
        ConfusionMatrix {
            labels,
            columns,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn has_abstain(&self) -> bool {
        self.columns.len() > self.labels.len()
    }

    /// diag / column sum; `None` when nothing was predicted as `c`.
    pub fn ppv(&self, c: usize) -> Option<f64> {
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        (col > 0).then(|| self.counts[c][c] as f64 / col as f64)
    }

    /// diag / retained row sum; `None` when every report of `c` was abstained on.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let row = &self.counts[c];
        let retained: u64 = row[..self.labels.len()].iter().sum();
        (retained > 0).then(|| row[c] as f64 / retained as f64)
    }

    /// Fraction of class `c` abstained on.
    pub fn abstention(&self, c: usize) -> Option<f64> {
        let row = &self.counts[c];
        let total: u64 = row.iter().sum();
        let abst = if self.has_abstain() { row[self.labels.len()] } else { 0 };
        (total > 0).then(|| abst as f64 / total as f64)
    }

    /// Square count table followed by per-class PPV/recall/abstention columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["truth".to_string()];
        header.extend(self.columns.iter().cloned());
        header.extend(["ppv", "recall", "abstention"].map(String::from));
        w.write_record(&header)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.counts[i].iter().map(u64::to_string));
            rec.push(fmt_opt(self.ppv(i)));
            rec.push(fmt_opt(self.recall(i)));
            rec.push(fmt_opt(self.abstention(i)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Standard confusion matrix for one task: abstentions get their own column.
pub fn confusion_topk(
    predictions: &[Prediction],
    truths: &[Vec<usize>],
    task: usize,
    names: &[String],
    k: usize,
) -> Result<ConfusionMatrix> {
    check_aligned(predictions, truths)?;
    let t: Vec<usize> = truths.iter().map(|l| l[task]).collect();
    let p: Vec<Option<usize>> = predictions
        .iter()
        .map(|p| {
            let o = &p.tasks[task];
            (!o.abstained).then_some(o.predicted)
        })
        .collect();
    Ok(ConfusionMatrix::top_k(&t, &p, names, k, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub correct: usize,
    pub abstained: usize,
    pub ppv: Option<f64>,
    pub recall: Option<f64>,
    pub abstention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub total: usize,
    pub retained: usize,
    pub abstained: usize,
    pub correct: usize,
    /// Micro-F1 over retained reports; `None` when everything was abstained on.
    pub retained_accuracy: Option<f64>,
    pub abstention: f64,
    pub classes: Vec<ClassStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointScore {
    pub total: usize,
    /// Reports retained on every task.
    pub retained: usize,
    /// Of those, reports correct on every task.
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub abstention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub tasks: Vec<TaskScore>,
    pub joint: JointScore,
}

fn check_aligned(predictions: &[Prediction], truths: &[Vec<usize>]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth rows",
            predictions.len(),
            truths.len()
        )));
    }
    for (p, t) in predictions.iter().zip(truths) {
        if p.tasks.len() != t.len() {
            return Err(Error::Shape(format!(
                "report {}: {} task outputs for {} labels",
                p.report_id,
                p.tasks.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Per-task and joint metrics. `class_names[t]` names the classes of task `t`.
pub fn score(predictions: &[Prediction], truths: &[Vec<usize>], class_names: &[Vec<String>]) -> Result<Scorecard> {
    check_aligned(predictions, truths)?;
    let n = class_names.len();
    let mut tasks = Vec::with_capacity(n);
    for (t, names) in class_names.iter().enumerate() {
        let k = names.len();
        let mut support = vec![0usize; k];
        let mut predicted = vec![0usize; k];
        let mut correct = vec![0usize; k];
        let mut abstained = vec![0usize; k];
        for (p, truth) in predictions.iter().zip(truths) {
            let (o, y) = (&p.tasks[t], truth[t]);
            if y >= k || o.k() != k {
                return Err(Error::Shape(format!(
                    "report {}: class index out of range for task {t}",
                    p.report_id
                )));
            }
            support[y] += 1;
            if o.abstained {
                abstained[y] += 1;
            } else {
                predicted[o.predicted] += 1;
                correct[y] += usize::from(o.predicted == y);
            }
        }
        let total = predictions.len();
        let n_abst: usize = abstained.iter().sum();
        let n_corr: usize = correct.iter().sum();
        let retained = total - n_abst;
        tasks.push(TaskScore {
            task: predictions
                .first()
                .map_or_else(|| format!("task{t}"), |p| p.tasks[t].task.clone()),
            total,
            retained,
            abstained: n_abst,
            correct: n_corr,
            retained_accuracy: ratio(n_corr, retained),
            abstention: ratio(n_abst, total).unwrap_or(0.0),
            classes: (0..k)
                .map(|c| ClassStats {
                    class: names[c].clone(),
                    support: support[c],
                    predicted: predicted[c],
                    correct: correct[c],
                    abstained: abstained[c],
                    ppv: ratio(correct[c], predicted[c]),
                    recall: ratio(correct[c], support[c] - abstained[c]),
                    abstention: ratio(abstained[c], support[c]),
                })
                .collect(),
        });
    }
    let mut retained = 0;
    let mut correct = 0;
    for (p, truth) in predictions.iter().zip(truths) {
        if p.tasks.iter().all(|o| !o.abstained) {
            retained += 1;
            correct += usize::from(p.tasks.iter().zip(truth).all(|(o, &y)| o.predicted == y));
        }
    }
    let total = predictions.len();
    Ok(Scorecard {
        tasks,
        joint: JointScore {
            total,
            retained,
            correct,
            accuracy: ratio(correct, retained),
            abstention: ratio(total - retained, total).unwrap_or(0.0),
        },
    })
}

impl Scorecard {
    /// `metrics.csv` (one row per task plus `joint`) and `classes.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "task",
            "total",
            "retained",
            "abstained",
            "correct",
            "retained_accuracy",
            "abstention",
        ])?;
        for t in &self.tasks {
            w.write_record([
                t.task.clone(),
                t.total.to_string(),
                t.retained.to_string(),
                t.abstained.to_string(),
                t.correct.to_string(),
                fmt_opt(t.retained_accuracy),
                format!("{:.6}", t.abstention),
            ])?;
        }
        if self.joint.total > 0 {
            let j = &self.joint;
            w.write_record([
                "joint".to_string(),
                j.total.to_string(),
                j.retained.to_string(),
                (j.total - j.retained).to_string(),
                j.correct.to_string(),
                fmt_opt(j.accuracy),
                format!("{:.6}", j.abstention),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("classes.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["task", "class", "support", "ppv", "recall", "abstention"])?;
        for t in &self.tasks {
            for c in &t.classes {
                w.write_record([
                    t.task.clone(),
                    c.class.clone(),
                    c.support.to_string(),
                    fmt_opt(c.ppv),
                    fmt_opt(c.recall),
                    fmt_opt(c.abstention),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPoint {
    pub task: String,
    pub alpha: f64,
    pub retained_accuracy: Option<f64>,
    pub abstention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub target: f64,
    /// Micro-averaged over every retained (report, task) decision.
    pub retained_accuracy: Option<f64>,
    /// Fraction of (report, task) decisions abstained on.
    pub abstention: f64,
    pub tasks: Vec<TaskPoint>,
}

/// Eight evenly spaced targets from 0.80 to 0.97.
pub fn default_targets() -> Vec<f64> {
    (0..8).map(|i| 0.80 + 0.17 * i as f64 / 7.0).collect()
}

/// One full train-and-tune per target with a shared seed, scored on the test split.
/// Each target is the accuracy floor: the tuning band sits just above it.
pub fn tradeoff_sweep(
    corpus: &Corpus,
    split: &Split,
    arch: &Architecture,
    base: &DacConfig,
    model_seed: u64,
    targets: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one target".into()));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "sweep targets must be strictly ascending".into(),
        ));
    }
    let task_names: Vec<String> = corpus.schemas.iter().map(|s| s.name.clone()).collect();
    let test = corpus.select(&split.test)?;
    targets
        .par_iter()
        .map(|&target| {
            let cfg = DacConfig {
                accuracy_target: (target + base.accuracy_band).min(1.0),
                ..base.clone()
            };
            let model = Model::init(arch.clone(), task_names.clone(), model_seed)?;
            let outcome = dac::train(model, corpus, split, &cfg)?;
            let point = tradeoff_point(&outcome.model, &test, target, &outcome.tuner.alphas())?;
            Ok(point)
        })
        .collect()
}

fn tradeoff_point(model: &Model, reports: &[&TokenizedReport], target: f64, alphas: &[f64]) -> Result<TradeoffPoint> {
    let metrics = dac::evaluate(model, reports)?;
    let preds = model.predict_reports(reports)?;
    let (mut retained, mut correct, mut abstained) = (0usize, 0usize, 0usize);
    for (p, r) in preds.iter().zip(reports) {
        for (o, &y) in p.tasks.iter().zip(&r.labels) {
            if o.abstained {
                abstained += 1;
            } else {
                retained += 1;
                correct += usize::from(o.predicted == y);
            }
        }
    }
    Ok(TradeoffPoint {
        target,
        retained_accuracy: ratio(correct, retained),
        abstention: ratio(abstained, retained + abstained).unwrap_or(0.0),
        tasks: metrics
            .iter()
            .zip(&model.task_names)
            .zip(alphas)
            .map(|((m, name), &alpha)| TaskPoint {
                task: name.clone(),
                alpha,
                retained_accuracy: m.retained_accuracy,
                abstention: m.abstention,
            })
            .collect(),
    })
}

pub fn write_tradeoff_csv(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "task", "alpha", "retained_accuracy", "abstention"])?;
    for p in points {
        w.write_record([
            format!("{:.4}", p.target),
            "all".to_string(),
            String::new(),
            fmt_opt(p.retained_accuracy),
            format!("{:.6}", p.abstention),
        ])?;
        for t in &p.tasks {
            w.write_record([
                format!("{:.4}", p.target),
                t.task.clone(),
                format!("{:.6}", t.alpha),
                fmt_opt(t.retained_accuracy),
                format!("{:.6}", t.abstention),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ids retained on every task; equals the intersection of per-task retained sets.
pub fn jointly_retained(predictions: &[Prediction]) -> HashSet<usize> {
    predictions
        .iter()
        .filter(|p| p.tasks.iter().all(|o| !o.abstained))
        .map(|p| p.report_id)
        .collect()
}
