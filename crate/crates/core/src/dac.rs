//! Abstention losses, the per-task penalty tuner and the training loop.
//!
//! The per-task loss for `k` original classes plus an abstain output `a` is
//!
//! ```text
//! L = q · S − α · log q,   q = 1 − p_a,   S = −log(p_truth / q)
//! ```
//!
//! which reduces to plain cross-entropy when `p_a = 0`. A sample prefers to
//! abstain once its renormalised cross-entropy `S` exceeds `α / q`, so small
//! penalties buy accuracy with coverage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, TokenizedReport};
use crate::error::{Error, Result};
use crate::mtcnn::Model;
use crate::nn::{self, LayerParams};

/// Largest abstain probability accepted before reporting runaway abstention.
pub const SATURATION: f64 = 1.0 - 1e-12;

fn saturation(detail: String) -> Error {
    Error::Saturation {
        task: String::new(),
        detail,
    }
}

fn name_task(err: Error, task: &str) -> Error {
    match err {
        Error::Saturation { detail, .. } => Error::Saturation {
            task: task.to_string(),
            detail,
        },
        other => other,
    }
}

/// Loss and `dL/dp` for a probability vector whose last entry is abstain.
pub fn dac_loss(probs: &[f64], truth: usize, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let k = probs
        .len()
        .checked_sub(1)
        .filter(|&k| k >= 1)
        .ok_or_else(|| Error::InvalidArgument("probability vector needs at least one class plus abstain".into()))?;
    if truth >= k {
        return Err(Error::InvalidArgument(format!(
            "truth {truth} is not an original class (k = {k})"
        )));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "abstention penalty must be positive, got {alpha}"
        )));
    }
    let p_abstain = probs[k];
    if p_abstain >= SATURATION {
        return Err(saturation(format!("p_abstain = {p_abstain}")));
    }
    let p_truth = probs[truth];
    if p_truth <= 0.0 {
        return Err(Error::InvalidArgument("probability of the true class is zero".into()));
    }
    let q = 1.0 - p_abstain.max(0.0);
    let log_q = (-p_abstain.max(0.0)).ln_1p();
    let s = log_q - p_truth.ln();
    let loss = q * s - alpha * log_q;
    let mut grad = vec![0.0; k + 1];
    grad[truth] = -q / p_truth;
    grad[k] = -s - 1.0 + alpha / q;
    Ok((loss, grad))
}

/// Same loss evaluated from logits, returning `dL/dz`. Log-probabilities are
/// formed with log-sum-exp so confident logits stay finite.
pub fn dac_loss_logits(logits: &[f64], truth: usize, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let k = logits
        .len()
        .checked_sub(1)
        .filter(|&k| k >= 1)
        .ok_or_else(|| Error::InvalidArgument("logit vector needs at least one class plus abstain".into()))?;
    if truth >= k {
        return Err(Error::InvalidArgument(format!(
            "truth {truth} is not an original class (k = {k})"
        )));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "abstention penalty must be positive, got {alpha}"
        )));
    }
    let lse = nn::log_sum_exp(logits);
    let log_q = nn::log_sum_exp(&logits[..k]) - lse;
    let probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    if probs[k] >= SATURATION || log_q <= (1.0 - SATURATION).ln() {
        return Err(saturation(format!("p_abstain = {}", probs[k])));
    }
    let q = log_q.exp();
    let log_pt = logits[truth] - lse;
    let s = log_q - log_pt;
    let loss = q * s - alpha * log_q;

    // dL/dp_truth · p_truth = −q, so the truth term never divides by p_truth.
    let g_abstain = -s - 1.0 + alpha / q;
    let dot = -q + probs[k] * g_abstain;
    let mut grad: Vec<f64> = probs.iter().map(|p| -p * dot).collect();
    grad[truth] = -q - probs[truth] * dot;
    grad[k] = probs[k] * (g_abstain - dot);
    Ok((loss, grad))
}

/// Per-task retained mass, renormalised cross-entropy and the dummy retained mass.
#[derive(Clone, Debug, PartialEq)]
pub struct NTaskLossTerms {
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub dummy_q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NTaskLoss {
    pub total: f64,
    pub terms: NTaskLossTerms,
    /// `dL/dp` per task head.
    pub task_grads: Vec<Vec<f64>>,
    /// `dL/dp` for the dummy head `[retain, abstain]`.
    pub dummy_grad: Vec<f64>,
}

/// Combined loss with a ground-truth-free dummy retain/abstain head:
///
/// ```text
/// L = Σ_i [ (q_i + q) S_i − α_i log q_i ] − α log q
/// ```
///
/// where `q` is the dummy head's retain probability, so every task's
/// cross-entropy is also weighted by the joint decision to answer.
pub fn ntask_loss(
    task_probs: &[Vec<f64>],
    truths: &[usize],
    alphas: &[f64],
    dummy_probs: &[f64],
    dummy_alpha: f64,
) -> Result<NTaskLoss> {
    let n = task_probs.len();
    if truths.len() != n || alphas.len() != n {
        return Err(Error::Shape(format!(
            "{n} task outputs, {} truths, {} penalties",
            truths.len(),
            alphas.len()
        )));
    }
    if dummy_probs.len() != 2 {
        return Err(Error::Shape("dummy head must be 2-way".into()));
    }
    if dummy_alpha <= 0.0 || alphas.iter().any(|&a| a <= 0.0) {
        return Err(Error::InvalidArgument("abstention penalties must be positive".into()));
    }
    let dummy_q = 1.0 - dummy_probs[1];
    if dummy_q < 1e-12 {
        return Err(saturation(format!("dummy retain mass {dummy_q}")));
    }
    let mut terms = NTaskLossTerms {
        q: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        dummy_q,
    };
    let mut total = -dummy_alpha * dummy_q.ln();
    let mut task_grads = Vec::with_capacity(n);
    let mut s_sum = 0.0;
    for t in 0..n {
        let probs = &task_probs[t];
        let k = probs.len() - 1;
        let truth = truths[t];
        if truth >= k {
            return Err(Error::InvalidArgument(format!("task {t}: truth {truth} out of range")));
        }
        let q = 1.0 - probs[k];
        if q < 1e-12 {
            return Err(name_task(saturation(format!("retained mass {q}")), &t.to_string()));
        }
        let s = q.ln() - probs[truth].ln();
        total += (q + dummy_q) * s - alphas[t] * q.ln();
        s_sum += s;
        let mut g = vec![0.0; k + 1];
        g[truth] = -(q + dummy_q) / probs[truth];
        let d_q = s + (q + dummy_q) / q - alphas[t] / q;
        g[k] = -d_q;
        task_grads.push(g);
        terms.q.push(q);
        terms.s.push(s);
    }
    let d_dummy_q = s_sum - dummy_alpha / dummy_q;
    Ok(NTaskLoss {
        total,
        terms,
        task_grads,
        dummy_grad: vec![0.0, -d_dummy_q],
    })
}

/// [`ntask_loss`] from logits; gradients are with respect to the logits.
pub fn ntask_loss_logits(
    task_logits: &[Vec<f64>],
    truths: &[usize],
    alphas: &[f64],
    dummy_logits: &[f64],
    dummy_alpha: f64,
) -> Result<NTaskLoss> {
    let probs: Vec<Vec<f64>> = task_logits.iter().map(|z| nn::softmax(z)).collect();
    let dummy = nn::softmax(dummy_logits);
    let mut out = ntask_loss(&probs, truths, alphas, &dummy, dummy_alpha)?;
    out.task_grads = probs
        .iter()
        .zip(&out.task_grads)
        .map(|(p, g)| nn::softmax_backward(p, g))
        .collect();
    out.dummy_grad = nn::softmax_backward(&dummy, &out.dummy_grad);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    AccuracyOnly,
    AbstentionOnly,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub alpha: f64,
    pub retained_accuracy: Option<f64>,
    pub abstention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTuner {
    pub task: String,
    pub alpha: f64,
    pub satisfied: bool,
    /// Set once the task beats the target without abstaining; α no longer moves.
    pub frozen: bool,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Validation metrics for one task after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// `None` when every sample was abstained on.
    pub retained_accuracy: Option<f64>,
    pub abstention: f64,
}

/// Multiplicative band controller on the per-task penalties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub mode: TuneMode,
    pub target: f64,
    pub band: f64,
    pub gamma: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
    pub tasks: Vec<TaskTuner>,
}

impl TunerState {
    pub fn new(task_names: &[String], alphas: &[f64], cfg: &DacConfig) -> Self {
        TunerState {
            mode: cfg.mode,
            target: cfg.accuracy_target,
            band: cfg.accuracy_band,
            gamma: cfg.gamma,
            min_alpha: MIN_ALPHA,
            max_alpha: MAX_ALPHA,
            tasks: task_names
                .iter()
                .zip(alphas)
                .map(|(name, &alpha)| TaskTuner {
                    task: name.clone(),
                    alpha,
                    satisfied: false,
                    frozen: false,
                    trajectory: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.alpha).collect()
    }

    pub fn all_satisfied(&self) -> bool {
        self.tasks.iter().all(|t| t.satisfied)
    }

    /// Applies one epoch of validation metrics.
    ///
    /// Below the band α shrinks (abstaining gets cheaper); above the band with
    /// some abstention α grows. A task that reaches the target while abstaining
    /// on nothing is satisfied for good and its α is frozen.
    pub fn update(&mut self, epoch: usize, metrics: &[EpochMetrics]) {
        let (lo, hi) = (self.target - self.band, self.target + self.band);
        for (task, m) in self.tasks.iter_mut().zip(metrics) {
            task.trajectory.push(TrajectoryPoint {
                epoch,
                alpha: task.alpha,
                retained_accuracy: m.retained_accuracy,
                abstention: m.abstention,
            });
            if task.frozen {
                continue;
            }
            match m.retained_accuracy {
                Some(acc) if acc >= self.target && m.abstention == 0.0 => {
                    task.satisfied = true;
                    task.frozen = true;
                }
                Some(acc) if acc < lo => {
                    task.alpha /= self.gamma;
                    task.satisfied = false;
                }
                Some(acc) if acc > hi && m.abstention > 0.0 => {
                    task.alpha *= self.gamma;
                    task.satisfied = false;
                }
                Some(_) => task.satisfied = true,
                // Everything abstained: the penalty is far too small.
                None => {
                    task.alpha *= self.gamma;
                    task.satisfied = false;
                }
            }
            task.alpha = task.alpha.clamp(self.min_alpha, self.max_alpha);
        }
    }
}

pub const MIN_ALPHA: f64 = 1e-4;
pub const MAX_ALPHA: f64 = 1e4;

fn default_alpha() -> f64 {
    1.0
}
fn default_target() -> f64 {
    0.975
}
fn default_band() -> f64 {
    0.005
}
fn default_gamma() -> f64 {
    1.2
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    16
}
fn default_mode() -> TuneMode {
    TuneMode::AccuracyOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DacConfig {
    /// Starting penalty for every task unless overridden by `alphas`.
    #[serde(default = "default_alpha")]
    pub initial_alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    /// Enables the N-task loss (the model needs a dummy head).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dummy_alpha: Option<f64>,
    #[serde(default = "default_target")]
    pub accuracy_target: f64,
    #[serde(default = "default_band")]
    pub accuracy_band: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_mode")]
    pub mode: TuneMode,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DacConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl DacConfig {
    /// Config whose band sits just above `floor`, e.g. 0.97 → 0.975 ± 0.005.
    pub fn for_floor(floor: f64) -> Self {
        let band = default_band();
        DacConfig {
            accuracy_target: floor + band,
            accuracy_band: band,
            ..DacConfig::default()
        }
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.to_string(),
                message,
            })
        };
        if !(self.initial_alpha > 0.0) {
            return bad("initial_alpha", format!("must be positive, got {}", self.initial_alpha));
        }
        if let Some(alphas) = &self.alphas {
            if alphas.len() != n_tasks {
                return bad("alphas", format!("{} entries for {n_tasks} tasks", alphas.len()));
            }
            if let Some(i) = alphas.iter().position(|a| !(*a > 0.0)) {
                return bad(&format!("alphas[{i}]"), "must be positive".into());
            }
        }
        if let Some(a) = self.dummy_alpha {
            if !(a > 0.0) {
                return bad("dummy_alpha", format!("must be positive, got {a}"));
            }
        }
        if !(self.accuracy_target > 0.0 && self.accuracy_target <= 1.0) {
            return bad(
                "accuracy_target",
                format!("must lie in (0, 1], got {}", self.accuracy_target),
            );
        }
        if !(self.accuracy_band > 0.0) {
            return bad("accuracy_band", "must be positive".into());
        }
        if !(self.gamma > 1.0) {
            return bad("gamma", "must exceed 1".into());
        }
        if self.mode != TuneMode::AccuracyOnly {
            return bad("mode", "only accuracy_only tuning is implemented".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn initial_alphas(&self, n_tasks: usize) -> Vec<f64> {
        self.alphas.clone().unwrap_or_else(|| vec![self.initial_alpha; n_tasks])
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task: String,
    pub alpha: f64,
    pub train_loss: f64,
    pub val_retained_accuracy: Option<f64>,
    pub val_abstention: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub tuner: TunerState,
    pub log: Vec<EpochLog>,
}

/// Loss sum and gradient sum over one slice of samples.
struct Partial {
    losses: Vec<f64>,
    grad: LayerParams,
}

fn sample_gradient(
    model: &Model,
    report: &TokenizedReport,
    alphas: &[f64],
    dummy_alpha: Option<f64>,
    scale: f64,
    acc: &mut Partial,
) -> Result<()> {
    let fwd = model.forward(&report.tokens)?;
    let n = model.n_tasks();
    let (dlogits, ddummy) = match (dummy_alpha, &fwd.dummy_logits) {
        (Some(da), Some(dz)) => {
            let out =
                ntask_loss_logits(&fwd.logits, &report.labels, alphas, dz, da).map_err(|e| name_task(e, "dummy"))?;
            acc.losses[0] += out.total / n as f64;
            let scaled: Vec<Vec<f64>> = out
                .task_grads
                .iter()
                .map(|g| g.iter().map(|x| x * scale).collect())
                .collect();
            (
                scaled,
                Some(out.dummy_grad.iter().map(|x| x * scale).collect::<Vec<_>>()),
            )
        }
        _ => {
            let mut grads = Vec::with_capacity(n);
            for t in 0..n {
                let (loss, g) = dac_loss_logits(&fwd.logits[t], report.labels[t], alphas[t])
                    .map_err(|e| name_task(e, &model.task_names[t]))?;
                acc.losses[t] += loss;
                grads.push(g.into_iter().map(|x| x * scale).collect());
            }
            (grads, None)
        }
    };
    let back = nn::backward(&model.params, &fwd.cache, &dlogits, ddummy.as_deref())?;
    acc.grad.add_assign(&back.params);
    Ok(())
}

/// Samples per parallel work unit. Fixed so the reduction order, and hence the
/// floating-point result, does not depend on the thread count.
const CHUNK: usize = 8;

fn batch_gradient(
    model: &Model,
    batch: &[&TokenizedReport],
    alphas: &[f64],
    dummy_alpha: Option<f64>,
) -> Result<(Vec<f64>, LayerParams)> {
    let n = model.n_tasks();
    let scale = 1.0 / (n * batch.len()) as f64;
    let partials: Vec<Partial> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial {
                losses: vec![0.0; n],
                grad: model.params.zeros_like(),
            };
            for r in chunk {
                sample_gradient(model, r, alphas, dummy_alpha, scale, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut it = partials.into_iter();
    let mut total = it.next().expect("non-empty batch");
    for p in it {
        total.grad.add_assign(&p.grad);
        total.losses.iter_mut().zip(&p.losses).for_each(|(a, b)| *a += b);
    }
    Ok((total.losses, total.grad))
}

/// Per-task retained accuracy and abstention of `model` on `reports`.
pub fn evaluate(model: &Model, reports: &[&TokenizedReport]) -> Result<Vec<EpochMetrics>> {
    let preds = model.predict_reports(reports)?;
    Ok((0..model.n_tasks())
        .map(|t| {
            let mut retained = 0usize;
            let mut correct = 0usize;
            for (p, r) in preds.iter().zip(reports) {
                let out = &p.tasks[t];
                if !out.abstained {
                    retained += 1;
                    correct += usize::from(out.predicted == r.labels[t]);
                }
            }
            let total = reports.len().max(1);
            EpochMetrics {
                retained_accuracy: (retained > 0).then(|| correct as f64 / retained as f64),
                abstention: (reports.len() - retained) as f64 / total as f64,
            }
        })
        .collect())
}

/// Mini-batch SGD with momentum on the mean abstention loss, tuning α on the
/// validation split after every epoch. Stops once every task is satisfied.
pub fn train(mut model: Model, corpus: &Corpus, split: &Split, cfg: &DacConfig) -> Result<TrainOutcome> {
    let n = model.n_tasks();
    cfg.validate(n)?;
    if model.arch.task_classes != corpus.class_counts() {
        return Err(Error::InvalidArgument(
            "model heads do not match the corpus tasks".into(),
        ));
    }
    if cfg.dummy_alpha.is_some() != model.params.dummy.is_some() {
        return Err(Error::Config {
            path: "dummy_alpha".into(),
            message: "N-task training needs a model with a dummy head (and vice versa)".into(),
        });
    }
    let train_set = corpus.select(&split.train)?;
    let val_set = corpus.select(&split.val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "train and validation splits must be non-empty".into(),
        ));
    }

    let mut tuner = TunerState::new(&model.task_names, &cfg.initial_alphas(n), cfg);
    let mut velocity = model.params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let alphas = tuner.alphas();
        let mut loss_sum = vec![0.0; n];
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedReport> = idx.iter().map(|&i| train_set[i]).collect();
            let (losses, grad) = batch_gradient(&model, &batch, &alphas, cfg.dummy_alpha)?;
            loss_sum.iter_mut().zip(&losses).for_each(|(a, b)| *a += b);
            for ((p, v), g) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
        }
        let metrics = evaluate(&model, &val_set)?;
        for t in 0..n {
            log.push(EpochLog {
                epoch,
                task: model.task_names[t].clone(),
                alpha: alphas[t],
                train_loss: loss_sum[t] / train_set.len() as f64,
                val_retained_accuracy: metrics[t].retained_accuracy,
                val_abstention: metrics[t].abstention,
            });
        }
        tuner.update(epoch, &metrics);
        if tuner.all_satisfied() {
            break;
        }
    }
    Ok(TrainOutcome { model, tuner, log })
}
