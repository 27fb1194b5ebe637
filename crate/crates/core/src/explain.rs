//! Local explanations.
//!
//! [`grad_input`] scores every token position by the dot product of its
//! re-centred embedding (embedding minus the vocabulary centroid) with the
//! gradient of the target score with respect to that embedding. Repeated
//! words get one weight per occurrence; [`aggregate_words`] sums them.
//!
//! [`perturbation_explain`] is a small masking-and-regression explainer kept
//! as an independent cross-check.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedReport, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::mtcnn::{Model, TaskOutput};
use crate::nn::{self, NumArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    TopPrediction,
    SecondChoice,
}

/// Scalar whose gradient is attributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScore {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub report_id: usize,
    pub task: String,
    pub target_class: usize,
    pub target_kind: TargetKind,
    /// One weight per token position; padding positions are exactly 0.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAttribution {
    pub report_id: usize,
    pub words: BTreeMap<String, f64>,
}

/// Anything that can attribute a target score to its input embeddings.
pub trait Explainable: Sync {
    fn task_name(&self, task: usize) -> &str;

    fn centroid(&self) -> Vec<f64>;

    fn task_output(&self, tokens: &[usize], task: usize) -> Result<TaskOutput>;

    /// Target score, the looked-up embeddings and `d score / d embedding`,
    /// both `[len, d]` over the (possibly padded) sequence.
    fn target_gradient(
        &self,
        tokens: &[usize],
        task: usize,
        class: usize,
        score: TargetScore,
    ) -> Result<(f64, NumArray, NumArray)>;

    /// Target score only.
    fn target_score(&self, tokens: &[usize], task: usize, class: usize, score: TargetScore) -> Result<f64> {
        let out = self.task_output(tokens, task)?;
        match score {
            TargetScore::Probability => Ok(out.probs[class]),
            TargetScore::Logit => Ok(self.target_gradient(tokens, task, class, score)?.0),
        }
    }
}

fn check_task(n: usize, task: usize) -> Result<()> {
    if task >= n {
        return Err(Error::InvalidArgument(format!("task {task} out of range ({n} tasks)")));
    }
    Ok(())
}

/// `d score / d logits` for one head.
fn score_gradient(logits: &[f64], class: usize, score: TargetScore) -> (f64, Vec<f64>) {
    match score {
        TargetScore::Logit => {
            let mut g = vec![0.0; logits.len()];
            g[class] = 1.0;
            (logits[class], g)
        }
        TargetScore::Probability => {
            let p = nn::softmax(logits);
            let pc = p[class];
            let g = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == class { pc * (1.0 - pj) } else { -pc * pj })
                .collect();
            (pc, g)
        }
    }
}

impl Explainable for Model {
    fn task_name(&self, task: usize) -> &str {
        &self.task_names[task]
    }

    fn centroid(&self) -> Vec<f64> {
        self.params.centroid()
    }

    fn task_output(&self, tokens: &[usize], task: usize) -> Result<TaskOutput> {
        check_task(self.n_tasks(), task)?;
        Ok(self.predict(tokens)?.swap_remove(task))
    }

    fn target_gradient(
        &self,
        tokens: &[usize],
        task: usize,
        class: usize,
        score: TargetScore,
    ) -> Result<(f64, NumArray, NumArray)> {
        check_task(self.n_tasks(), task)?;
        let fwd = self.forward(tokens)?;
        let logits = &fwd.logits[task];
        if class >= logits.len() {
            return Err(Error::InvalidArgument(format!("class {class} out of range")));
        }
        let (value, g) = score_gradient(logits, class, score);
        let dlogits: Vec<Vec<f64>> = fwd
            .logits
            .iter()
            .enumerate()
            .map(|(t, z)| if t == task { g.clone() } else { vec![0.0; z.len()] })
            .collect();
        let back = nn::backward(&self.params, &fwd.cache, &dlogits, None)?;
        Ok((value, fwd.cache.embedded, back.input))
    }
}

/// Linear bag-of-embeddings classifier: `z_c = Σ_p (E_p − centroid) · v_c + b_c`.
/// Its gradient×input attribution has the closed form `(E_p − centroid) · v_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBagModel {
    pub embedding: NumArray,
    /// One direction per output (the last output is abstain).
    pub directions: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearBagModel {
    pub fn random<R: Rng>(vocab: usize, dim: usize, outputs: usize, rng: &mut R) -> Self {
        let mut embedding = NumArray::uniform(&[vocab, dim], 1.0, rng);
        embedding.row_mut(PAD).fill(0.0);
        let directions = (0..outputs)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-0.5..0.5)).collect();
        LinearBagModel {
            embedding,
            directions,
            bias,
        }
    }

    fn centroid_of(embedding: &NumArray) -> Vec<f64> {
        let (v, d) = (embedding.shape()[0], embedding.shape()[1]);
        let mut c = vec![0.0; d];
        for i in (0..v).filter(|&i| i != PAD) {
            c.iter_mut().zip(embedding.row(i)).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|x| *x /= (v - 1).max(1) as f64);
        c
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let c = Self::centroid_of(&self.embedding);
        let v = self.embedding.shape()[0];
        let mut z = self.bias.clone();
        for &t in tokens.iter().filter(|&&t| t != PAD) {
            if t >= v {
                return Err(Error::TokenOutOfRange { index: t, vocab: v });
            }
            let e = self.embedding.row(t);
            for (zc, dir) in z.iter_mut().zip(&self.directions) {
                *zc += e.iter().zip(&c).zip(dir).map(|((e, c), w)| (e - c) * w).sum::<f64>();
            }
        }
        Ok(z)
    }
}

impl Explainable for LinearBagModel {
    fn task_name(&self, _task: usize) -> &str {
        "linear"
    }

    fn centroid(&self) -> Vec<f64> {
        Self::centroid_of(&self.embedding)
    }

    fn task_output(&self, tokens: &[usize], task: usize) -> Result<TaskOutput> {
        check_task(1, task)?;
        Ok(TaskOutput::from_logits("linear", &self.logits(tokens)?))
    }

    fn target_gradient(
        &self,
        tokens: &[usize],
        task: usize,
        class: usize,
        score: TargetScore,
    ) -> Result<(f64, NumArray, NumArray)> {
        check_task(1, task)?;
        let logits = self.logits(tokens)?;
        let (value, g) = score_gradient(&logits, class, score);
        let d = self.embedding.shape()[1];
        let mut embedded = NumArray::zeros(&[tokens.len(), d]);
        let mut grad = NumArray::zeros(&[tokens.len(), d]);
        for (p, &t) in tokens.iter().enumerate() {
            embedded.row_mut(p).copy_from_slice(self.embedding.row(t));
            if t == PAD {
                continue;
            }
            let row = grad.row_mut(p);
            for (gc, dir) in g.iter().zip(&self.directions) {
                row.iter_mut().zip(dir).for_each(|(a, w)| *a += gc * w);
            }
        }
        Ok((value, embedded, grad))
    }
}

fn resolve_target(out: &TaskOutput, kind: TargetKind) -> Result<usize> {
    match kind {
        TargetKind::TopPrediction => Ok(out.predicted),
        TargetKind::SecondChoice => out.second_choice.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "second-choice target requested for a report not abstained on in task `{}`",
                out.task
            ))
        }),
    }
}

/// Gradient×input attribution against the centroid of the embedding table.
pub fn grad_input<M: Explainable + ?Sized>(
    model: &M,
    report: &TokenizedReport,
    task: usize,
    kind: TargetKind,
    score: TargetScore,
) -> Result<TokenAttribution> {
    let out = model.task_output(&report.tokens, task)?;
    let class = resolve_target(&out, kind)?;
    let weights = grad_input_weights(model, &report.tokens, task, class, score)?;
    Ok(TokenAttribution {
        report_id: report.id,
        task: model.task_name(task).to_string(),
        target_class: class,
        target_kind: kind,
        weights,
    })
}

/// Per-position weights for an explicit target class.
pub fn grad_input_weights<M: Explainable + ?Sized>(
    model: &M,
    tokens: &[usize],
    task: usize,
    class: usize,
    score: TargetScore,
) -> Result<Vec<f64>> {
    let (_, embedded, grad) = model.target_gradient(tokens, task, class, score)?;
    let c = model.centroid();
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            if t == PAD {
                return 0.0;
            }
            embedded
                .row(p)
                .iter()
                .zip(&c)
                .zip(grad.row(p))
                .map(|((e, c), g)| (e - c) * g)
                .sum()
        })
        .collect())
}

/// Sums per-occurrence weights into one weight per word; padding is skipped.
pub fn aggregate_words(report_id: usize, tokens: &[usize], weights: &[f64], vocab: &Vocabulary) -> WordAttribution {
    let mut words = BTreeMap::new();
    for (&t, &w) in tokens.iter().zip(weights) {
        if t == PAD {
            continue;
        }
        let word = vocab.word(t).map(str::to_string).unwrap_or_else(|| format!("#{t}"));
        *words.entry(word).or_insert(0.0) += w;
    }
    WordAttribution { report_id, words }
}

pub fn aggregate_attribution(attr: &TokenAttribution, tokens: &[usize], vocab: &Vocabulary) -> WordAttribution {
    aggregate_words(attr.report_id, tokens, &attr.weights, vocab)
}

/// Solves the least-squares problem `X β ≈ y` via the normal equations with
/// partial pivoting. Rows of `x` are design vectors.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let m = x.first().map_or(0, Vec::len);
    let mut a = vec![vec![0.0; m + 1]; m];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..m {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                a[i][j] += row[i] * row[j];
            }
            a[i][m] += row[i] * yi;
        }
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&r, &s| a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular perturbation design".into()));
        }
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=m {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Ok((0..m).map(|i| a[i][m] / a[i][i]).collect())
}

/// Masking explainer: each non-padding token is kept with probability 1/2,
/// the kept tokens are re-scored, and a least-squares fit of the target score
/// on the keep-indicators gives one coefficient per position. Positions whose
/// indicator never varies get weight 0.
pub fn perturbation_explain<M: Explainable + ?Sized>(
    model: &M,
    tokens: &[usize],
    task: usize,
    class: usize,
    n_perturb: usize,
    seed: u64,
    score: TargetScore,
) -> Result<Vec<f64>> {
    if n_perturb < 100 {
        return Err(Error::InvalidArgument(format!(
            "n_perturb must be at least 100, got {n_perturb}"
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).filter(|&p| tokens[p] != PAD).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..n_perturb)
        .map(|_| positions.iter().map(|_| rng.gen::<bool>()).collect())
        .collect();
    let targets = masks
        .par_iter()
        .map(|mask| {
            let kept: Vec<usize> = positions
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(&p, _)| tokens[p])
                .collect();
            model.target_score(&kept, task, class, score)
        })
        .collect::<Result<Vec<f64>>>()?;
    fit_masks(tokens.len(), &positions, &masks, &targets)
}

/// Least-squares coefficients of `targets` on keep-indicators plus an intercept.
pub fn fit_masks(len: usize, positions: &[usize], masks: &[Vec<bool>], targets: &[f64]) -> Result<Vec<f64>> {
    let varying: Vec<usize> = (0..positions.len())
        .filter(|&j| {
            let first = masks[0][j];
            masks.iter().any(|m| m[j] != first)
        })
        .collect();
    let design: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| {
            std::iter::once(1.0)
                .chain(varying.iter().map(|&j| if m[j] { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let beta = least_squares(&design, targets)?;
    let mut weights = vec![0.0; len];
    for (i, &j) in varying.iter().enumerate() {
        weights[positions[j]] = beta[i + 1];
    }
    Ok(weights)
}

/// Fraction of top-decile (report, word) pairs on which two explainers agree
/// in sign. A pair is selected when its magnitude reaches the 90th percentile
/// of either method.
pub fn sign_agreement(a: &[WordAttribution], b: &[WordAttribution]) -> Result<f64> {
    let b_index: HashMap<usize, &WordAttribution> = b.iter().map(|w| (w.report_id, w)).collect();
    let mut pairs = Vec::new();
    for wa in a {
        let Some(wb) = b_index.get(&wa.report_id) else {
            continue;
        };
        for (word, &x) in &wa.words {
            if let Some(&y) = wb.words.get(word) {
                pairs.push((x, y));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "explanations share no (report, word) pairs".into(),
        ));
    }
    let p90 = |vals: Vec<f64>| {
        let mut v = vals;
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((0.9 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    let ta = p90(pairs.iter().map(|p| p.0.abs()).collect());
    let tb = p90(pairs.iter().map(|p| p.1.abs()).collect());
    let selected: Vec<&(f64, f64)> = pairs.iter().filter(|(x, y)| x.abs() >= ta || y.abs() >= tb).collect();
    let agree = selected
        .iter()
        .filter(|(x, y)| (x > &0.0 && y > &0.0) || (x < &0.0 && y < &0.0) || (*x == 0.0 && *y == 0.0))
        .count();
    Ok(agree as f64 / selected.len() as f64)
}

/// Attribution record as written to JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub report_id: usize,
    pub task: String,
    pub target_class: usize,
    pub target_kind: TargetKind,
    pub weights: Vec<f64>,
    pub words: BTreeMap<String, f64>,
}

/// Explains every report for one task: the top prediction for retained
/// reports, the second choice for abstained ones.
pub fn explain_reports(
    model: &Model,
    reports: &[&TokenizedReport],
    task: usize,
    vocab: &Vocabulary,
    score: TargetScore,
) -> Result<Vec<ExplanationRecord>> {
    reports
        .par_iter()
        .map(|r| {
            let out = model.task_output(&r.tokens, task)?;
            let kind = if out.abstained {
                TargetKind::SecondChoice
            } else {
                TargetKind::TopPrediction
            };
            let attr = grad_input(model, r, task, kind, score)?;
            let words = aggregate_attribution(&attr, &r.tokens, vocab).words;
            Ok(ExplanationRecord {
                report_id: attr.report_id,
                task: attr.task,
                target_class: attr.target_class,
                target_kind: attr.target_kind,
                weights: attr.weights,
                words,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use crate::nn::Architecture;

    fn report(tokens: Vec<usize>) -> TokenizedReport {
        TokenizedReport {
            id: 1,
            tokens,
            labels: vec![0],
            provenance: Provenance::Clean,
        }
    }

    fn vocab(n: usize) -> Vocabulary {
        let mut v = Vocabulary::new();
        for i in 1..n {
            v.intern(&format!("w{i}"));
        }
        v
    }

    #[test]
    fn centroid_token_gets_zero_weight() {
        let arch = Architecture::desk(12, vec![3]);
        let mut model = Model::init(arch, vec!["t".into()], 2).unwrap();
        let c = model.params.centroid();
        // Make token 5 sit at the centroid of the resulting table.
        let n = (model.params.vocab_size() - 1) as f64;
        let sum_others: Vec<f64> =
            (1..model.params.vocab_size())
                .filter(|&i| i != 5)
                .fold(vec![0.0; c.len()], |mut acc, i| {
                    acc.iter_mut()
                        .zip(model.params.embedding.row(i))
                        .for_each(|(a, b)| *a += b);
                    acc
                });
        let row: Vec<f64> = sum_others.iter().map(|s| s / (n - 1.0)).collect();
        model.params.embedding.row_mut(5).copy_from_slice(&row);
        let r = report(vec![3, 5, 7, 5, 9, 1]);
        let attr = grad_input(&model, &r, 0, TargetKind::TopPrediction, TargetScore::Probability).unwrap();
        assert_eq!(attr.weights.len(), 6);
        assert!(attr.weights[1].abs() < 1e-15 && attr.weights[3].abs() < 1e-15);
    }

    #[test]
    fn padding_positions_get_zero_weight() {
        let arch = Architecture::desk(12, vec![3]);
        let model = Model::init(arch, vec!["t".into()], 2).unwrap();
        let r = report(vec![3, 0, 7]);
        let attr = grad_input(&model, &r, 0, TargetKind::TopPrediction, TargetScore::Probability).unwrap();
        assert_eq!(attr.weights.len(), 3);
        assert_eq!(attr.weights[1], 0.0);
    }

    #[test]
    fn second_choice_on_retained_report_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = LinearBagModel::random(10, 3, 3, &mut rng);
        m.bias = vec![5.0, 0.0, -5.0];
        let r = report(vec![1, 2]);
        assert!(grad_input(&m, &r, 0, TargetKind::SecondChoice, TargetScore::Logit).is_err());
    }

    #[test]
    fn aggregation_sums_occurrences() {
        let v = vocab(5);
        let w = aggregate_words(0, &[1, 2, 3], &[0.1, 0.2, 0.3], &v);
        assert_eq!(w.words["w1"], 0.1);
        assert_eq!(w.words["w3"], 0.3);
        let w = aggregate_words(0, &[2, 0, 2], &[0.3, 9.0, 0.2], &v);
        assert_eq!(w.words.len(), 1);
        assert!((w.words["w2"] - 0.5).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn aggregation_conserves_total(weights in proptest::collection::vec(-1.0f64..1.0, 1..40), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<usize> = weights.iter().map(|_| rng.gen_range(1..8)).collect();
            let w = aggregate_words(0, &tokens, &weights, &vocab(8));
            let a: f64 = w.words.values().sum();
            let b: f64 = weights.iter().sum();
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_is_deterministic_and_matches_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = LinearBagModel::random(15, 4, 3, &mut rng);
        let tokens = vec![3, 8, 1, 12, 8, 5];
        let a = perturbation_explain(&m, &tokens, 0, 1, 300, 11, TargetScore::Logit).unwrap();
        let b = perturbation_explain(&m, &tokens, 0, 1, 300, 11, TargetScore::Logit).unwrap();
        assert_eq!(a, b);
        let exact = grad_input_weights(&m, &tokens, 0, 1, TargetScore::Logit).unwrap();
        for (x, y) in a.iter().zip(&exact) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        assert!(perturbation_explain(&m, &tokens, 0, 1, 50, 11, TargetScore::Logit).is_err());
    }

    #[test]
    fn constant_indicator_column_is_dropped() {
        let masks = vec![vec![true, true], vec![true, false], vec![true, true], vec![true, false]];
        let targets = vec![3.0, 1.0, 3.0, 1.0];
        let w = fit_masks(2, &[0, 1], &masks, &targets).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 2.0).abs() < 1e-12);
    }

    fn wa(id: usize, pairs: &[(&str, f64)]) -> WordAttribution {
        WordAttribution {
            report_id: id,
            words: pairs.iter().map(|(w, x)| (w.to_string(), *x)).collect(),
        }
    }

    #[test]
    fn sign_agreement_cases() {
        let a = vec![wa(0, &[("x", 1.0), ("y", -0.5), ("z", 0.1)]), wa(1, &[("x", 2.0)])];
        assert_eq!(sign_agreement(&a, &a).unwrap(), 1.0);
        let neg: Vec<WordAttribution> = a
            .iter()
            .map(|w| WordAttribution {
                report_id: w.report_id,
                words: w.words.iter().map(|(k, v)| (k.clone(), -v)).collect(),
            })
            .collect();
        assert_eq!(sign_agreement(&a, &neg).unwrap(), 0.0);
        assert!(sign_agreement(&a, &[wa(5, &[("x", 1.0)])]).is_err());
    }

    /// Target score with the tokens of `drop` removed.
    fn score_without(m: &LinearBagModel, tokens: &[usize], drop: &[bool], class: usize, score: TargetScore) -> f64 {
        let kept: Vec<usize> = tokens.iter().zip(drop).filter(|(_, &d)| !d).map(|(&t, _)| t).collect();
        m.target_score(&kept, 0, class, score).unwrap()
    }

    #[test]
    fn perturbation_matches_exhaustive_masks_and_leave_one_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // The logit of the linear model is additive in its tokens, so
        // leave-one-out effects are the exact regression coefficients.
        let m = LinearBagModel::random(12, 4, 3, &mut rng);
        let tokens = vec![2, 5, 9, 5, 11];
        let class = 1;
        let score = TargetScore::Logit;
        let full = score_without(&m, &tokens, &[false; 5], class, score);
        let loo: Vec<f64> = (0..5)
            .map(|i| {
                let mut drop = [false; 5];
                drop[i] = true;
                full - score_without(&m, &tokens, &drop, class, score)
            })
            .collect();
        let masks: Vec<Vec<bool>> = (0..32u32).map(|b| (0..5).map(|i| b >> i & 1 == 1).collect()).collect();
        let targets: Vec<f64> = masks
            .iter()
            .map(|keep| {
                let drop: Vec<bool> = keep.iter().map(|k| !k).collect();
                score_without(&m, &tokens, &drop, class, score)
            })
            .collect();
        let exhaustive = fit_masks(5, &[0, 1, 2, 3, 4], &masks, &targets).unwrap();
        let sampled = perturbation_explain(&m, &tokens, 0, class, 20_000, 3, score).unwrap();
        for i in 0..5 {
            let tol = 0.1 * loo[i].abs();
            assert!(
                (exhaustive[i] - loo[i]).abs() < 1e-10,
                "{score:?} exhaustive {i}: {} vs {}",
                exhaustive[i],
                loo[i]
            );
            assert!(
                (sampled[i] - loo[i]).abs() <= tol,
                "{score:?} sampled {i}: {} vs {}",
                sampled[i],
                loo[i]
            );
        }
    }
}
