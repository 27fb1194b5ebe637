//! Multi-task CNN with one abstaining head per task.

use std::cell::Cell;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, TokenizedReport};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{self, Architecture, Forward, LayerParams};

thread_local! {
    static TRUNK_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of shared-trunk evaluations performed on the current thread.
pub fn trunk_calls() -> u64 {
    TRUNK_CALLS.with(Cell::get)
}

/// Output of one task head for one report. Index `k` of `probs` is abstain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutput {
    pub task: String,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub abstained: bool,
    /// Best original class when the report was abstained on.
    pub second_choice: Option<usize>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl TaskOutput {
    pub fn from_probs(task: &str, probs: Vec<f64>) -> Self {
        let k = probs.len() - 1;
        let predicted = argmax(&probs);
        let abstained = predicted == k;
        let second_choice = abstained.then(|| argmax(&probs[..k]));
        TaskOutput {
            task: task.to_string(),
            probs,
            predicted,
            abstained,
            second_choice,
        }
    }

    pub fn from_logits(task: &str, logits: &[f64]) -> Self {
        Self::from_probs(task, nn::softmax(logits))
    }

    /// Number of original classes.
    pub fn k(&self) -> usize {
        self.probs.len() - 1
    }

    /// The class the model would have answered: the prediction, or the
    /// second choice when abstained.
    pub fn answer(&self) -> usize {
        self.second_choice.unwrap_or(self.predicted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub report_id: usize,
    pub tasks: Vec<TaskOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    architecture: Architecture,
    task_names: Vec<String>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub task_names: Vec<String>,
    pub params: LayerParams,
}

impl Model {
    pub fn new(arch: Architecture, task_names: Vec<String>, params: LayerParams) -> Result<Self> {
        arch.validate()?;
        if task_names.len() != arch.task_classes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} task names for {} heads",
                task_names.len(),
                arch.task_classes.len()
            )));
        }
        Ok(Model {
            arch,
            task_names,
            params,
        })
    }

    pub fn init(arch: Architecture, task_names: Vec<String>, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = LayerParams::init(&arch, &mut rng);
        Self::new(arch, task_names, params)
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|t| t == name)
    }

    /// One trunk evaluation feeding every head.
    pub fn forward(&self, tokens: &[usize]) -> Result<Forward> {
        TRUNK_CALLS.with(|c| c.set(c.get() + 1));
        nn::forward(&self.params, tokens)
    }

    pub fn outputs(&self, forward: &Forward) -> Vec<TaskOutput> {
        self.task_names
            .iter()
            .zip(&forward.logits)
            .map(|(name, z)| TaskOutput::from_logits(name, z))
            .collect()
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<TaskOutput>> {
        let f = self.forward(tokens)?;
        Ok(self.outputs(&f))
    }

    pub fn predict_reports(&self, reports: &[&TokenizedReport]) -> Result<Vec<Prediction>> {
        reports
            .par_iter()
            .map(|r| {
                Ok(Prediction {
                    report_id: r.id,
                    tasks: self.predict(&r.tokens)?,
                })
            })
            .collect()
    }

    /// Writes `model.bin` (tensors) and `model.json` (architecture sidecar).
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join("model.bin");
        let mut buf = Vec::new();
        self.params.write_binary(&mut buf).map_err(|e| Error::io(&bin, e))?;
        fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
        write_json(
            &dir.join("model.json"),
            &Sidecar {
                architecture: self.arch.clone(),
                task_names: self.task_names.clone(),
                seed,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: Sidecar = read_json(&dir.join("model.json"))?;
        let bin = dir.join("model.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let params = LayerParams::read_binary(&sidecar.architecture, bytes.as_slice())?;
        Self::new(sidecar.architecture, sidecar.task_names, params)
    }
}

/// Confusion matrix of ground truth against the second choice of abstained
/// outputs: what the model would have answered without the abstain option.
pub fn second_choice_matrix(
    abstained: &[(usize, &TaskOutput)],
    class_names: &[String],
    top_k: usize,
) -> Result<ConfusionMatrix> {
    let mut truths = Vec::with_capacity(abstained.len());
    let mut answers = Vec::with_capacity(abstained.len());
    for (truth, out) in abstained {
        let second = out
            .second_choice
            .ok_or_else(|| Error::InvalidArgument(format!("output for task `{}` was not abstained", out.task)))?;
        truths.push(*truth);
        answers.push(Some(second));
    }
    Ok(ConfusionMatrix::top_k(&truths, &answers, class_names, top_k, false))
}
