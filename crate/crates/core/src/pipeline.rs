//! Pipeline configuration and the file-based stages behind the CLI:
//! gen → train → explain → aggregate → pca → report, plus sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, read_json, read_jsonl, write_json, write_jsonl, Corpus, CorpusSpec, Split, TokenizedReport};
use crate::dac::{self, DacConfig};
use crate::error::{Error, Result};
use crate::explain::{explain_reports, ExplanationRecord, TargetScore};
use crate::global_xai::{self, AleMatrix, CohortSpec, PcaResult};
use crate::manifest::{sha256_hex, RunManifest};
use crate::metrics::{self, TradeoffPoint};
use crate::mtcnn::{second_choice_matrix, Model, Prediction};
use crate::nn::Architecture;
use crate::render::{self, ScatterGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_reports: usize,
    pub noise_rate: f64,
    pub conflict_rate: f64,
    pub empty_rate: f64,
    pub max_len: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_reports: 2000,
            noise_rate: 0.0,
            conflict_rate: 0.0,
            empty_rate: 0.0,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub filter_sizes: Vec<usize>,
    pub n_filters: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 16,
            filter_sizes: vec![3, 4, 5],
            n_filters: 8,
            hidden: 32,
        }
    }
}

/// Which split the explanation, aggregation and report stages analyse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisSplit {
    Train,
    Val,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Task to explain; the last task when unset.
    pub task: Option<String>,
    pub score: TargetScore,
    pub split: AnalysisSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateSection {
    /// Reports must be predicted correctly on this task; the first task when
    /// unset and different from the explained task.
    pub gating_task: Option<String>,
    pub top_classes: usize,
    pub cap: usize,
    /// Column threshold; when unset, the value keeping `top_columns` columns.
    pub threshold: Option<f64>,
    pub top_columns: usize,
}

impl Default for AggregateSection {
    fn default() -> Self {
        AggregateSection {
            gating_task: None,
            top_classes: 4,
            cap: 1000,
            threshold: None,
            top_columns: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaSection {
    pub variance_goal: f64,
    pub annotations: usize,
    pub table_rows: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        PcaSection {
            variance_goal: 0.9,
            annotations: 12,
            table_rows: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub top_k: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { top_k: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub targets: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            targets: metrics::default_targets(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub dac: DacConfig,
    pub explain: ExplainSection,
    pub aggregate: AggregateSection,
    pub pca: PcaSection,
    pub report: ReportSection,
    pub sweep: SweepSection,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// 200 reports, two tasks, five epochs.
    pub fn smoke() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.n_reports = 200;
        cfg.dac.max_epochs = 5;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            corpus: self.seed,
            split: self.seed.wrapping_add(1),
            model: self.seed.wrapping_add(2),
            training: self.seed.wrapping_add(3),
            cohort: self.seed.wrapping_add(4),
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut spec = CorpusSpec::pathology(self.corpus.n_reports, self.seeds().corpus);
        spec.noise_rate = self.corpus.noise_rate;
        spec.conflict_rate = self.corpus.conflict_rate;
        spec.empty_rate = self.corpus.empty_rate;
        if let Some(m) = self.corpus.max_len {
            spec.max_len = m;
        }
        spec
    }

    pub fn dac_config(&self) -> DacConfig {
        DacConfig {
            seed: self.seeds().training,
            ..self.dac.clone()
        }
    }

    pub fn architecture(&self, corpus: &Corpus) -> Architecture {
        Architecture {
            vocab_size: corpus.vocab.len(),
            embed_dim: self.model.embed_dim,
            filter_sizes: self.model.filter_sizes.clone(),
            n_filters: self.model.n_filters,
            hidden: self.model.hidden,
            task_classes: corpus.class_counts(),
            dummy_task: self.dac.dummy_alpha.is_some(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_spec()
            .validate()
            .map_err(|e| config_err("corpus", e.to_string()))?;
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(config_err("split", "fractions must be non-negative and sum to 1"));
        }
        if s.train == 0.0 || s.val == 0.0 {
            return Err(config_err("split", "train and val fractions must be positive"));
        }
        let m = &self.model;
        if m.embed_dim == 0 || m.n_filters == 0 || m.hidden == 0 {
            return Err(config_err("model", "dimensions must be positive"));
        }
        if m.filter_sizes.is_empty() || m.filter_sizes.contains(&0) {
            return Err(config_err("model.filter_sizes", "must be non-empty and positive"));
        }
        self.dac.validate(2).map_err(|e| match e {
            Error::Config { path, message } => config_err(&format!("dac.{path}"), message),
            other => other,
        })?;
        let a = &self.aggregate;
        if a.cap == 0 {
            return Err(config_err("aggregate.cap", "must be at least 1"));
        }
        if a.top_classes == 0 {
            return Err(config_err("aggregate.top_classes", "must be at least 1"));
        }
        if a.threshold.is_some_and(|t| !(t >= 0.0)) {
            return Err(config_err("aggregate.threshold", "must be non-negative"));
        }
        if a.top_columns < 2 {
            return Err(config_err("aggregate.top_columns", "must be at least 2"));
        }
        if !(self.pca.variance_goal > 0.0 && self.pca.variance_goal <= 1.0) {
            return Err(config_err("pca.variance_goal", "must lie in (0, 1]"));
        }
        if self.report.top_k == 0 {
            return Err(config_err("report.top_k", "must be at least 1"));
        }
        let t = &self.sweep.targets;
        if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) || t.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(config_err(
                "sweep.targets",
                "must be non-empty, strictly ascending and inside (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub split: u64,
    pub model: u64,
    pub training: u64,
    pub cohort: u64,
}

/// Parses `0.80..0.97` (eight evenly spaced points) or a comma list.
pub fn parse_targets(s: &str) -> Result<Vec<f64>> {
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad target `{x}`")))
    };
    let targets: Vec<f64> = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if !(hi > lo) {
            return Err(Error::InvalidArgument(format!("empty target range `{s}`")));
        }
        (0..8).map(|i| lo + (hi - lo) * i as f64 / 7.0).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("targets must be strictly ascending".into()));
    }
    Ok(targets)
}

/// Fixed artifact layout under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn split(&self) -> PathBuf {
        self.corpus().join("split.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
    pub fn explanations(&self) -> PathBuf {
        self.root.join("explain").join("explanations.jsonl")
    }
    pub fn ale(&self) -> PathBuf {
        self.root.join("ale")
    }
    pub fn pca(&self) -> PathBuf {
        self.root.join("pca")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn analysis_ids(split: &Split, which: AnalysisSplit) -> Vec<usize> {
    match which {
        AnalysisSplit::Train => split.train.clone(),
        AnalysisSplit::Val => split.val.clone(),
        AnalysisSplit::Test => split.test.clone(),
        AnalysisSplit::All => {
            let mut v: Vec<usize> = split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .copied()
                .collect();
            v.sort_unstable();
            v
        }
    }
}

fn task_by_name(corpus: &Corpus, name: &str, field: &str) -> Result<usize> {
    corpus
        .task_index(name)
        .ok_or_else(|| config_err(field, format!("unknown task `{name}`")))
}

pub fn stage_gen(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let corpus = corpus::generate_corpus(&cfg.corpus_spec())?;
    let split = corpus::split(
        &corpus.reports,
        (cfg.split.train, cfg.split.val, cfg.split.test),
        cfg.seeds().split,
    )?;
    corpus.save(&out.corpus())?;
    write_json(&out.split(), &split)
}

fn load_corpus(out: &Layout) -> Result<(Corpus, Split)> {
    Ok((Corpus::load(&out.corpus())?, read_json(&out.split())?))
}

/// Trains, saves the checkpoint and logs, and predicts the analysis split.
pub fn stage_train(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let (corpus, split) = load_corpus(out)?;
    let names: Vec<String> = corpus.schemas.iter().map(|s| s.name.clone()).collect();
    let model = Model::init(cfg.architecture(&corpus), names, cfg.seeds().model)?;
    let outcome = dac::train(model, &corpus, &split, &cfg.dac_config())?;
    let dir = out.model();
    outcome.model.save(&dir, cfg.seeds().model)?;
    write_json(&dir.join("tuner.json"), &outcome.tuner)?;
    let path = dir.join("train_log.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "epoch",
        "task",
        "alpha",
        "train_loss",
        "val_retained_accuracy",
        "val_abstention",
    ])?;
    for l in &outcome.log {
        w.write_record([
            l.epoch.to_string(),
            l.task.clone(),
            format!("{:.6}", l.alpha),
            format!("{:.6}", l.train_loss),
            metrics::fmt_opt(l.val_retained_accuracy),
            format!("{:.6}", l.val_abstention),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let reports = corpus.select(&analysis_ids(&split, cfg.explain.split))?;
    let preds = outcome.model.predict_reports(&reports)?;
    write_jsonl(&out.predictions(), &preds)
}

fn explain_task(cfg: &PipelineConfig, corpus: &Corpus) -> Result<usize> {
    match &cfg.explain.task {
        Some(name) => task_by_name(corpus, name, "explain.task"),
        None => Ok(corpus.n_tasks() - 1),
    }
}

pub fn stage_explain(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let (corpus, split) = load_corpus(out)?;
    let model = Model::load(&out.model())?;
    let task = explain_task(cfg, &corpus)?;
    let reports = corpus.select(&analysis_ids(&split, cfg.explain.split))?;
    let records = explain_reports(&model, &reports, task, &corpus.vocab, cfg.explain.score)?;
    create_dir(&out.root.join("explain"))?;
    write_jsonl(&out.explanations(), &records)
}

pub const COHORTS: [(&str, bool); 2] = [("retained", false), ("abstained", true)];

/// Outcome of building one cohort or running PCA on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStatus {
    pub cohort: String,
    pub built: bool,
    pub rows: usize,
    pub columns: usize,
    pub threshold: Option<f64>,
    pub reason: Option<String>,
}

/// Builds the retained and abstained ALE matrices. A cohort that comes out
/// empty is recorded as skipped; the stage fails only if both are.
pub fn stage_aggregate(cfg: &PipelineConfig, out: &Layout) -> Result<Vec<CohortStatus>> {
    let (corpus, split) = load_corpus(out)?;
    let task = explain_task(cfg, &corpus)?;
    let gating = match &cfg.aggregate.gating_task {
        Some(name) => Some(task_by_name(&corpus, name, "aggregate.gating_task")?),
        None => (task != 0).then_some(0),
    };
    let reports = corpus.select(&analysis_ids(&split, cfg.explain.split))?;
    let preds: Vec<Prediction> = read_jsonl(&out.predictions())?;
    let expl: Vec<ExplanationRecord> = read_jsonl(&out.explanations())?;
    let classes = global_xai::top_classes(reports.iter().map(|r| r.labels[task]), cfg.aggregate.top_classes);
    let mut statuses = Vec::new();
    for (name, abstained) in COHORTS {
        let spec = CohortSpec {
            gating_task: gating,
            gating_classes: None,
            task,
            classes: classes.clone(),
            cap: cfg.aggregate.cap,
            abstained,
            seed: cfg.seeds().cohort,
        };
        let dir = out.ale().join(name);
        let built = global_xai::build_cohort(&reports, &preds, &expl, &spec).and_then(|m| {
            let t = cfg
                .aggregate
                .threshold
                .unwrap_or_else(|| global_xai::threshold_for_top(&m, cfg.aggregate.top_columns));
            Ok((global_xai::truncate(&m, t)?, t))
        });
        match built {
            Ok((m, t)) => {
                m.save(&dir)?;
                statuses.push(CohortStatus {
                    cohort: name.into(),
                    built: true,
                    rows: m.n_rows(),
                    columns: m.n_cols(),
                    threshold: Some(t),
                    reason: None,
                });
            }
            Err(e @ (Error::EmptyCohort { .. } | Error::AllColumnsRemoved { .. })) => statuses.push(CohortStatus {
                cohort: name.into(),
                built: false,
                rows: 0,
                columns: 0,
                threshold: None,
                reason: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    create_dir(&out.ale())?;
    write_json(&out.ale().join("cohorts.json"), &statuses)?;
    if statuses.iter().all(|s| !s.built) {
        let reasons: Vec<String> = statuses.iter().filter_map(|s| s.reason.clone()).collect();
        return Err(Error::Degenerate(format!(
            "no cohort could be built: {}",
            reasons.join("; ")
        )));
    }
    Ok(statuses)
}

fn cohort_statuses(path: &Path) -> Result<Vec<CohortStatus>> {
    read_json(path)
}

/// PCA on every built cohort. Cohorts too small or flat for PCA are skipped.
pub fn stage_pca(cfg: &PipelineConfig, out: &Layout) -> Result<Vec<CohortStatus>> {
    let mut statuses = Vec::new();
    for s in cohort_statuses(&out.ale().join("cohorts.json"))? {
        if !s.built {
            statuses.push(s);
            continue;
        }
        let m = AleMatrix::load(&out.ale().join(&s.cohort))?;
        match global_xai::pca(&m, cfg.pca.variance_goal) {
            Ok(p) => {
                p.save(&out.pca().join(&s.cohort), cfg.pca.table_rows)?;
                write_json(&out.pca().join(&s.cohort).join("rows.json"), &p.rows)?;
                statuses.push(s);
            }
            Err(e @ (Error::Degenerate(_) | Error::InvalidArgument(_))) => statuses.push(CohortStatus {
                built: false,
                reason: Some(e.to_string()),
                ..s
            }),
            Err(e) => return Err(e),
        }
    }
    create_dir(&out.pca())?;
    write_json(&out.pca().join("cohorts.json"), &statuses)?;
    Ok(statuses)
}

/// Loads a saved PCA result (summary, projections and row metadata).
pub fn load_pca(dir: &Path) -> Result<PcaResult> {
    #[derive(Deserialize)]
    struct Summary {
        words: Vec<String>,
        means: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenvectors: Vec<Vec<f64>>,
        explained_variance: Vec<f64>,
        retained: usize,
    }
    let s: Summary = read_json(&dir.join("pca.json"))?;
    let rows: Vec<global_xai::RowMeta> = read_json(&dir.join("rows.json"))?;
    let mut r = csv::Reader::from_path(dir.join("projections.csv"))?;
    let mut projections = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        projections.push(
            rec.iter()
                .skip(4)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("projections.csv: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok(PcaResult {
        words: s.words,
        means: s.means,
        eigenvalues: s.eigenvalues,
        eigenvectors: s.eigenvectors,
        explained_variance: s.explained_variance,
        retained: s.retained,
        projections,
        rows,
    })
}

/// Inputs of the report stage; the pipeline points them at its own layout.
#[derive(Clone, Debug)]
pub struct ReportInputs {
    pub predictions: PathBuf,
    pub corpus: PathBuf,
    /// Directory holding per-cohort PCA results, if any.
    pub pca: Option<PathBuf>,
    /// Explained task name (for labelling PCA plots).
    pub task: Option<String>,
}

impl ReportInputs {
    pub fn from_layout(out: &Layout) -> Self {
        ReportInputs {
            predictions: out.predictions(),
            corpus: out.corpus(),
            pca: Some(out.pca()),
            task: None,
        }
    }
}

pub fn stage_report(cfg: &PipelineConfig, inputs: &ReportInputs, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let corpus = Corpus::load(&inputs.corpus)?;
    let preds: Vec<Prediction> = read_jsonl(&inputs.predictions)?;
    let by_id: std::collections::HashMap<usize, &TokenizedReport> = corpus.reports.iter().map(|r| (r.id, r)).collect();
    let truths: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            by_id
                .get(&p.report_id)
                .map(|r| r.labels.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("prediction for unknown report {}", p.report_id)))
        })
        .collect::<Result<_>>()?;
    let class_names: Vec<Vec<String>> = corpus.schemas.iter().map(|s| s.classes.clone()).collect();
    let card = metrics::score(&preds, &truths, &class_names)?;
    card.write_csv(out_dir)?;
    write_json(&out_dir.join("metrics.json"), &card)?;

    for (t, schema) in corpus.schemas.iter().enumerate() {
        let cm = metrics::confusion_topk(&preds, &truths, t, &schema.classes, cfg.report.top_k)?;
        cm.write_csv(&out_dir.join(format!("confusion_{}.csv", schema.name)))?;
        render::write_svg(
            &out_dir.join(format!("confusion_{}.svg", schema.name)),
            &render::confusion_svg(&cm, &format!("{} confusion (log count)", schema.name)),
        )?;
        let abstained: Vec<(usize, &crate::mtcnn::TaskOutput)> = preds
            .iter()
            .zip(&truths)
            .filter(|(p, _)| p.tasks[t].abstained)
            .map(|(p, y)| (y[t], &p.tasks[t]))
            .collect();
        let sc = second_choice_matrix(&abstained, &schema.classes, cfg.report.top_k)?;
        sc.write_csv(&out_dir.join(format!("second_choice_{}.csv", schema.name)))?;
        render::write_svg(
            &out_dir.join(format!("second_choice_{}.svg", schema.name)),
            &render::confusion_svg(&sc, &format!("{} second choice on abstained", schema.name)),
        )?;
    }

    let Some(pca_dir) = &inputs.pca else { return Ok(()) };
    let statuses_path = pca_dir.join("cohorts.json");
    if !statuses_path.exists() {
        return Ok(());
    }
    let task_name = inputs
        .task
        .clone()
        .or_else(|| cfg.explain.task.clone())
        .unwrap_or_else(|| corpus.schemas.last().map(|s| s.name.clone()).unwrap_or_default());
    let names = corpus
        .schemas
        .iter()
        .find(|s| s.name == task_name)
        .map(|s| s.classes.clone())
        .unwrap_or_default();
    let label = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
    for s in cohort_statuses(&statuses_path)?.into_iter().filter(|s| s.built) {
        let p = load_pca(&pca_dir.join(&s.cohort))?;
        let groups: Vec<ScatterGroup> = p
            .rows
            .iter()
            .map(|r| ScatterGroup {
                label: if r.truth == r.prediction {
                    label(r.truth)
                } else {
                    format!("{}→{}", label(r.truth), label(r.prediction))
                },
                contour: r.truth == r.prediction,
            })
            .collect();
        let kw = global_xai::keyword_annotations(&p, cfg.pca.annotations.min(p.words.len()));
        let svg = render::pca_scatter_svg(&p, &groups, &kw, &format!("{task_name}: {} cohort", s.cohort))?;
        render::write_svg(&out_dir.join(format!("pca_{}.svg", s.cohort)), &svg)?;
    }
    Ok(())
}

pub fn stage_sweep(cfg: &PipelineConfig, out: &Layout, targets: &[f64]) -> Result<Vec<TradeoffPoint>> {
    let (corpus, split) = load_corpus(out)?;
    let arch = cfg.architecture(&corpus);
    let points = metrics::tradeoff_sweep(&corpus, &split, &arch, &cfg.dac_config(), cfg.seeds().model, targets)?;
    let dir = out.sweep();
    create_dir(&dir)?;
    metrics::write_tradeoff_csv(&points, &dir.join("tradeoff.csv"))?;
    write_json(&dir.join("tradeoff.json"), &points)?;
    render::write_svg(&dir.join("tradeoff.svg"), &render::tradeoff_svg(&points))?;
    Ok(points)
}

pub const PIPELINE_STAGES: [&str; 6] = ["gen", "train", "explain", "aggregate", "pca", "report"];

/// Error tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

/// Runs one stage, records its timing and refreshes the manifest of `root`.
pub fn run_stage<T>(
    stage: &str,
    cfg: &PipelineConfig,
    root: &Path,
    f: impl FnOnce() -> Result<T>,
) -> std::result::Result<T, StageError> {
    let tag = |error| StageError {
        stage: stage.to_string(),
        error,
    };
    create_dir(root).map_err(tag)?;
    let start = Instant::now();
    let value = f().map_err(tag)?;
    let mut manifest = RunManifest::load_or_new(root).map_err(tag)?;
    manifest.config_sha256 = cfg.sha256();
    let s = cfg.seeds();
    for (k, v) in [
        ("corpus", s.corpus),
        ("split", s.split),
        ("model", s.model),
        ("training", s.training),
        ("cohort", s.cohort),
    ] {
        manifest.seeds.insert(k.to_string(), v);
    }
    manifest.record_stage(stage, start.elapsed().as_secs_f64());
    manifest.finalize(root).map_err(tag)?;
    Ok(value)
}

pub fn run_pipeline(cfg: &PipelineConfig, root: &Path) -> std::result::Result<RunManifest, StageError> {
    let out = Layout::new(root);
    run_stage("gen", cfg, root, || stage_gen(cfg, &out))?;
    run_stage("train", cfg, root, || stage_train(cfg, &out))?;
    run_stage("explain", cfg, root, || stage_explain(cfg, &out))?;
    run_stage("aggregate", cfg, root, || stage_aggregate(cfg, &out).map(drop))?;
    run_stage("pca", cfg, root, || stage_pca(cfg, &out).map(drop))?;
    run_stage("report", cfg, root, || {
        stage_report(cfg, &ReportInputs::from_layout(&out), &out.report())
    })?;
    RunManifest::load_or_new(root).map_err(|error| StageError {
        stage: "report".into(),
        error,
    })
}
