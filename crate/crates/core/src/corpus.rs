//! Synthetic pathology-like corpora.
//!
//! Reports are assembled from section templates (header, gross description,
//! microscopic notes, final diagnosis). Class keywords only ever appear in the
//! final diagnosis section, at the end of the report, so the tail-retaining
//! [`preprocess`] step decides whether the evidence survives truncation.
//!
//! Each report carries a [`Provenance`] tag describing how its evidence was
//! generated. The tag is never shown to the model; evaluation uses it as the
//! ground truth for "should this report have been abstained on".

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const PAD_WORD: &str = "<pad>";

const FILLER: &[&str] = &[
    "specimen",
    "received",
    "formalin",
    "labeled",
    "consists",
    "tissue",
    "measuring",
    "cm",
    "gross",
    "sections",
    "submitted",
    "cassette",
    "examination",
    "shows",
    "margin",
    "negative",
    "lymph",
    "node",
    "identified",
    "stain",
    "performed",
    "clinical",
    "history",
    "patient",
    "year",
    "old",
    "fragment",
    "tan",
    "pink",
    "soft",
    "firm",
    "cut",
    "surface",
    "representative",
    "entirely",
    "additional",
    "levels",
    "reviewed",
    "consultation",
    "electronically",
    "signed",
    "pathologist",
    "date",
    "procedure",
    "biopsy",
    "resection",
    "weighing",
    "grams",
    "aggregate",
    "orientation",
    "suture",
    "ink",
    "painted",
    "distance",
    "closest",
    "mm",
    "unremarkable",
    "fibrous",
    "adipose",
    "vessels",
    "hemorrhage",
    "necrosis",
    "focal",
    "present",
    "absent",
];

const HEADER: &[&str] = &["surgical", "pathology", "report"];
const GROSS: &[&str] = &["gross", "description", ":"];
const MICRO: &[&str] = &["microscopic", ":"];
const DIAGNOSIS: &[&str] = &["final", "diagnosis", ":"];
const CLOSING: &[&str] = &["see", "comment"];

/// Keyword tokens emitted per evidence class.
const KEYWORDS_PER_CLASS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub name: String,
    pub classes: Vec<String>,
    /// Keywords per class, aligned with `classes`.
    pub keywords: Vec<Vec<String>>,
    /// `(parent, child)` class-name pairs. Keywords may only be shared along these pairs.
    #[serde(default)]
    pub hierarchy: Vec<(String, String)>,
    /// Optional cross-task constraint: each class belongs to one class of an earlier task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ParentLink>,
}

/// Ties each class of a task to a class of an earlier task (histology classes
/// are specific to a primary site). Labels of the child task are drawn from
/// the classes compatible with the parent label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentLink {
    pub task: String,
    /// Parent class name for every class of this task.
    pub class_parent: Vec<String>,
}

impl TaskSchema {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    fn hierarchy_indices(&self) -> Result<Vec<(usize, usize)>> {
        self.hierarchy
            .iter()
            .map(|(p, c)| {
                let pi = self.class_index(p).ok_or_else(|| {
                    Error::InvalidSpec(format!("task `{}`: unknown hierarchy class `{p}`", self.name))
                })?;
                let ci = self.class_index(c).ok_or_else(|| {
                    Error::InvalidSpec(format!("task `{}`: unknown hierarchy class `{c}`", self.name))
                })?;
                Ok((pi, ci))
            })
            .collect()
    }

    fn related(&self, a: usize, b: usize) -> bool {
        self.hierarchy.iter().any(|(p, c)| {
            let (p, c) = (self.class_index(p), self.class_index(c));
            (p == Some(a) && c == Some(b)) || (p == Some(b) && c == Some(a))
        })
    }

    /// True if `word` is a keyword of some class other than `truth` that is not
    /// linked to `truth` through the hierarchy.
    pub fn is_foreign_keyword(&self, word: &str, truth: usize) -> bool {
        self.keywords
            .iter()
            .enumerate()
            .any(|(c, kws)| c != truth && !self.related(c, truth) && kws.iter().any(|k| k == word))
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if self.k() < 2 {
            return Err(Error::InvalidSpec(format!("task `{name}` needs at least 2 classes")));
        }
        let unique: HashSet<&String> = self.classes.iter().collect();
        if unique.len() != self.k() {
            return Err(Error::InvalidSpec(format!("task `{name}` has duplicate class names")));
        }
        if self.keywords.len() != self.k() {
            return Err(Error::InvalidSpec(format!(
                "task `{name}`: {} keyword lists for {} classes",
                self.keywords.len(),
                self.k()
            )));
        }
        self.hierarchy_indices()?;
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (c, kws) in self.keywords.iter().enumerate() {
            if kws.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "task `{name}`: class `{}` has no keywords",
                    self.classes[c]
                )));
            }
            for kw in kws {
                if FILLER.contains(&kw.as_str()) || kw == PAD_WORD {
                    return Err(Error::InvalidSpec(format!(
                        "task `{name}`: keyword `{kw}` collides with template vocabulary"
                    )));
                }
                if let Some(&other) = owner.get(kw.as_str()) {
                    if other != c && !self.related(other, c) {
                        return Err(Error::InvalidSpec(format!(
                            "task `{name}`: keyword `{kw}` shared by `{}` and `{}` without a hierarchy pair",
                            self.classes[other], self.classes[c]
                        )));
                    }
                } else {
                    owner.insert(kw, c);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    LabelNoise,
    Conflicting,
    EmptyEvidence,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::LabelNoise => "label_noise",
            Provenance::Conflicting => "conflicting",
            Provenance::EmptyEvidence => "empty_evidence",
        }
    }
}

fn default_parent_phrase_rate() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub schemas: Vec<TaskSchema>,
    pub n_reports: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub conflict_rate: f64,
    #[serde(default)]
    pub empty_rate: f64,
    /// Per-task categorical prior. For a task with a [`ParentLink`] these are
    /// weights renormalised over the classes compatible with the parent label.
    pub class_prior: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Probability that a child class in a hierarchy pair also emits one parent keyword.
    #[serde(default = "default_parent_phrase_rate")]
    pub parent_phrase_rate: f64,
}

fn default_max_len() -> usize {
    3000
}

impl CorpusSpec {
    /// Two tasks (primary site, histology) with site-specific histologies and a
    /// non-small-cell hierarchy over adenocarcinoma and squamous carcinoma.
    pub fn pathology(n_reports: usize, seed: u64) -> Self {
        let kw = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let site = TaskSchema {
            name: "site".into(),
            classes: kw(&["lung", "breast", "colon"]),
            keywords: vec![
                kw(&["lung", "bronchus", "lobectomy"]),
                kw(&["breast", "mastectomy", "nipple"]),
                kw(&["colon", "sigmoid", "colectomy"]),
            ],
            hierarchy: vec![],
            parent: None,
        };
        let histology = TaskSchema {
            name: "histology".into(),
            classes: kw(&[
                "adenocarcinoma",
                "squamous",
                "small_cell",
                "non_small_cell",
                "ductal",
                "lobular",
                "mucinous",
            ]),
            keywords: vec![
                kw(&["adenocarcinoma", "glandular", "acinar"]),
                kw(&["squamous", "keratinizing"]),
                kw(&["small", "oat"]),
                kw(&["non-small", "nsclc"]),
                kw(&["ductal", "dcis"]),
                kw(&["lobular", "signet"]),
                kw(&["mucinous", "colloid"]),
            ],
            hierarchy: vec![
                ("non_small_cell".into(), "adenocarcinoma".into()),
                ("non_small_cell".into(), "squamous".into()),
            ],
            parent: Some(ParentLink {
                task: "site".into(),
                class_parent: kw(&["lung", "lung", "lung", "lung", "breast", "breast", "colon"]),
            }),
        };
        CorpusSpec {
            schemas: vec![site, histology],
            n_reports,
            max_len: 3000,
            noise_rate: 0.0,
            conflict_rate: 0.0,
            empty_rate: 0.0,
            class_prior: vec![
                vec![0.4, 0.4, 0.2],
                [0.35, 0.25, 0.15, 0.25, 0.6, 0.4, 1.0]
                    .iter()
                    .map(|w| w / 3.0)
                    .collect(),
            ],
            seed,
            parent_phrase_rate: default_parent_phrase_rate(),
        }
    }

    /// Longest possible final-diagnosis section. Truncation must keep it whole.
    pub fn longest_template(&self) -> usize {
        let per_task = 2 * (KEYWORDS_PER_CLASS + 1);
        DIAGNOSIS.len() + self.schemas.len() * per_task + CLOSING.len()
    }

    fn parent_of(&self, task: usize) -> Result<Option<(usize, Vec<usize>)>> {
        let schema = &self.schemas[task];
        let Some(link) = &schema.parent else {
            return Ok(None);
        };
        let pt = self.schemas.iter().position(|s| s.name == link.task).ok_or_else(|| {
            Error::InvalidSpec(format!("task `{}`: unknown parent task `{}`", schema.name, link.task))
        })?;
        if pt >= task {
            return Err(Error::InvalidSpec(format!(
                "task `{}`: parent task `{}` must come earlier",
                schema.name, link.task
            )));
        }
        if link.class_parent.len() != schema.k() {
            return Err(Error::InvalidSpec(format!(
                "task `{}`: class_parent has {} entries for {} classes",
                schema.name,
                link.class_parent.len(),
                schema.k()
            )));
        }
        let parents = link
            .class_parent
            .iter()
            .map(|p| {
                self.schemas[pt]
                    .class_index(p)
                    .ok_or_else(|| Error::InvalidSpec(format!("task `{}`: unknown parent class `{p}`", schema.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((pt, parents)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemas.is_empty() {
            return Err(Error::InvalidSpec("at least one task schema is required".into()));
        }
        let mut names = HashSet::new();
        let mut keyword_task: HashMap<&str, usize> = HashMap::new();
        for (t, s) in self.schemas.iter().enumerate() {
            s.validate()?;
            if !names.insert(&s.name) {
                return Err(Error::InvalidSpec(format!("duplicate task name `{}`", s.name)));
            }
            for kw in s.keywords.iter().flatten() {
                if let Some(&other) = keyword_task.get(kw.as_str()) {
                    if other != t {
                        return Err(Error::InvalidSpec(format!("keyword `{kw}` used by two tasks")));
                    }
                }
                keyword_task.insert(kw, t);
            }
            self.parent_of(t)?;
        }
        for (name, r) in [
            ("noise_rate", self.noise_rate),
            ("conflict_rate", self.conflict_rate),
            ("empty_rate", self.empty_rate),
            ("parent_phrase_rate", self.parent_phrase_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidSpec(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        if self.noise_rate + self.conflict_rate + self.empty_rate > 1.0 + 1e-12 {
            return Err(Error::InvalidSpec(
                "noise_rate + conflict_rate + empty_rate exceeds 1".into(),
            ));
        }
        if self.class_prior.len() != self.schemas.len() {
            return Err(Error::InvalidSpec(format!(
                "{} class priors for {} tasks",
                self.class_prior.len(),
                self.schemas.len()
            )));
        }
        for (s, prior) in self.schemas.iter().zip(&self.class_prior) {
            if prior.len() != s.k() {
                return Err(Error::InvalidSpec(format!(
                    "task `{}`: prior length {} != {}",
                    s.name,
                    prior.len(),
                    s.k()
                )));
            }
            if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidSpec(format!("task `{}`: negative prior entry", s.name)));
            }
            let sum: f64 = prior.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("task `{}`: prior sums to {sum}", s.name)));
            }
        }
        if self.max_len < self.longest_template() {
            return Err(Error::InvalidSpec(format!(
                "max_len {} is shorter than the longest diagnosis template ({})",
                self.max_len,
                self.longest_template()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedReport {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

/// Closed vocabulary; index 0 is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::from_words(vec![PAD_WORD.to_string()]).expect("padding-only vocabulary")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_WORD) {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with `{PAD_WORD}`"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn intern(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let i = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), i);
        i
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.words.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Vocabulary::from_words(words).map_err(serde::de::Error::custom)
    }
}

/// Reverses the word order and keeps the first `max_len` entries of the
/// reversed sequence, so the end of a long document survives.
pub fn preprocess<T: Clone>(tokens: &[T], max_len: usize) -> Vec<T> {
    tokens.iter().rev().take(max_len).cloned().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub schemas: Vec<TaskSchema>,
    pub vocab: Vocabulary,
    pub reports: Vec<TokenizedReport>,
}

impl Corpus {
    pub fn n_tasks(&self) -> usize {
        self.schemas.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.schemas.iter().position(|s| s.name == name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.schemas.iter().map(TaskSchema::k).collect()
    }

    /// Reports in the order of `ids`. Unknown ids are an error.
    pub fn select(&self, ids: &[usize]) -> Result<Vec<&TokenizedReport>> {
        let by_id: HashMap<usize, &TokenizedReport> = self.reports.iter().map(|r| (r.id, r)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown report id {id}")))
            })
            .collect()
    }

    pub fn words_of(&self, report: &TokenizedReport) -> Vec<&str> {
        report
            .tokens
            .iter()
            .map(|&t| self.vocab.word(t).unwrap_or("<unk>"))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("schema.json"), &self.schemas)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_jsonl(&dir.join("reports.jsonl"), &self.reports)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schemas: Vec<TaskSchema> = read_json(&dir.join("schema.json"))?;
        let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
        let reports: Vec<TokenizedReport> = read_jsonl(&dir.join("reports.jsonl"))?;
        for r in &reports {
            if r.labels.len() != schemas.len() {
                return Err(Error::InvalidArgument(format!(
                    "report {} has {} labels",
                    r.id,
                    r.labels.len()
                )));
            }
            if let Some(&t) = r.tokens.iter().find(|&&t| t >= vocab.len()) {
                return Err(Error::TokenOutOfRange {
                    index: t,
                    vocab: vocab.len(),
                });
            }
        }
        Ok(Corpus {
            schemas,
            vocab,
            reports,
        })
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn push_fillers(rng: &mut ChaCha8Rng, out: &mut Vec<String>, lo: usize, hi: usize) {
    let n = rng.gen_range(lo..=hi);
    for _ in 0..n {
        out.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
    }
}

/// Generates a corpus and its closed vocabulary. Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let n_tasks = spec.schemas.len();
    let parents = (0..n_tasks).map(|t| spec.parent_of(t)).collect::<Result<Vec<_>>>()?;
    let hierarchy = spec
        .schemas
        .iter()
        .map(TaskSchema::hierarchy_indices)
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocabulary::new();
    let mut reports = Vec::with_capacity(spec.n_reports);

    for id in 0..spec.n_reports {
        let mut labels = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            let prior = &spec.class_prior[t];
            let label = match &parents[t] {
                None => sample_categorical(&mut rng, prior),
                Some((pt, class_parent)) => {
                    let parent_label = labels[*pt];
                    let weights: Vec<f64> = prior
                        .iter()
                        .zip(class_parent)
                        .map(|(&w, &p)| if p == parent_label { w } else { 0.0 })
                        .collect();
                    if weights.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::InvalidSpec(format!(
                            "task `{}` has no class with positive prior under parent class {parent_label}",
                            spec.schemas[t].name
                        )));
                    }
                    sample_categorical(&mut rng, &weights)
                }
            };
            labels.push(label);
        }

        let u = rng.gen::<f64>();
        let provenance = if u < spec.noise_rate {
            Provenance::LabelNoise
        } else if u < spec.noise_rate + spec.conflict_rate {
            Provenance::Conflicting
        } else if u < spec.noise_rate + spec.conflict_rate + spec.empty_rate {
            Provenance::EmptyEvidence
        } else {
            Provenance::Clean
        };
        let affected = rng.gen_range(0..n_tasks);

        let evidence: Vec<Vec<usize>> = (0..n_tasks)
            .map(|t| {
                let k = spec.schemas[t].k();
                let label = labels[t];
                let other = |rng: &mut ChaCha8Rng| {
                    let j = rng.gen_range(0..k - 1);
                    if j >= label {
                        j + 1
                    } else {
                        j
                    }
                };
                match provenance {
                    Provenance::EmptyEvidence => vec![],
                    Provenance::LabelNoise if t == affected => vec![other(&mut rng)],
                    Provenance::Conflicting if t == affected => {
                        let o = other(&mut rng);
                        if rng.gen::<bool>() {
                            vec![label, o]
                        } else {
                            vec![o, label]
                        }
                    }
                    _ => vec![label],
                }
            })
            .collect();

        let mut words: Vec<String> = HEADER.iter().map(|s| s.to_string()).collect();
        push_fillers(&mut rng, &mut words, 6, 12);
        words.extend(GROSS.iter().map(|s| s.to_string()));
        push_fillers(&mut rng, &mut words, 15, 30);
        words.extend(MICRO.iter().map(|s| s.to_string()));
        push_fillers(&mut rng, &mut words, 8, 16);
        words.extend(DIAGNOSIS.iter().map(|s| s.to_string()));
        for (t, classes) in evidence.iter().enumerate() {
            let schema = &spec.schemas[t];
            for &c in classes {
                let kws = &schema.keywords[c];
                if let Some(&(p, _)) = hierarchy[t].iter().find(|(_, child)| *child == c) {
                    if rng.gen::<f64>() < spec.parent_phrase_rate {
                        let pk = &schema.keywords[p];
                        words.push(pk[rng.gen_range(0..pk.len())].clone());
                    }
                }
                for _ in 0..KEYWORDS_PER_CLASS {
                    words.push(kws[rng.gen_range(0..kws.len())].clone());
                }
            }
        }
        words.extend(CLOSING.iter().map(|s| s.to_string()));

        let kept = preprocess(&words, spec.max_len);
        let tokens = kept.iter().map(|w| vocab.intern(w)).collect();
        reports.push(TokenizedReport {
            id,
            tokens,
            labels,
            provenance,
        });
    }

    Ok(Corpus {
        schemas: spec.schemas.clone(),
        vocab,
        reports,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified (by the full label tuple), deterministic train/val/test split of
/// report ids.
pub fn split(reports: &[TokenizedReport], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions ({ft}, {fv}, {fs}) must be non-negative and sum to 1"
        )));
    }
    let n = reports.len();
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let quota = [n_train, n_val, n - n_train - n_val];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for r in reports {
        strata.entry(r.labels.as_slice()).or_default().push(r.id);
    }
    let mut ordered = Vec::with_capacity(n);
    for ids in strata.values_mut() {
        ids.shuffle(&mut rng);
        ordered.extend_from_slice(ids);
    }

    // Deal positions so each split's running count tracks its quota; any
    // contiguous stratum then gets a near-proportional share.
    let mut assigned = [0usize; 3];
    let mut out = Split::default();
    for (i, id) in ordered.into_iter().enumerate() {
        let progress = (i + 1) as f64 / n as f64;
        let s = (0..3)
            .filter(|&s| assigned[s] < quota[s])
            .max_by(|&a, &b| {
                let da = quota[a] as f64 * progress - assigned[a] as f64;
                let db = quota[b] as f64 * progress - assigned[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .expect("quotas cover every report");
        assigned[s] += 1;
        match s {
            0 => out.train.push(id),
            1 => out.val.push(id),
            _ => out.test.push(id),
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
