//! Language-gated score-level fusion.
//!
//! The identity classifier produces a score per gallery identity. For each
//! probe the top-k identities are taken in score order and the first one whose
//! enrolled language equals the predicted language wins. If none of the top-k
//! matches, the rank-1 identity is kept and the decision is flagged as a
//! fallback, so k = 1 always reproduces the plain identity classifier.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Language;
use crate::rng::SeededRng;

pub const DEFAULT_TOP_K: usize = 8;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("unknown probe {0:?}")]
    UnknownProbe(String),
    #[error("identity {0:?} has no enrolled language")]
    MissingIdentityLanguage(String),
    #[error("probe {0:?} has no language prediction")]
    MissingPrediction(String),
    #[error("k = {k} must lie in [1, {classes}]")]
    InvalidK { k: usize, classes: usize },
    #[error("score matrix: {0}")]
    Shape(String),
    #[error("simulation config: {0}")]
    Config(String),
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// Probe x class score table, higher meaning more likely.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    probe_ids: Vec<String>,
    class_labels: Vec<String>,
    scores: Vec<f64>,
}

fn unique(items: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(items.len());
    for s in items {
        if !seen.insert(s.as_str()) {
            return Err(FusionError::Shape(format!("duplicate {what} {s:?}")));
        }
    }
    Ok(())
}

impl ScoreMatrix {
    /// `scores` is row-major, one row per probe.
    pub fn new(probe_ids: Vec<String>, class_labels: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != probe_ids.len() * class_labels.len() {
            return Err(FusionError::Shape(format!(
                "{} scores for {} probes x {} classes",
                scores.len(),
                probe_ids.len(),
                class_labels.len()
            )));
        }
        if class_labels.is_empty() {
            return Err(FusionError::Shape("no class labels".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(FusionError::Shape("non-finite score".into()));
        }
        unique(&class_labels, "class label")?;
        unique(&probe_ids, "probe id")?;
        Ok(Self { probe_ids, class_labels, scores })
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn n_probes(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.class_labels.len();
        &self.scores[i * c..(i + 1) * c]
    }

    pub fn probe_index(&self, probe: &str) -> Option<usize> {
        self.probe_ids.iter().position(|p| p == probe)
    }

    /// Highest-scoring label of row `i`; ties go to the earlier label.
    pub fn argmax_label(&self, i: usize) -> &str {
        &self.class_labels[ranked_indices(self.row(i))[0]]
    }

    /// Applies `f` to every score of row `i`.
    pub fn map_row(&mut self, i: usize, f: impl Fn(f64) -> f64) {
        let c = self.class_labels.len();
        self.scores[i * c..(i + 1) * c].iter_mut().for_each(|s| *s = f(*s));
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("probe_id").chain(self.class_labels.iter().map(String::as_str)).collect();
        w.write_record(&header).expect("in-memory write");
        for (i, p) in self.probe_ids.iter().enumerate() {
            let rec: Vec<String> = std::iter::once(p.clone()).chain(self.row(i).iter().map(f64::to_string)).collect();
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| FusionError::Csv { path: PathBuf::new(), message: m };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("probe_id") {
            return Err(bad("first column must be probe_id".into()));
        }
        let class_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut probe_ids = Vec::new();
        let mut scores = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            probe_ids.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                scores.push(cell.trim().parse::<f64>().map_err(|e| bad(format!("{cell:?}: {e}")))?);
            }
        }
        Self::new(probe_ids, class_labels, scores)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&read(path)?).map_err(|e| with_path(e, path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write(path, &self.to_csv())
    }

    /// Writes the scores as an f64 LBTF tensor with a `{probe_ids, class_labels}` sidecar.
    pub fn write_tensor(&self, path: &Path) -> std::result::Result<(), crate::preprocess::TensorError> {
        let t = crate::preprocess::FrameTensor::from_f64(vec![self.n_probes(), self.n_classes()], self.scores.clone())?;
        crate::preprocess::write_tensor(&t, path)?;
        let side = ScoreSidecar { probe_ids: self.probe_ids.clone(), class_labels: self.class_labels.clone() };
        let side_path = path.with_extension("json");
        std::fs::write(&side_path, serde_json::to_string_pretty(&side).expect("sidecar serializes"))
            .map_err(|source| crate::preprocess::TensorError::Io { path: side_path, source })
    }

    pub fn read_tensor(path: &Path) -> Result<Self> {
        let t = crate::preprocess::read_tensor(path).map_err(|e| FusionError::Shape(e.to_string()))?;
        let side: ScoreSidecar = serde_json::from_str(&read(&path.with_extension("json"))?)
            .map_err(|e| FusionError::Shape(e.to_string()))?;
        let data = t.into_f64().ok_or_else(|| FusionError::Shape("score tensor must be f64".into()))?;
        Self::new(side.probe_ids, side.class_labels, data)
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreSidecar {
    probe_ids: Vec<String>,
    class_labels: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| FusionError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| FusionError::Io { path: path.to_path_buf(), source })
}

fn with_path(e: FusionError, path: &Path) -> FusionError {
    match e {
        FusionError::Csv { message, .. } => FusionError::Csv { path: path.to_path_buf(), message },
        other => other,
    }
}

/// Column indices by descending score, ties by ascending column.
fn ranked_indices(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub probe_id: String,
    pub ranked: Vec<RankedClass>,
}

impl RankList {
    /// 1-based rank of `label`, if present.
    pub fn rank_of(&self, label: &str) -> Option<usize> {
        self.ranked.iter().position(|r| r.label == label).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[RankedClass] {
        &self.ranked[..k.min(self.ranked.len())]
    }
}

pub fn rank_row(scores: &ScoreMatrix, i: usize) -> RankList {
    let row = scores.row(i);
    RankList {
        probe_id: scores.probe_ids[i].clone(),
        ranked: ranked_indices(row)
            .into_iter()
            .map(|c| RankedClass { label: scores.class_labels[c].clone(), score: row[c] })
            .collect(),
    }
}

pub fn rank(scores: &ScoreMatrix, probe: &str) -> Result<RankList> {
    let i = scores.probe_index(probe).ok_or_else(|| FusionError::UnknownProbe(probe.to_string()))?;
    Ok(rank_row(scores, i))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub probe_id: String,
    pub predicted_identity: String,
    pub predicted_language: Language,
    /// 1-based rank of the chosen identity in the identity rank list.
    pub rank_of_choice: usize,
    /// No top-k identity matched the predicted language.
    pub fallback: bool,
}

/// Fuses identity scores with per-probe language predictions.
pub fn fuse(
    identity_scores: &ScoreMatrix,
    language_pred: &BTreeMap<String, Language>,
    subject_language: &BTreeMap<String, Language>,
    k: usize,
) -> Result<Vec<FusionDecision>> {
    let n_classes = identity_scores.n_classes();
    if k == 0 || k > n_classes {
        return Err(FusionError::InvalidK { k, classes: n_classes });
    }
    let class_language = identity_scores
        .class_labels
        .iter()
        .map(|l| {
            subject_language
                .get(l)
                .copied()
                .ok_or_else(|| FusionError::MissingIdentityLanguage(l.clone()))
        })
        .collect::<Result<Vec<Language>>>()?;

    identity_scores
        .probe_ids
        .iter()
        .enumerate()
        .map(|(i, probe)| {
            let predicted = *language_pred
                .get(probe)
                .ok_or_else(|| FusionError::MissingPrediction(probe.clone()))?;
            let order = ranked_indices(identity_scores.row(i));
            let hit = order.iter().take(k).position(|&c| class_language[c] == predicted);
            let (pos, fallback) = match hit {
                Some(p) => (p, false),
                None => (0, true),
            };
            Ok(FusionDecision {
                probe_id: probe.clone(),
                predicted_identity: identity_scores.class_labels[order[pos]].clone(),
                predicted_language: predicted,
                rank_of_choice: pos + 1,
                fallback,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV helpers for the small tables exchanged between pipeline stages.

fn csv_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bad = |message: String| FusionError::Csv { path: path.to_path_buf(), message };
    let text = read(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h = r.headers().map_err(|e| bad(e.to_string()))?;
    if h.len() < header.len() || h.iter().zip(header).any(|(a, b)| a != *b) {
        return Err(bad(format!("expected header {}", header.join(","))));
    }
    r.records().map(|rec| rec.map_err(|e| bad(e.to_string()))).collect()
}

fn parse_language(path: &Path, s: &str) -> Result<Language> {
    s.parse().map_err(|message| FusionError::Csv { path: path.to_path_buf(), message })
}

/// Reads `probe_id,language` rows.
pub fn read_language_predictions(path: &Path) -> Result<BTreeMap<String, Language>> {
    csv_rows(path, &["probe_id", "language"])?
        .iter()
        .map(|r| Ok((r[0].to_string(), parse_language(path, &r[1])?)))
        .collect()
}

pub fn write_language_predictions(path: &Path, preds: &[(String, Language)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["probe_id", "language"]).expect("in-memory write");
    for (p, l) in preds {
        w.write_record([p.as_str(), l.name()]).expect("in-memory write");
    }
    write(path, &String::from_utf8(w.into_inner().expect("flush")).expect("utf8"))
}

/// Reads `identity,language` rows describing the enrolled gallery.
pub fn read_gallery(path: &Path) -> Result<BTreeMap<String, Language>> {
    csv_rows(path, &["identity", "language"])?
        .iter()
        .map(|r| Ok((r[0].to_string(), parse_language(path, &r[1])?)))
        .collect()
}

pub fn write_gallery(path: &Path, gallery: &BTreeMap<String, Language>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["identity", "language"]).expect("in-memory write");
    for (id, l) in gallery {
        w.write_record([id.as_str(), l.name()]).expect("in-memory write");
    }
    write(path, &String::from_utf8(w.into_inner().expect("flush")).expect("utf8"))
}

/// Ground truth row for one probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTruth {
    pub probe_id: String,
    pub identity: String,
    pub language: Language,
}

pub fn read_truth(path: &Path) -> Result<Vec<ProbeTruth>> {
    csv_rows(path, &["probe_id", "identity", "language"])?
        .iter()
        .map(|r| {
            Ok(ProbeTruth {
                probe_id: r[0].to_string(),
                identity: r[1].to_string(),
                language: parse_language(path, &r[2])?,
            })
        })
        .collect()
}

pub fn write_truth(path: &Path, truth: &[ProbeTruth]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["probe_id", "identity", "language"]).expect("in-memory write");
    for t in truth {
        w.write_record([t.probe_id.as_str(), t.identity.as_str(), t.language.name()]).expect("in-memory write");
    }
    write(path, &String::from_utf8(w.into_inner().expect("flush")).expect("utf8"))
}

pub fn write_decisions(path: &Path, decisions: &[FusionDecision]) -> Result<()> {
    write(path, &serde_json::to_string_pretty(decisions).expect("decisions serialize"))
}

pub fn read_decisions(path: &Path) -> Result<Vec<FusionDecision>> {
    serde_json::from_str(&read(path)?).map_err(|e| FusionError::Csv { path: path.to_path_buf(), message: e.to_string() })
}

// ---------------------------------------------------------------------------
// Simulator

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    pub n_languages: usize,
    pub n_probes: usize,
    /// Probability that the true identity is ranked first.
    pub top1_acc: f64,
    /// Probability that the true identity is ranked within the top k.
    pub topk_hit: f64,
    pub k: usize,
    /// Probability that the language prediction is correct.
    pub lang_acc: f64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if self.n_languages == 0 || self.n_languages > Language::ALL.len() {
            return bad("n_languages must lie in [1, 8]");
        }
        if self.n_subjects == 0 || !self.n_subjects.is_multiple_of(self.n_languages) {
            return bad("n_subjects must be a positive multiple of n_languages");
        }
        for p in [self.top1_acc, self.topk_hit, self.lang_acc] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.topk_hit < self.top1_acc {
            return bad("topk_hit must be at least top1_acc");
        }
        if self.k == 0 || self.k > self.n_subjects {
            return bad("k must lie in [1, n_subjects]");
        }
        if self.k == 1 && self.topk_hit != self.top1_acc {
            return bad("with k = 1, topk_hit must equal top1_acc");
        }
        if self.k == self.n_subjects && self.topk_hit < 1.0 {
            return bad("with k = n_subjects, topk_hit must be 1");
        }
        if self.n_languages == 1 && self.lang_acc < 1.0 {
            return bad("a single language cannot be mispredicted");
        }
        Ok(())
    }
}

/// Output of [`simulate_scores`], aligned on probe order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedBatch {
    pub scores: ScoreMatrix,
    pub language_pred: BTreeMap<String, Language>,
    pub truth: Vec<ProbeTruth>,
    pub subject_language: BTreeMap<String, Language>,
}

impl SimulatedBatch {
    pub fn language_predictions(&self) -> Vec<(String, Language)> {
        self.scores
            .probe_ids()
            .iter()
            .map(|p| (p.clone(), self.language_pred[p]))
            .collect()
    }
}

/// Draws identity scores with controlled rank-1 / top-k rates and noisy
/// language predictions.
///
/// Subject `i` speaks language `i mod n_languages`. Per probe the true
/// identity's rank is 1 with probability `top1_acc`, uniform over 2..=k with
/// the remaining top-k mass, and uniform over k+1..=n otherwise; impostors
/// fill the other ranks in random order. The score at rank r is
/// `(n - r + j) / n` with jitter j in [0, 0.5), which is strictly decreasing
/// in r.
pub fn simulate_scores(config: &SimulationConfig) -> Result<SimulatedBatch> {
    config.validate()?;
    let n = config.n_subjects;
    let width = n.saturating_sub(1).to_string().len().max(3);
    let labels: Vec<String> = (0..n).map(|i| format!("S{i:0width$}")).collect();
    let subject_lang: Vec<Language> = (0..n).map(|i| Language::ALL[i % config.n_languages]).collect();
    let mut rng = SeededRng::new(config.seed);

    let pwidth = config.n_probes.saturating_sub(1).to_string().len().max(5);
    let mut probe_ids = Vec::with_capacity(config.n_probes);
    let mut scores = vec![0.0; config.n_probes * n];
    let mut language_pred = BTreeMap::new();
    let mut truth = Vec::with_capacity(config.n_probes);
    let mut others: Vec<usize> = Vec::with_capacity(n);

    for p in 0..config.n_probes {
        let probe = format!("P{p:0pwidth$}");
        let true_id = rng.index(n);
        let u = rng.unit();
        let true_rank = if u < config.top1_acc {
            1
        } else if u < config.topk_hit {
            2 + rng.index(config.k - 1)
        } else {
            config.k + 1 + rng.index(n - config.k)
        };
        others.clear();
        others.extend((0..n).filter(|&s| s != true_id));
        rng.shuffle(&mut others);
        let mut impostors = others.iter();
        let row = &mut scores[p * n..(p + 1) * n];
        for r in 1..=n {
            let subject = if r == true_rank { true_id } else { *impostors.next().expect("n - 1 impostors") };
            let jitter = 0.5 * rng.unit();
            row[subject] = (n as f64 - r as f64 + jitter) / n as f64;
        }

        let true_lang = subject_lang[true_id];
        let predicted = if rng.unit() < config.lang_acc {
            true_lang
        } else {
            let mut code = rng.index(config.n_languages - 1);
            if code >= true_lang.code() as usize {
                code += 1;
            }
            Language::ALL[code]
        };
        language_pred.insert(probe.clone(), predicted);
        truth.push(ProbeTruth { probe_id: probe.clone(), identity: labels[true_id].clone(), language: true_lang });
        probe_ids.push(probe);
    }

    let subject_language = labels.iter().cloned().zip(subject_lang).collect();
    Ok(SimulatedBatch {
        scores: ScoreMatrix::new(probe_ids, labels, scores)?,
        language_pred,
        truth,
        subject_language,
    })
}

/// Rank-1 identity per probe.
pub fn baseline_decisions(scores: &ScoreMatrix) -> Vec<String> {
    (0..scores.n_probes()).map(|i| scores.argmax_label(i).to_string()).collect()
}

/// Identity labels of the decisions, aligned with `truth`.
pub fn decision_identities(decisions: &[FusionDecision]) -> Vec<String> {
    decisions.iter().map(|d| d.predicted_identity.clone()).collect()
}

/// Looks up a decision per probe id.
pub fn index_decisions(decisions: &[FusionDecision]) -> HashMap<&str, &FusionDecision> {
    decisions.iter().map(|d| (d.probe_id.as_str(), d)).collect()
}
