//! Accuracy, confusion matrices, error attribution and report emission.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionDecision, ProbeTruth, RankList};

pub const REPORT_VERSION: u32 = 1;

/// JSON schema for `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/report.schema.json");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {truth} truth values")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("no probes to evaluate")]
    Empty,
    #[error("label {0:?} is not in the label list")]
    UnknownLabel(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("probe {index}: expected {expected:?}, found {found:?}")]
    Misaligned { index: usize, expected: String, found: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check_lengths(p: usize, t: usize) -> Result<()> {
    if p != t {
        return Err(EvalError::LengthMismatch { predictions: p, truth: t });
    }
    if p == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Fraction of positions where `predictions` equals `truth`.
pub fn accuracy<T: PartialEq>(predictions: &[T], truth: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Rows are truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Number of probes whose truth is class `i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// CSV with a header row and a leading label column.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("truth\\predicted").chain(self.labels.iter().map(String::as_str)).collect();
        w.write_record(&header).expect("in-memory write");
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let rec: Vec<String> = std::iter::once(label.clone()).chain(row.iter().map(u64::to_string)).collect();
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Builds the confusion matrix of `predictions` against `truth` over `labels`.
pub fn confusion<S: AsRef<str>>(predictions: &[S], truth: &[S], labels: &[String]) -> Result<ConfusionMatrix> {
    check_lengths(predictions.len(), truth.len())?;
    let mut index = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if index.insert(l.as_str(), i).is_some() {
            return Err(EvalError::DuplicateLabel(l.clone()));
        }
    }
    let lookup = |s: &str| index.get(s).copied().ok_or_else(|| EvalError::UnknownLabel(s.to_string()));
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (p, t) in predictions.iter().zip(truth) {
        counts[lookup(t.as_ref())?][lookup(p.as_ref())?] += 1;
    }
    let m = ConfusionMatrix { labels: labels.to_vec(), counts };
    assert_eq!(m.total(), truth.len() as u64);
    Ok(m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAttribution {
    pub total_errors: u64,
    /// Predicted language differs from the true language.
    pub lang_wrong: u64,
    /// Language right, true identity outside the top-k.
    pub lang_correct_id_absent: u64,
    /// Language right, true identity in the top-k but a same-language impostor ranked higher.
    pub lang_correct_outranked: u64,
}

impl ErrorAttribution {
    pub fn is_partition(&self) -> bool {
        self.lang_wrong + self.lang_correct_id_absent + self.lang_correct_outranked == self.total_errors
    }

    /// Share of errors caused by the identity being absent from the top-k.
    pub fn id_absent_share(&self) -> Option<f64> {
        (self.total_errors > 0).then(|| self.lang_correct_id_absent as f64 / self.total_errors as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    LangWrong,
    LangCorrectIdAbsent,
    LangCorrectOutranked,
}

/// Category of one decision, or `None` when it is correct.
pub fn classify_error(decision: &FusionDecision, ranks: &RankList, truth: &ProbeTruth, k: usize) -> Option<ErrorCategory> {
    if decision.predicted_identity == truth.identity {
        None
    } else if decision.predicted_language != truth.language {
        Some(ErrorCategory::LangWrong)
    } else if ranks.rank_of(&truth.identity).is_none_or(|r| r > k) {
        Some(ErrorCategory::LangCorrectIdAbsent)
    } else {
        Some(ErrorCategory::LangCorrectOutranked)
    }
}

/// Assigns each wrong fused decision to one error category. All slices are
/// aligned on probe id.
pub fn attribute_errors(
    decisions: &[FusionDecision],
    rank_lists: &[RankList],
    truth: &[ProbeTruth],
    k: usize,
) -> Result<ErrorAttribution> {
    check_lengths(decisions.len(), truth.len())?;
    check_lengths(rank_lists.len(), truth.len())?;
    let mut out = ErrorAttribution::default();
    for (i, ((d, r), t)) in decisions.iter().zip(rank_lists).zip(truth).enumerate() {
        for found in [&d.probe_id, &r.probe_id] {
            if *found != t.probe_id {
                return Err(EvalError::Misaligned { index: i, expected: t.probe_id.clone(), found: found.clone() });
            }
        }
        if let Some(cat) = classify_error(d, r, t, k) {
            out.total_errors += 1;
            match cat {
                ErrorCategory::LangWrong => out.lang_wrong += 1,
                ErrorCategory::LangCorrectIdAbsent => out.lang_correct_id_absent += 1,
                ErrorCategory::LangCorrectOutranked => out.lang_correct_outranked += 1,
            }
        }
    }
    debug_assert!(out.is_partition());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfusion {
    pub name: String,
    pub matrix: ConfusionMatrix,
}

/// Results of one model row of the summary table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub vli_accuracy: Option<f64>,
    pub identification_accuracy: Option<f64>,
    pub fused_accuracy: Option<f64>,
    pub n_probes: Option<u64>,
    pub attribution: Option<ErrorAttribution>,
    #[serde(default)]
    pub confusions: Vec<NamedConfusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub models: Vec<ModelResult>,
}

impl Default for Report {
    fn default() -> Self {
        Self { version: REPORT_VERSION, models: Vec::new() }
    }
}

/// `0.496` -> `"49.60%"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), percent)
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' }).collect()
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n");
        s.push_str("| Model | VLI accuracy | Identification accuracy | Fused accuracy |\n");
        s.push_str("|---|---|---|---|\n");
        for m in &self.models {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                m.name,
                cell(m.vli_accuracy),
                cell(m.identification_accuracy),
                cell(m.fused_accuracy)
            );
        }
        for m in self.models.iter().filter(|m| m.attribution.is_some()) {
            let a = m.attribution.expect("filtered");
            let share = |n: u64| if a.total_errors == 0 { "-".into() } else { percent(n as f64 / a.total_errors as f64) };
            let _ = write!(
                s,
                "\n## Fused errors: {}\n\n| Category | Count | Share |\n|---|---|---|\n\
                 | language wrong | {} | {} |\n\
                 | language correct, identity not in top-k | {} | {} |\n\
                 | language correct, identity outranked | {} | {} |\n\
                 | total | {} | - |\n",
                m.name,
                a.lang_wrong,
                share(a.lang_wrong),
                a.lang_correct_id_absent,
                share(a.lang_correct_id_absent),
                a.lang_correct_outranked,
                share(a.lang_correct_outranked),
                a.total_errors
            );
        }
        s
    }

    /// File name of each confusion CSV, in report order.
    pub fn confusion_files(&self) -> Vec<(String, &ConfusionMatrix)> {
        self.models
            .iter()
            .flat_map(|m| {
                m.confusions
                    .iter()
                    .map(move |c| (format!("confusion_{}_{}.csv", file_stem(&m.name), file_stem(&c.name)), &c.matrix))
            })
            .collect()
    }
}

/// Writes `report.json`, `report.md` and one CSV per confusion matrix into
/// `dir`, returning the written paths.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = vec![
        (dir.join("report.json"), report.to_json()),
        (dir.join("report.md"), report.to_markdown()),
    ];
    for (name, m) in report.confusion_files() {
        files.push((dir.join(name), m.to_csv()));
    }
    let mut written = Vec::with_capacity(files.len());
    for (path, text) in files {
        std::fs::write(&path, text).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
