//! Clip manifests, evaluation splits and k-fold generation.
//!
//! A manifest lists labeled 10-second lip clips. Two split protocols are
//! supported:
//!
//! - subject-dependent: every subject keeps 4 clips for training and 1 for
//!   testing;
//! - subject-independent: per language, 4 subjects go to test, 4 to
//!   validation and the rest to training, so no subject crosses parts.
//!
//! Randomness comes from [`SeededRng`]; the seed is stored in the [`Split`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

/// Clips per subject in a complete (strict) manifest.
pub const CLIPS_PER_SUBJECT: usize = 5;
pub const MANIFEST_VERSION: u32 = 1;

const TEST_SUBJECTS_PER_LANGUAGE: usize = 4;
const VALIDATION_SUBJECTS_PER_LANGUAGE: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported manifest version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate clip_id {0:?}")]
    DuplicateClipId(String),
    #[error("clip {clip_id:?}: unknown language {value:?}")]
    UnknownLanguage { clip_id: String, value: String },
    #[error("clip {clip_id:?}: {reason}")]
    InvalidRecord { clip_id: String, reason: String },
    #[error("inconsistent subject labels for subject {0:?}")]
    InconsistentSubject(String),
    #[error("subject {subject_id:?} has {count} clips, strict mode requires {CLIPS_PER_SUBJECT}")]
    ClipCount { subject_id: String, count: usize },
    #[error("subject {0:?} repeats a clip_index")]
    DuplicateClipIndex(String),
    #[error("operation requires a strict manifest")]
    NotStrict,
    #[error("language {language} has {count} subjects, at least 9 are required")]
    TooFewSubjects { language: Language, count: usize },
    #[error("k = {0} is outside [2, 10]")]
    InvalidK(usize),
    #[error("k = {k} exceeds the smallest class support {support}")]
    InsufficientSupport { k: usize, support: usize },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Spoken language, with the fixed integer codes used for confusion matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    French = 0,
    Japanese = 1,
    English = 2,
    Italian = 3,
    Dutch = 4,
    Russian = 5,
    Spanish = 6,
    German = 7,
}

impl Language {
    /// All languages in code order.
    pub const ALL: [Language; 8] = [
        Language::French,
        Language::Japanese,
        Language::English,
        Language::Italian,
        Language::Dutch,
        Language::Russian,
        Language::Spanish,
        Language::German,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::French => "french",
            Language::Japanese => "japanese",
            Language::English => "english",
            Language::Italian => "italian",
            Language::Dutch => "dutch",
            Language::Russian => "russian",
            Language::Spanish => "spanish",
            Language::German => "german",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::from_name(s).ok_or_else(|| format!("unknown language {s:?}"))
    }
}

impl Serialize for Language {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Language {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    U30,
    O30,
}

/// One labeled lip clip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub language: Language,
    pub gender: Gender,
    pub age_band: AgeBand,
    pub clip_index: u32,
    pub fps: f64,
    pub landmark_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| DatasetError::InvalidRecord {
            clip_id: self.clip_id.clone(),
            reason,
        };
        if self.clip_id.is_empty() {
            return Err(bad("empty clip_id".into()));
        }
        if self.subject_id.is_empty() {
            return Err(bad("empty subject_id".into()));
        }
        if !(1..=CLIPS_PER_SUBJECT as u32).contains(&self.clip_index) {
            return Err(bad(format!("clip_index {} outside [1, 5]", self.clip_index)));
        }
        if !(self.fps.is_finite() && (25.0..=60.0).contains(&self.fps)) {
            return Err(bad(format!("fps {} outside [25, 60]", self.fps)));
        }
        check_relative(&self.landmark_path).map_err(bad)?;
        if let Some(p) = &self.frames_path {
            check_relative(p).map_err(bad)?;
        }
        Ok(())
    }
}

fn check_relative(p: &str) -> std::result::Result<(), String> {
    if p.is_empty() {
        return Err("empty path".into());
    }
    // Reject both POSIX and Windows style absolute paths regardless of host.
    let windows_abs = p.len() >= 2 && p.as_bytes()[1] == b':' || p.starts_with('\\');
    if Path::new(p).is_absolute() || p.starts_with('/') || windows_abs {
        return Err(format!("path {p:?} must be relative"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawManifest {
    version: u32,
    records: Vec<RawRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    clip_id: String,
    subject_id: String,
    language: String,
    gender: Gender,
    age_band: AgeBand,
    clip_index: i64,
    fps: f64,
    landmark_path: String,
    #[serde(default)]
    frames_path: Option<String>,
}

impl RawRecord {
    fn into_record(self) -> Result<ClipRecord> {
        let language = Language::from_name(&self.language).ok_or_else(|| {
            DatasetError::UnknownLanguage {
                clip_id: self.clip_id.clone(),
                value: self.language.clone(),
            }
        })?;
        let clip_index = u32::try_from(self.clip_index).map_err(|_| DatasetError::InvalidRecord {
            clip_id: self.clip_id.clone(),
            reason: format!("clip_index {} outside [1, 5]", self.clip_index),
        })?;
        Ok(ClipRecord {
            clip_id: self.clip_id,
            subject_id: self.subject_id,
            language,
            gender: self.gender,
            age_band: self.age_band,
            clip_index,
            fps: self.fps,
            landmark_path: self.landmark_path,
            frames_path: self.frames_path,
        })
    }
}

/// A validated, ordered collection of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ClipRecord>,
    strict: bool,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    version: u32,
    records: &'a [ClipRecord],
}

impl DatasetManifest {
    pub fn from_records(records: Vec<ClipRecord>, strict: bool) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !ids.insert(r.clip_id.as_str()) {
                return Err(DatasetError::DuplicateClipId(r.clip_id.clone()));
            }
        }
        let manifest = Self { records, strict };
        for (subject, idxs) in manifest.subjects() {
            let first = &manifest.records[idxs[0]];
            let consistent = idxs.iter().map(|&i| &manifest.records[i]).all(|r| {
                r.language == first.language
                    && r.gender == first.gender
                    && r.age_band == first.age_band
            });
            if !consistent {
                return Err(DatasetError::InconsistentSubject(subject.to_string()));
            }
            if strict {
                if idxs.len() != CLIPS_PER_SUBJECT {
                    return Err(DatasetError::ClipCount {
                        subject_id: subject.to_string(),
                        count: idxs.len(),
                    });
                }
                let distinct: HashSet<u32> =
                    idxs.iter().map(|&i| manifest.records[i].clip_index).collect();
                if distinct.len() != idxs.len() {
                    return Err(DatasetError::DuplicateClipIndex(subject.to_string()));
                }
            }
        }
        Ok(manifest)
    }

    pub fn parse(json: &str, strict: bool) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(json)?;
        if raw.version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(raw.version));
        }
        let records = raw
            .records
            .into_iter()
            .map(RawRecord::into_record)
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records, strict)
    }

    pub fn to_json(&self) -> String {
        let out = ManifestOut { version: MANIFEST_VERSION, records: &self.records };
        serde_json::to_string_pretty(&out).expect("manifest serializes")
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }

    /// Subjects in order of first appearance, each with its record indices
    /// sorted by `clip_index`.
    pub fn subjects(&self) -> Vec<(&str, Vec<usize>)> {
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<(&str, Vec<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let slot = *pos.entry(r.subject_id.as_str()).or_insert_with(|| {
                out.push((r.subject_id.as_str(), Vec::new()));
                out.len() - 1
            });
            out[slot].1.push(i);
        }
        for (_, idxs) in &mut out {
            idxs.sort_by_key(|&i| (self.records[i].clip_index, i));
        }
        out
    }

    /// Language of every subject, keyed by subject id.
    pub fn subject_languages(&self) -> BTreeMap<String, Language> {
        self.records
            .iter()
            .map(|r| (r.subject_id.clone(), r.language))
            .collect()
    }
}

pub fn load_manifest(path: &Path, strict: bool) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetManifest::parse(&text, strict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SubjectDependent,
    SubjectIndependent,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "subject_dependent" => Ok(Protocol::SubjectDependent),
            "subject_independent" => Ok(Protocol::SubjectIndependent),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// Train/validation/test partition of a manifest's clip ids, each list in
/// manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub protocol: Protocol,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Checks pairwise disjointness and that the union is exactly the
    /// manifest's clip ids.
    pub fn check_partition(&self, manifest: &DatasetManifest) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(format!("clip {id:?} appears twice"));
            }
            if manifest.get(id).is_none() {
                return Err(format!("clip {id:?} not in manifest"));
            }
        }
        if seen.len() != manifest.len() {
            return Err(format!("split covers {} of {} clips", seen.len(), manifest.len()));
        }
        Ok(())
    }

    /// Training clips plus validation clips (merged for the SVM route).
    pub fn training_pool(&self) -> Vec<String> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }
}

fn ordered_ids(manifest: &DatasetManifest, part: &[u8], which: u8) -> Vec<String> {
    manifest
        .records
        .iter()
        .zip(part)
        .filter(|(_, &p)| p == which)
        .map(|(r, _)| r.clip_id.clone())
        .collect()
}

const TRAIN: u8 = 0;
const VALIDATION: u8 = 1;
const TEST: u8 = 2;

fn build_split(manifest: &DatasetManifest, part: &[u8], protocol: Protocol, seed: u64) -> Split {
    Split {
        protocol,
        seed,
        train: ordered_ids(manifest, part, TRAIN),
        validation: ordered_ids(manifest, part, VALIDATION),
        test: ordered_ids(manifest, part, TEST),
    }
}

/// Per subject, one clip (drawn by the seeded generator) goes to test and the
/// other four to train.
pub fn partition_subject_dependent(manifest: &DatasetManifest, seed: u64) -> Result<Split> {
    if !manifest.strict {
        return Err(DatasetError::NotStrict);
    }
    let mut rng = SeededRng::new(seed);
    let mut part = vec![TRAIN; manifest.len()];
    for (_, idxs) in manifest.subjects() {
        part[idxs[rng.index(idxs.len())]] = TEST;
    }
    Ok(build_split(manifest, &part, Protocol::SubjectDependent, seed))
}

/// Per language, a seeded shuffle of that language's subjects sends the first
/// four to test, the next four to validation and the rest to train.
pub fn partition_subject_independent(manifest: &DatasetManifest, seed: u64) -> Result<Split> {
    if !manifest.strict {
        return Err(DatasetError::NotStrict);
    }
    let subjects = manifest.subjects();
    let mut by_language: BTreeMap<Language, Vec<usize>> = BTreeMap::new();
    for (s, (_, idxs)) in subjects.iter().enumerate() {
        by_language
            .entry(manifest.records[idxs[0]].language)
            .or_default()
            .push(s);
    }
    let needed = TEST_SUBJECTS_PER_LANGUAGE + VALIDATION_SUBJECTS_PER_LANGUAGE + 1;
    for (&language, subs) in &by_language {
        if subs.len() < needed {
            return Err(DatasetError::TooFewSubjects { language, count: subs.len() });
        }
    }
    let mut rng = SeededRng::new(seed);
    let mut part = vec![TRAIN; manifest.len()];
    for subs in by_language.values_mut() {
        rng.shuffle(subs);
        for (rank, &s) in subs.iter().enumerate() {
            let which = if rank < TEST_SUBJECTS_PER_LANGUAGE {
                TEST
            } else if rank < TEST_SUBJECTS_PER_LANGUAGE + VALIDATION_SUBJECTS_PER_LANGUAGE {
                VALIDATION
            } else {
                TRAIN
            };
            for &i in &subjects[s].1 {
                part[i] = which;
            }
        }
    }
    Ok(build_split(manifest, &part, Protocol::SubjectIndependent, seed))
}

pub const MIN_FOLDS: usize = 2;
pub const MAX_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FoldMode {
    #[default]
    Stratified,
    Plain,
}

/// Splits `0..labels.len()` into `k` folds, each sorted ascending.
///
/// Stratified mode walks the classes in sorted order, shuffles each class's
/// indices and deals them round-robin with one counter shared across classes,
/// so fold sizes and per-class counts both differ by at most one.
pub fn kfold<L: Ord>(labels: &[L], k: usize, seed: u64, mode: FoldMode) -> Result<Vec<Vec<usize>>> {
    if !(MIN_FOLDS..=MAX_FOLDS).contains(&k) {
        return Err(DatasetError::InvalidK(k));
    }
    let mut rng = SeededRng::new(seed);
    let mut folds = vec![Vec::new(); k];
    match mode {
        FoldMode::Plain => {
            if labels.len() < k {
                return Err(DatasetError::InsufficientSupport { k, support: labels.len() });
            }
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            rng.shuffle(&mut idx);
            for (n, i) in idx.into_iter().enumerate() {
                folds[n % k].push(i);
            }
        }
        FoldMode::Stratified => {
            let mut classes: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
            for (i, l) in labels.iter().enumerate() {
                classes.entry(l).or_default().push(i);
            }
            let support = classes.values().map(Vec::len).min().unwrap_or(0);
            if support < k {
                return Err(DatasetError::InsufficientSupport { k, support });
            }
            let mut dealt = 0usize;
            for idx in classes.values_mut() {
                rng.shuffle(idx);
                for &i in idx.iter() {
                    folds[dealt % k].push(i);
                    dealt += 1;
                }
            }
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Train indices (all other folds, ascending) and test indices for fold `i`.
pub fn fold_split(folds: &[Vec<usize>], i: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    (train, folds[i].clone())
}
