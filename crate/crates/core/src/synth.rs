//! Synthetic manifests and landmark sequences.
//!
//! Each subject gets a fixed mouth shape and each language a fixed
//! articulation rhythm, so identity and language are both learnable from the
//! geometric features. Clip-level noise comes from a seed derived from the
//! clip id.

use std::path::{Path, PathBuf};

use crate::dataset::{AgeBand, ClipRecord, DatasetManifest, Gender, Language, CLIPS_PER_SUBJECT};
use crate::geometry::{LandmarkSequence, Point, LANDMARKS};
use crate::rng::SeededRng;

pub const SYNTH_FPS: f64 = 25.0;

const FRAME_W: f64 = 300.0;
const FRAME_H: f64 = 200.0;

/// Standard deviation of per-frame landmark noise, in pixels.
pub const JITTER_PX: f64 = 1.0;

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// `n_languages * subjects_per_language` subjects with five clips each; in
/// non-strict mode the last subject has one clip missing.
///
/// Panics if `n_languages` is not in 1..=8 or `subjects_per_language` is 0.
pub fn synthetic_manifest(n_languages: usize, subjects_per_language: usize, strict: bool) -> DatasetManifest {
    assert!((1..=Language::ALL.len()).contains(&n_languages) && subjects_per_language > 0);
    let n_subjects = n_languages * subjects_per_language;
    let mut records = Vec::with_capacity(n_subjects * CLIPS_PER_SUBJECT);
    for s in 0..n_subjects {
        let subject_id = format!("S{s:03}");
        let clips = if !strict && s + 1 == n_subjects { CLIPS_PER_SUBJECT - 1 } else { CLIPS_PER_SUBJECT };
        for c in 1..=clips {
            let clip_id = format!("{subject_id}_{c}");
            records.push(ClipRecord {
                landmark_path: format!("landmarks/{clip_id}.json"),
                clip_id,
                subject_id: subject_id.clone(),
                language: Language::ALL[s % n_languages],
                gender: if s % 2 == 0 { Gender::F } else { Gender::M },
                age_band: if (s / 2) % 2 == 0 { AgeBand::U30 } else { AgeBand::O30 },
                clip_index: c as u32,
                fps: SYNTH_FPS,
                frames_path: None,
            });
        }
    }
    DatasetManifest::from_records(records, strict).expect("synthetic manifest is valid")
}

/// Landmark track for one clip, normalized to a 300 x 200 frame.
pub fn synthetic_sequence(record: &ClipRecord, n_frames: usize, seed: u64) -> LandmarkSequence {
    let mut subject = SeededRng::new(fnv1a(&record.subject_id) ^ seed);
    let width = 60.0 + 30.0 * subject.unit();
    let height = 14.0 + 10.0 * subject.unit();
    let shape: Vec<(f64, f64)> = (0..LANDMARKS).map(|_| (3.0 * subject.normal(), 3.0 * subject.normal())).collect();

    let code = f64::from(record.language.code());
    let freq = 1.5 + 0.6 * code;
    let harmonic = 0.15 + 0.1 * (code % 3.0);

    let mut clip = SeededRng::new(fnv1a(&record.clip_id) ^ seed.rotate_left(17));
    let phase = std::f64::consts::TAU * clip.unit();
    let center = (150.0 + 4.0 * clip.normal(), 100.0 + 4.0 * clip.normal());

    let frames = (0..n_frames)
        .map(|f| {
            let t = f as f64 / record.fps;
            let w = std::f64::consts::TAU * freq * t + phase;
            let open = 0.5 + 0.35 * w.sin() + harmonic * (2.0 * w).sin();
            std::array::from_fn(|k| {
                let a = std::f64::consts::TAU * k as f64 / LANDMARKS as f64;
                let (dx, dy) = shape[k];
                let x = center.0 + (width / 2.0) * a.cos() + dx + JITTER_PX * clip.normal();
                let y = center.1 + (height / 2.0) * open * a.sin() + dy + JITTER_PX * clip.normal();
                Point { x: x / FRAME_W, y: y / FRAME_H }
            })
        })
        .collect();
    LandmarkSequence::new(record.clip_id.clone(), record.fps, frames).expect("synthetic sequence is valid")
}

/// Writes `manifest.json` and one landmark file per clip under `dir`, and
/// returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    n_languages: usize,
    subjects_per_language: usize,
    n_frames: usize,
    seed: u64,
) -> std::io::Result<PathBuf> {
    let manifest = synthetic_manifest(n_languages, subjects_per_language, true);
    for r in manifest.records() {
        let path = dir.join(&r.landmark_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, synthetic_sequence(r, n_frames, seed).to_json())?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json())?;
    Ok(path)
}
