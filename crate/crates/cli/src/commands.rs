use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use lipvli_core::dataset::{
    load_manifest, partition_subject_dependent, partition_subject_independent, ClipRecord, DatasetManifest, Language,
    Protocol, Split,
};
use lipvli_core::eval::{
    accuracy, attribute_errors, confusion, emit_report, ModelResult, NamedConfusion, Report,
};
use lipvli_core::fusion::{
    self, baseline_decisions, fuse, rank, read_decisions, read_gallery, read_language_predictions, read_truth,
    simulate_scores, write_decisions, write_gallery, write_language_predictions, write_truth, ProbeTruth, ScoreMatrix,
    SimulationConfig,
};
use lipvli_core::geometry::{
    feature_matrix, read_feature_file, sidecar_path, write_feature_file, FeatureParams, FeatureSidecar,
    LandmarkSequence, MetricSet,
};
use lipvli_core::preprocess::{
    canny, laplacian, list_frame_files, read_pnm, sobel, stack_frames, to_grayscale, write_pnm, write_tensor, Frame,
};
use lipvli_core::svm::{grid_search, Grid, Kernel, SearchOptions, SvmMulticlassModel, TrainParams};
use lipvli_core::synth::write_synthetic_dataset;

use crate::args::*;
use crate::run::{usage, Run};

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing required parameter --{flag}")))
}

fn load(path: &Path, strict: bool) -> Result<DatasetManifest> {
    load_manifest(path, strict).with_context(|| format!("manifest {}", path.display()))
}

fn load_split(path: &Path, manifest: &DatasetManifest) -> Result<Split> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let split: Split = serde_json::from_str(&text).with_context(|| format!("split {}", path.display()))?;
    split
        .check_partition(manifest)
        .map_err(|e| anyhow::anyhow!("split {} does not match the manifest: {e}", path.display()))?;
    Ok(split)
}

/// Records of the requested part, in manifest order for `all` and split order otherwise.
fn select<'m>(manifest: &'m DatasetManifest, split: Option<&Split>, part: Part) -> Result<Vec<&'m ClipRecord>> {
    let ids: Vec<String> = match (part, split) {
        (Part::All, _) => return Ok(manifest.records().iter().collect()),
        (_, None) => bail!(usage(format!("--part {part:?} needs --split").to_lowercase())),
        (Part::Train, Some(s)) => s.train.clone(),
        (Part::Validation, Some(s)) => s.validation.clone(),
        (Part::Test, Some(s)) => s.test.clone(),
        (Part::Pool, Some(s)) => s.training_pool(),
    };
    Ok(ids.iter().map(|id| manifest.get(id).expect("split checked against manifest")).collect())
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads landmark files, resolving paths against the manifest's directory.
fn load_sequences(base: &Path, records: &[&ClipRecord]) -> Result<Vec<LandmarkSequence>> {
    records
        .par_iter()
        .map(|r| {
            let path = base.join(&r.landmark_path);
            let seq = LandmarkSequence::load(&path).with_context(|| format!("landmarks for clip {}", r.clip_id))?;
            if seq.clip_id != r.clip_id {
                bail!("{} holds clip {:?}, manifest expects {:?}", path.display(), seq.clip_id, r.clip_id);
            }
            Ok(seq)
        })
        .collect()
}

fn parse_metrics(s: &str) -> Result<MetricSet> {
    s.replace('+', ",").parse().map_err(|e| usage(format!("--metrics {s:?}: {e}")))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidationSummary {
    manifest: PathBuf,
    strict: bool,
    clips: usize,
    subjects: usize,
    subjects_per_language: BTreeMap<String, usize>,
    landmarks_checked: bool,
    landmark_errors: Vec<String>,
}

pub fn validate(a: &ValidateArgs, run: &mut Run) -> Result<Option<u64>> {
    let path = required(&a.manifest, "manifest")?;
    let m = load(path, !a.lenient)?;
    let mut per_lang = BTreeMap::new();
    for lang in m.subject_languages().values() {
        *per_lang.entry(lang.name().to_string()).or_insert(0) += 1;
    }
    let mut errors = Vec::new();
    if a.check_landmarks {
        let base = base_dir(path);
        let recs: Vec<&ClipRecord> = m.records().iter().collect();
        errors = recs
            .par_iter()
            .filter_map(|r| load_sequences(&base, &[r]).err().map(|e| format!("{e:#}")))
            .collect();
    }
    let summary = ValidationSummary {
        manifest: path.clone(),
        strict: !a.lenient,
        clips: m.len(),
        subjects: m.subjects().len(),
        subjects_per_language: per_lang,
        landmarks_checked: a.check_landmarks,
        landmark_errors: errors.clone(),
    };
    run.write("validation.json", &serde_json::to_string_pretty(&summary)?)?;
    if let Some(first) = errors.first() {
        bail!("{} landmark file(s) failed validation; first: {first}", errors.len());
    }
    info!("{} clips, {} subjects", m.len(), m.subjects().len());
    Ok(None)
}

pub fn partition(a: &PartitionArgs, run: &mut Run) -> Result<Option<u64>> {
    let m = load(required(&a.manifest, "manifest")?, true)?;
    let split = match required(&a.protocol, "protocol")? {
        Protocol::SubjectDependent => partition_subject_dependent(&m, a.seed)?,
        Protocol::SubjectIndependent => partition_subject_independent(&m, a.seed)?,
    };
    run.write("split.json", &split.to_json())?;
    info!("train {}, validation {}, test {}", split.train.len(), split.validation.len(), split.test.len());
    Ok(Some(a.seed))
}

pub fn features(a: &FeaturesArgs, run: &mut Run) -> Result<Option<u64>> {
    let path = required(&a.manifest, "manifest")?;
    let m = load(path, false)?;
    let split = a.split.as_deref().map(|s| load_split(s, &m)).transpose()?;
    let records = select(&m, split.as_ref(), a.part)?;
    let params = FeatureParams { pivot: a.pivot, metrics: parse_metrics(&a.metrics)?, frames: a.frames };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let seqs = load_sequences(&base_dir(path), &records)?;
    let matrix = feature_matrix(&seqs, &params)?;
    let out = run.path(&a.output);
    let sidecar = FeatureSidecar { clip_ids: records.iter().map(|r| r.clip_id.clone()).collect(), params };
    write_feature_file(&out, &matrix, &sidecar)?;
    run.record(&out);
    run.record(&sidecar_path(&out));
    info!("{} x {} features", matrix.nrows(), matrix.ncols());
    Ok(None)
}

fn build_grid(a: &TrainArgs) -> Result<Grid> {
    let mut grid = Grid::default();
    if !a.kernel.is_empty() {
        grid.kernels = a
            .kernel
            .iter()
            .map(|k| k.parse::<Kernel>().map_err(|e| usage(format!("--kernel: {e}"))))
            .collect::<Result<_>>()?;
    }
    if !a.c.is_empty() {
        grid.c_values = a.c.clone();
    }
    if !a.pivot.is_empty() {
        grid.pivots = a.pivot.clone();
    }
    if !a.metrics.is_empty() {
        grid.metric_sets = a.metrics.iter().map(|s| parse_metrics(s)).collect::<Result<_>>()?;
    }
    if !a.frames.is_empty() {
        grid.frames = a.frames.clone();
    }
    grid.validate().map_err(|e| usage(e.to_string()))?;
    Ok(grid)
}

fn labels_for(records: &[&ClipRecord], target: Target) -> Vec<String> {
    records
        .iter()
        .map(|r| match target {
            Target::Identity => r.subject_id.clone(),
            Target::Language => r.language.name().to_string(),
        })
        .collect()
}

pub fn train(a: &TrainArgs, run: &mut Run) -> Result<Option<u64>> {
    let path = required(&a.manifest, "manifest")?;
    let grid = build_grid(a)?;
    let opts = SearchOptions {
        k_min: a.k_min,
        k_max: a.k_max,
        seed: a.seed,
        tolerance: a.tolerance,
        max_iter: a.max_iter,
    };
    if a.tolerance.is_nan() || a.tolerance <= 0.0 || a.max_iter == 0 || a.k_min > a.k_max {
        bail!(usage("need tolerance > 0, max_iter > 0 and k_min <= k_max"));
    }
    let m = load(path, false)?;
    let split = a.split.as_deref().map(|s| load_split(s, &m)).transpose()?;
    let part = if split.is_some() { Part::Pool } else { Part::All };
    let records = select(&m, split.as_ref(), part)?;
    let labels = labels_for(&records, a.target);
    let seqs = load_sequences(&base_dir(path), &records)?;
    info!("grid of {} configurations x {} fold counts on {} clips", grid.len(), a.k_max - a.k_min + 1, seqs.len());

    let result = grid_search(&seqs[..], &labels, &grid, &opts)?;
    run.write("grid.json", &result.to_json())?;
    run.write("grid.csv", &result.to_csv())?;
    let best = &result.best_config;
    info!("best {} C={} k={} cv={:.4}", best.kernel.label(), best.c, result.best_k, result.best_cv_accuracy);

    let x = feature_matrix(&seqs, &best.features)?;
    let params = TrainParams { kernel: best.kernel, c: best.c, tolerance: a.tolerance, max_iter: a.max_iter };
    let mut model = SvmMulticlassModel::fit(x.view(), &labels, &params)?;
    model.features = Some(best.features.clone());
    let header = run.path("model.json");
    model.save(&header)?;
    run.record(&header);
    run.record(&header.with_extension("sv.lbtf"));
    run.record(&header.with_extension("coef.lbtf"));
    Ok(Some(a.seed))
}

pub fn predict(a: &PredictArgs, run: &mut Run) -> Result<Option<u64>> {
    let model = SvmMulticlassModel::load(required(&a.model, "model")?)?;
    let (x, ids): (Array2<f64>, Vec<String>) = if let Some(fpath) = &a.features {
        let (x, side) = read_feature_file(fpath)?;
        if let Some(p) = &model.features {
            if *p != side.params {
                bail!("features in {} were extracted with {:?}, the model expects {:?}", fpath.display(), side.params, p);
            }
        }
        (x, side.clip_ids)
    } else {
        let path = a
            .manifest
            .as_ref()
            .ok_or_else(|| usage("predict needs --features or --manifest"))?;
        let params = model
            .features
            .clone()
            .ok_or_else(|| anyhow::anyhow!("model does not record its feature settings; pass --features"))?;
        let m = load(path, false)?;
        let split = a.split.as_deref().map(|s| load_split(s, &m)).transpose()?;
        let part = if split.is_none() && a.part == Part::Test { Part::All } else { a.part };
        let records = select(&m, split.as_ref(), part)?;
        let seqs = load_sequences(&base_dir(path), &records)?;
        (feature_matrix(&seqs, &params)?, records.iter().map(|r| r.clip_id.clone()).collect())
    };
    let scores = model.predict_scores(x.view(), &ids)?;
    let out = run.path(&a.output);
    scores.write_csv(&out)?;
    run.record(&out);

    let mut w = String::from("probe_id,label\n");
    for (i, id) in scores.probe_ids().iter().enumerate() {
        w.push_str(&format!("{id},{}\n", scores.argmax_label(i)));
    }
    run.write("predictions.csv", &w)?;
    Ok(None)
}

fn language_predictions(scores: Option<&PathBuf>, preds: Option<&PathBuf>) -> Result<Option<BTreeMap<String, Language>>> {
    match (scores, preds) {
        (Some(_), Some(_)) => bail!(usage("give either --language-scores or --language-pred, not both")),
        (Some(p), None) => {
            let s = ScoreMatrix::read_csv(p)?;
            let out = (0..s.n_probes())
                .map(|i| {
                    let label = s.argmax_label(i);
                    let lang = label
                        .parse::<Language>()
                        .map_err(|e| anyhow::anyhow!("{}: class {label:?}: {e}", p.display()))?;
                    Ok((s.probe_ids()[i].clone(), lang))
                })
                .collect::<Result<_>>()?;
            Ok(Some(out))
        }
        (None, Some(p)) => Ok(Some(read_language_predictions(p)?)),
        (None, None) => Ok(None),
    }
}

pub fn fuse_cmd(a: &FuseArgs, run: &mut Run) -> Result<Option<u64>> {
    let scores = ScoreMatrix::read_csv(required(&a.identity_scores, "identity-scores")?)?;
    let preds = language_predictions(a.language_scores.as_ref(), a.language_pred.as_ref())?
        .ok_or_else(|| usage("fuse needs --language-scores or --language-pred"))?;
    let gallery = match (&a.gallery, &a.manifest) {
        (Some(g), None) => read_gallery(g)?,
        (None, Some(m)) => load(m, false)?.subject_languages(),
        _ => bail!(usage("fuse needs exactly one of --gallery and --manifest")),
    };
    if a.k == 0 || a.k > scores.n_classes() {
        bail!(usage(format!("--k {} must lie in [1, {}]", a.k, scores.n_classes())));
    }
    let decisions = fuse(&scores, &preds, &gallery, a.k)?;
    let out = run.path("decisions.json");
    write_decisions(&out, &decisions)?;
    run.record(&out);
    let fallbacks = decisions.iter().filter(|d| d.fallback).count();
    info!("{} probes fused, {} fell back to rank 1", decisions.len(), fallbacks);
    Ok(None)
}

fn truth_map(a: &EvaluateArgs) -> Result<HashMap<String, ProbeTruth>> {
    let rows = match (&a.truth, &a.manifest) {
        (Some(t), None) => read_truth(t)?,
        (None, Some(m)) => load(m, false)?
            .records()
            .iter()
            .map(|r| ProbeTruth { probe_id: r.clip_id.clone(), identity: r.subject_id.clone(), language: r.language })
            .collect(),
        _ => bail!(usage("evaluate needs exactly one of --truth and --manifest")),
    };
    Ok(rows.into_iter().map(|t| (t.probe_id.clone(), t)).collect())
}

fn lookup<'t>(truth: &'t HashMap<String, ProbeTruth>, probe: &str) -> Result<&'t ProbeTruth> {
    truth.get(probe).ok_or_else(|| anyhow::anyhow!("no ground truth for probe {probe:?}"))
}

fn language_labels<'a>(langs: impl IntoIterator<Item = &'a Language>) -> Vec<String> {
    let mut seen: Vec<Language> = langs.into_iter().copied().collect();
    seen.sort();
    seen.dedup();
    seen.iter().map(|l| l.name().to_string()).collect()
}

pub fn evaluate(a: &EvaluateArgs, run: &mut Run) -> Result<Option<u64>> {
    let truth = truth_map(a)?;
    let scores = a.identity_scores.as_deref().map(ScoreMatrix::read_csv).transpose()?;
    let lang = language_predictions(a.language_scores.as_ref(), a.language_pred.as_ref())?;
    let decisions = a.decisions.as_deref().map(read_decisions).transpose()?;
    if scores.is_none() && lang.is_none() && decisions.is_none() {
        bail!(usage("evaluate needs at least one of --identity-scores, --language-*, --decisions"));
    }
    let mut result = ModelResult { name: a.name.clone(), ..Default::default() };
    let mut n_probes = 0;

    if let Some(lang) = &lang {
        let (pred, tru): (Vec<Language>, Vec<Language>) = lang
            .iter()
            .map(|(p, l)| Ok((*l, lookup(&truth, p)?.language)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        result.vli_accuracy = Some(accuracy(&pred, &tru)?);
        let labels = language_labels(pred.iter().chain(&tru));
        let p: Vec<&str> = pred.iter().map(|l| l.name()).collect();
        let t: Vec<&str> = tru.iter().map(|l| l.name()).collect();
        result.confusions.push(NamedConfusion { name: "language".into(), matrix: confusion(&p, &t, &labels)? });
        n_probes = n_probes.max(pred.len());
    }

    if let Some(s) = &scores {
        let pred = baseline_decisions(s);
        let tru = s
            .probe_ids()
            .iter()
            .map(|p| Ok(lookup(&truth, p)?.identity.clone()))
            .collect::<Result<Vec<String>>>()?;
        result.identification_accuracy = Some(accuracy(&pred, &tru)?);
        if tru.iter().all(|t| s.class_labels().contains(t)) {
            result.confusions.push(NamedConfusion {
                name: "identity".into(),
                matrix: confusion(&pred, &tru, s.class_labels())?,
            });
        }
        n_probes = n_probes.max(pred.len());
    }

    if let Some(d) = &decisions {
        let tru: Vec<ProbeTruth> = d.iter().map(|d| lookup(&truth, &d.probe_id).cloned()).collect::<Result<_>>()?;
        let pred = fusion::decision_identities(d);
        let ids: Vec<String> = tru.iter().map(|t| t.identity.clone()).collect();
        result.fused_accuracy = Some(accuracy(&pred, &ids)?);
        if let Some(s) = &scores {
            if a.k == 0 || a.k > s.n_classes() {
                bail!(usage(format!("--k {} must lie in [1, {}]", a.k, s.n_classes())));
            }
            let ranks = d.iter().map(|d| rank(s, &d.probe_id)).collect::<Result<Vec<_>, _>>()?;
            result.attribution = Some(attribute_errors(d, &ranks, &tru, a.k)?);
        }
        n_probes = n_probes.max(d.len());
    }
    result.n_probes = Some(n_probes as u64);

    let report = Report { models: vec![result], ..Default::default() };
    for p in emit_report(&report, &run.out_dir)? {
        run.record(&p);
    }
    print!("{}", report.to_markdown());
    Ok(None)
}

fn apply_op(frame: &Frame, op: Op, low: f64, high: f64) -> Result<Frame> {
    let gray = if frame.channels() == 3 { to_grayscale(frame)? } else { frame.clone() };
    Ok(match op {
        Op::Gray => gray,
        Op::Sobel => sobel(&gray)?,
        Op::Laplacian => laplacian(&gray)?,
        Op::Canny => canny(&gray, low, high)?,
    })
}

pub fn preprocess(a: &PreprocessArgs, run: &mut Run) -> Result<Option<u64>> {
    let dir = required(&a.frames_dir, "frames-dir")?;
    if !(0.0 <= a.low && a.low < a.high && a.high <= 1.0) {
        bail!(usage(format!("need 0 <= low < high <= 1, got {} and {}", a.low, a.high)));
    }
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        bail!("no PGM/PPM frames in {}", dir.display());
    }
    let frames = files.par_iter().map(|f| Ok(read_pnm(f)?)).collect::<Result<Vec<Frame>>>()?;
    let mut ops = a.op.clone();
    ops.dedup();
    for op in ops {
        let name = format!("{op:?}").to_lowercase();
        let out = frames.par_iter().map(|f| apply_op(f, op, a.low, a.high)).collect::<Result<Vec<Frame>>>()?;
        let path = run.path(&format!("{name}.lbtf"));
        write_tensor(&stack_frames(&out)?, &path)?;
        run.record(&path);
        if a.write_frames {
            std::fs::create_dir_all(run.path(&name))?;
            for (f, src) in out.iter().zip(&files) {
                let stem = src.file_stem().unwrap_or_default().to_string_lossy();
                let p = run.path(&format!("{name}/{stem}.pgm"));
                write_pnm(f, &p)?;
                run.record(&p);
            }
        }
    }
    Ok(None)
}

pub fn simulate(a: &SimulateArgs, run: &mut Run) -> Result<Option<u64>> {
    let cfg = SimulationConfig {
        n_subjects: a.subjects,
        n_languages: a.languages,
        n_probes: a.probes,
        top1_acc: a.top1_acc,
        topk_hit: a.topk_hit,
        k: a.k,
        lang_acc: a.lang_acc,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let batch = simulate_scores(&cfg)?;
    let p = run.path("scores.csv");
    batch.scores.write_csv(&p)?;
    run.record(&p);
    let p = run.path("language_pred.csv");
    write_language_predictions(&p, &batch.language_predictions())?;
    run.record(&p);
    let p = run.path("truth.csv");
    write_truth(&p, &batch.truth)?;
    run.record(&p);
    let p = run.path("gallery.csv");
    write_gallery(&p, &batch.subject_language)?;
    run.record(&p);
    Ok(Some(a.seed))
}

pub fn synth(a: &SynthArgs, run: &mut Run) -> Result<Option<u64>> {
    if !(1..=Language::ALL.len()).contains(&a.languages) || a.subjects_per_language == 0 || a.frames < 2 {
        bail!(usage("need 1-8 languages, at least one subject per language and at least 2 frames"));
    }
    let manifest = write_synthetic_dataset(&run.out_dir, a.languages, a.subjects_per_language, a.frames, a.seed)?;
    let m = load(&manifest, true)?;
    for r in m.records() {
        run.record(&run.out_dir.join(&r.landmark_path));
    }
    run.record(&manifest);
    Ok(Some(a.seed))
}
