//! End-to-end commands: curation, evaluation, threshold sweeps, and the
//! smaller inspection tools behind the CLI.
//!
//! Every command returns an [`Error`] whose [`Error::exit_code`] is the
//! process status: 2 for configuration, 3 for data and 4 for model errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::augment::{augment_batch, draw_transforms, AugmentKey, AugmentPolicy};
use crate::backend::{Backend, BackendError, BackendSpec};
use crate::classify::{
    confusion_at, malignancy_score, optimize_threshold, validate_tau, Confusion, EvalReport,
    LesionResult, MalignancyScore, SliceEvidence, ThresholdChoice, DEFAULT_TAU,
};
use crate::cohort::{
    derive_lesions, find_volume, load_manifest, save_manifest, stratified_split, CohortSummary,
    DceStudy, Her2, LesionRecord, PatientSummary, Split, SplitFractions, validate_manifest,
};
use crate::dicom::{assemble_phase, order_phases, parse_dicom_file, DicomError, PhaseOrdering, PhaseVolume};
use crate::grid::{Grid2, RgbImage};
use crate::loss::{max_gradient_error, LossConfig};
use crate::nifti::{write_nifti_file, Datatype, NiftiVolume, VoxelData};
use crate::preprocess::{
    extract_patch, fuse_study_slice, label_components, lesion_patches, mask_slices,
    propose_lesions_by_subtraction, FusionOptions, PatchOptions, RgbPatch, SUBTRACTION_THRESHOLD,
};
use crate::render::{encode_png_rgb16, encode_png_rgb8, overlay, to_rgb8, OverlayStats};

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model error: {0}")]
    Model(#[from] BackendError),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Model(_) => 4,
        }
    }
}

fn data_err(context: impl std::fmt::Display) -> impl FnOnce(&dyn std::fmt::Display) -> Error {
    move |e| Error::Data(format!("{context}: {e}"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v: Value = serde_json::to_value(value).expect("serializable");
    let mut out = serde_json::to_vec_pretty(&v).expect("serializable");
    out.push(b'\n');
    out
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_jobs() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub manifest: PathBuf,
    pub backend: BackendSpec,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub fusion: FusionOptions,
    #[serde(default)]
    pub patch: PatchOptions,
    #[serde(default)]
    pub augment_policy: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate one split; every manifest entry when absent.
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_true")]
    pub overlays: bool,
}

impl RunConfig {
    /// Parses a JSON config; relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_root);
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(p) = self.augment_policy.as_mut() {
            fix(p);
        }
        if let crate::backend::BackendKind::Onnx { model_path } = &mut self.backend.kind {
            fix(model_path);
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let cfg = |m: String| Error::Config(m);
        if !self.data_root.is_dir() {
            return Err(cfg(format!("data_root {} is not a directory", self.data_root.display())));
        }
        if !self.manifest.is_file() {
            return Err(cfg(format!("manifest {} does not exist", self.manifest.display())));
        }
        if let Some(p) = &self.augment_policy {
            if !p.is_file() {
                return Err(cfg(format!("augment policy {} does not exist", p.display())));
            }
        }
        validate_tau(self.tau).map_err(|e| cfg(e.to_string()))?;
        if self.jobs == 0 {
            return Err(cfg("jobs must be at least 1".into()));
        }
        if self.patch.size == 0 {
            return Err(cfg("patch size must be positive".into()));
        }
        if let Some(q) = self.fusion.clip_quantile {
            if !(0.0..0.5).contains(&q) {
                return Err(cfg(format!("clip quantile {q} outside [0, 0.5)")));
            }
        }
        self.backend.validate().map_err(|e| cfg(e.to_string()))
    }

    /// Patients to evaluate with their HER2 flags, sorted by id.
    pub fn patients(&self) -> Result<Vec<(String, Her2)>, Error> {
        let bytes = fs::read(&self.manifest).map_err(|e| Error::Config(format!("{}: {e}", self.manifest.display())))?;
        let manifest = load_manifest(&bytes).map_err(|e| Error::Config(e.to_string()))?;
        for w in validate_manifest(&manifest, &self.data_root) {
            log::warn!("{w}");
        }
        let mut out: Vec<(String, Her2)> = manifest
            .entries
            .iter()
            .filter(|e| self.split.is_none_or(|s| s == e.split))
            .map(|e| (e.patient_id.clone(), e.her2))
            .collect();
        out.sort();
        Ok(out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, Error> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

/// Inference outcome for one lesion, independent of `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLesion {
    pub patient_id: String,
    pub truth_malignant: bool,
    pub score: MalignancyScore,
    /// `(|pred ∩ gt|, |pred|, |gt|)` inside the lesion region.
    pub overlap: (u64, u64, u64),
}

impl ScoredLesion {
    pub fn at(&self, tau: f64) -> LesionResult {
        LesionResult::new(&self.patient_id, self.truth_malignant, &self.score, self.overlap, tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRecord {
    pub file: String,
    pub patient_id: String,
    pub lesion_label: u16,
    pub z: usize,
    #[serde(flatten)]
    pub stats: OverlayStats,
    pub pred_pixels: u64,
    pub gt_pixels: u64,
}

struct PatientOutput {
    lesions: Vec<ScoredLesion>,
    overlays: Vec<(OverlayRecord, Vec<u8>)>,
}

fn count_nonzero(g: &Grid2<u8>) -> u64 {
    g.data().iter().filter(|&&v| v != 0).count() as u64
}

fn score_patient(
    cfg: &RunConfig,
    backend: &Backend,
    patient_id: &str,
    her2: Her2,
    render: bool,
) -> Result<PatientOutput, Error> {
    let study = DceStudy::load(&cfg.data_root, patient_id, her2)
        .map_err(|e| data_err(format!("patient {patient_id}"))(&e))?;
    let mut fused: BTreeMap<usize, RgbImage> = BTreeMap::new();
    let mut planes: BTreeMap<usize, (Grid2<u16>, Grid2<u8>)> = BTreeMap::new();
    let mut out = PatientOutput {
        lesions: Vec::new(),
        overlays: Vec::new(),
    };
    for lesion in derive_lesions(&study) {
        let ctx = format!("patient {patient_id} lesion {}", lesion.label);
        let mut patches = Vec::with_capacity(lesion.slices.len());
        let mut preds = Vec::with_capacity(lesion.slices.len());
        for &z in &lesion.slices {
            if !fused.contains_key(&z) {
                let rgb = fuse_study_slice(&study, z, &cfg.fusion).map_err(|e| data_err(&ctx)(&e))?;
                fused.insert(z, rgb);
                planes.insert(z, mask_slices(&study, z).map_err(|e| data_err(&ctx)(&e))?);
            }
            let (labels, tum) = &planes[&z];
            let patch = extract_patch(&fused[&z], labels, Some(tum), lesion.label, patient_id, z, &cfg.patch)
                .map_err(|e| data_err(&ctx)(&e))?;
            let pred = backend.predict(&patch).map_err(|e| match e {
                BackendError::ModelShapeMismatch(_) | BackendError::Inference(_) => Error::Model(e),
                other => data_err(&ctx)(&other),
            })?;
            patches.push(patch);
            preds.push(pred);
        }
        let evidence: Vec<SliceEvidence> = patches
            .iter()
            .zip(&preds)
            .map(|(p, pr)| SliceEvidence {
                z: p.provenance.z,
                labels: &p.mask,
                prediction: Some(&pr.mask),
            })
            .collect();
        let score = malignancy_score(&lesion, &evidence).map_err(|e| data_err(&ctx)(&e))?;

        let mut overlap = (0, 0, 0);
        let mut best: Option<(u64, usize)> = None;
        for (k, (patch, pred)) in patches.iter().zip(&preds).enumerate() {
            let gt = patch.malignant.as_ref().expect("patches carry _tum");
            let mut area = 0;
            for ((inside, &p), &g) in patch.lesion_region().zip(pred.mask.data()).zip(gt.data()) {
                if inside {
                    area += 1;
                    overlap.0 += u64::from(p != 0 && g != 0);
                    overlap.1 += u64::from(p != 0);
                    overlap.2 += u64::from(g != 0);
                }
            }
            if best.is_none_or(|(a, _)| area > a) {
                best = Some((area, k));
            }
        }

        if render {
            if let Some((_, k)) = best {
                let (patch, pred) = (&patches[k], &preds[k]);
                let gt = patch.malignant.as_ref().expect("patches carry _tum");
                let (px, stats) = overlay(&patch.image, &pred.mask, gt);
                let size = patch.size();
                let record = OverlayRecord {
                    file: format!(
                        "overlays/{patient_id}_lesion{:03}_z{:03}.png",
                        lesion.label, patch.provenance.z
                    ),
                    patient_id: patient_id.to_string(),
                    lesion_label: lesion.label,
                    z: patch.provenance.z,
                    stats,
                    pred_pixels: count_nonzero(&pred.mask),
                    gt_pixels: count_nonzero(gt),
                };
                out.overlays.push((record, encode_png_rgb8(size, size, &px)));
            }
        }
        out.lesions.push(ScoredLesion {
            patient_id: patient_id.to_string(),
            truth_malignant: lesion.malignant,
            score,
            overlap,
        });
    }
    Ok(out)
}

fn run_patients(
    cfg: &RunConfig,
    backend: &Backend,
    render: bool,
) -> Result<(Vec<PatientOutput>, Vec<String>), Error> {
    let patients = cfg.patients()?;
    if patients.is_empty() {
        return Err(Error::Data("no patients selected by the manifest".into()));
    }
    let pool = cfg.pool()?;
    let results: Vec<Result<PatientOutput, Error>> = pool.install(|| {
        patients
            .par_iter()
            .map(|(pid, her2)| score_patient(cfg, backend, pid, *her2, render))
            .collect()
    });
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(e @ Error::Model(_)) => return Err(e),
            Err(e) => failures.push(e.to_string()),
        }
    }
    Ok((outputs, failures))
}

/// Cached per-lesion scores, reusable while the key matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCache {
    pub key: String,
    pub backend_fingerprint: String,
    pub lesions: Vec<ScoredLesion>,
}

pub const SCORE_CACHE: &str = "scores.json";

fn cache_key(cfg: &RunConfig, backend: &Backend) -> Result<String, Error> {
    let patients = cfg.patients()?;
    let identity = serde_json::json!({
        "backend": backend.fingerprint(),
        "data_root": cfg.data_root,
        "fusion": cfg.fusion,
        "patch": cfg.patch,
        "patients": patients.iter().map(|p| &p.0).collect::<Vec<_>>(),
    });
    let digest = Sha256::digest(serde_json::to_vec(&identity).expect("serializable"));
    Ok(digest[..16].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub eval: EvalReport,
    pub backend: BackendSpec,
    pub backend_fingerprint: String,
    pub split: Option<Split>,
    pub seed: u64,
    pub optimal_threshold: Option<ThresholdChoice>,
    pub overlays: Vec<OverlayRecord>,
    pub failures: Vec<String>,
}

pub fn roc_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &report.roc {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Runs fuse, patch, predict, score and classify over the configured split,
/// then writes `report.json`, `roc.csv`, `scores.json` and overlays.
///
/// Successful patients are reported even when others fail; the failures are
/// listed in the report and returned as a data error.
pub fn evaluate(cfg: &RunConfig) -> Result<RunReport, Error> {
    cfg.validate()?;
    let backend = Backend::load(cfg.backend.clone())?;
    let (outputs, failures) = run_patients(cfg, &backend, cfg.overlays)?;

    let scored: Vec<ScoredLesion> = outputs.iter().flat_map(|o| o.lesions.clone()).collect();
    let cache = ScoreCache {
        key: cache_key(cfg, &backend)?,
        backend_fingerprint: backend.fingerprint().to_string(),
        lesions: scored.clone(),
    };
    if failures.is_empty() {
        write(&cfg.output_dir.join(SCORE_CACHE), to_sorted_json(&cache))?;
    }
    let overlays_dir = cfg.output_dir.join("overlays");
    if cfg.overlays && overlays_dir.is_dir() {
        for entry in fs::read_dir(&overlays_dir).map_err(io_err(&overlays_dir))? {
            let path = entry.map_err(io_err(&overlays_dir))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
    }
    let mut overlays = Vec::new();
    for (record, png) in outputs.into_iter().flat_map(|o| o.overlays) {
        write(&cfg.output_dir.join(&record.file), png)?;
        overlays.push(record);
    }

    let lesions: Vec<LesionResult> = scored.iter().map(|s| s.at(cfg.tau)).collect();
    let eval = EvalReport::from_lesions(cfg.tau, lesions)
        .map_err(|e| Error::Data(format!("{e}; failures: {failures:?}")))?;
    let scores: Vec<f64> = eval.lesions.iter().map(|l| l.score).collect();
    let truth: Vec<bool> = eval.lesions.iter().map(|l| l.truth_malignant).collect();
    let report = RunReport {
        optimal_threshold: optimize_threshold(&scores, &truth, None).ok(),
        eval,
        backend: cfg.backend.clone(),
        backend_fingerprint: backend.fingerprint().to_string(),
        split: cfg.split,
        seed: cfg.seed,
        overlays,
        failures: failures.clone(),
    };
    write(&cfg.output_dir.join("report.json"), to_sorted_json(&report))?;
    write(&cfg.output_dir.join("roc.csv"), roc_csv(&report.eval))?;
    if !failures.is_empty() {
        return Err(Error::Data(format!(
            "{} patient(s) failed: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    Ok(report)
}

/// Scores from `scores.json` when its key matches the config, otherwise a
/// fresh inference pass (which then refreshes the cache).
pub fn cached_scores(cfg: &RunConfig) -> Result<Vec<ScoredLesion>, Error> {
    cfg.validate()?;
    let backend = Backend::load(cfg.backend.clone())?;
    let key = cache_key(cfg, &backend)?;
    let path = cfg.output_dir.join(SCORE_CACHE);
    if let Ok(bytes) = fs::read(&path) {
        match serde_json::from_slice::<ScoreCache>(&bytes) {
            Ok(c) if c.key == key => return Ok(c.lesions),
            Ok(_) => log::info!("{} is stale, recomputing", path.display()),
            Err(e) => log::warn!("ignoring unreadable {}: {e}", path.display()),
        }
    }
    let (outputs, failures) = run_patients(cfg, &backend, false)?;
    if !failures.is_empty() {
        return Err(Error::Data(failures.join("; ")));
    }
    let lesions: Vec<ScoredLesion> = outputs.into_iter().flat_map(|o| o.lesions).collect();
    let cache = ScoreCache {
        key,
        backend_fingerprint: backend.fingerprint().to_string(),
        lesions: lesions.clone(),
    };
    write(&path, to_sorted_json(&cache))?;
    Ok(lesions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub lesion: Confusion,
    pub patient: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Removes duplicate and validates thresholds, keeping first-seen order.
pub fn dedupe_taus(taus: &[f64]) -> Result<(Vec<f64>, Vec<String>), Error> {
    if taus.is_empty() {
        return Err(Error::Config("EmptyTauList: no thresholds given".into()));
    }
    let mut seen = Vec::new();
    let mut warnings = Vec::new();
    for &t in taus {
        validate_tau(t).map_err(|e| Error::Config(e.to_string()))?;
        if seen.contains(&t) {
            warnings.push(format!("duplicate threshold {t} ignored"));
        } else {
            seen.push(t);
        }
    }
    Ok((seen, warnings))
}

/// Confusion matrices at each threshold from already-computed scores.
pub fn sweep_scores(scored: &[ScoredLesion], taus: &[f64]) -> Result<SweepResult, Error> {
    let (taus, warnings) = dedupe_taus(taus)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score.score).collect();
    let truth: Vec<bool> = scored.iter().map(|s| s.truth_malignant).collect();
    let mut rows = Vec::new();
    for tau in taus {
        let mut by_patient: BTreeMap<&str, (bool, f64)> = BTreeMap::new();
        for s in scored {
            let e = by_patient.entry(&s.patient_id).or_insert((false, f64::NEG_INFINITY));
            e.0 |= s.truth_malignant;
            e.1 = e.1.max(s.score.score);
        }
        let mut patient = Confusion::default();
        for (truth, max) in by_patient.values() {
            patient.add(*truth, crate::classify::classify_lesion(*max, tau));
        }
        rows.push(SweepRow {
            tau,
            lesion: confusion_at(&scores, &truth, tau),
            patient,
        });
    }
    Ok(SweepResult { rows, warnings })
}

fn ratio(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "tau,tp,tn,fp,fn,accuracy,sensitivity,specificity,patient_tp,patient_tn,patient_fp,patient_fn\n",
    );
    for r in rows {
        let c = r.lesion;
        let p = r.patient;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.tau,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            c.accuracy(),
            ratio(c.sensitivity()),
            ratio(c.specificity()),
            p.tp,
            p.tn,
            p.fp,
            p.fn_
        ));
    }
    s
}

/// Threshold sweep over cached scores; writes `sweep.csv`.
pub fn sweep(cfg: &RunConfig, taus: &[f64]) -> Result<SweepResult, Error> {
    dedupe_taus(taus)?;
    let scored = cached_scores(cfg)?;
    let result = sweep_scores(&scored, taus)?;
    write(&cfg.output_dir.join("sweep.csv"), sweep_csv(&result.rows))?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    pub ordering: PhaseOrdering,
    /// Writes `manifest.json` with a stratified split when set.
    pub fractions: Option<SplitFractions>,
    pub seed: u64,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            ordering: PhaseOrdering::default(),
            fractions: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedPatient {
    pub patient_id: String,
    pub lesions: usize,
    pub malignant_lesions: usize,
    pub derived_sus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateReport {
    pub summary: CohortSummary,
    pub patients: Vec<CuratedPatient>,
    pub failures: Vec<String>,
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Narrowest of int16 / uint16 that stores every value exactly, else float32.
pub fn phase_datatype(values: &[f64]) -> Datatype {
    [Datatype::Int16, Datatype::Uint16]
        .into_iter()
        .find(|d| values.iter().all(|&v| d.represents(v)))
        .unwrap_or(Datatype::Float32)
}

fn phase_to_nifti(p: &PhaseVolume) -> Result<NiftiVolume, Error> {
    let dt = phase_datatype(&p.voxels);
    let voxels = VoxelData::from_f64(&p.voxels, dt).map_err(|e| Error::Data(e.to_string()))?;
    let spacing = [p.spacing[0] as f32, p.spacing[1] as f32, p.spacing[2] as f32];
    Ok(NiftiVolume::new(p.dims, voxels)
        .map_err(|e| Error::Data(e.to_string()))?
        .with_spacing(spacing))
}

fn curate_patient(dir: &Path, patient_id: &str, out_root: &Path, opts: &CurateOptions) -> Result<(Vec<LesionRecord>, bool), Error> {
    let ctx = |m: String| Error::Data(format!("patient {patient_id}: {m}"));
    let mut series: BTreeMap<String, Vec<_>> = BTreeMap::new();
    let mut masks: BTreeMap<&str, PathBuf> = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| ctx(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if is_nifti(path) {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            for kind in ["sus", "tum"] {
                let stem = format!("{patient_id}_{kind}.nii");
                if name == stem || name == format!("{stem}.gz") {
                    masks.insert(kind, path.to_path_buf());
                }
            }
            continue;
        }
        let bytes = fs::read(path).map_err(|e| ctx(format!("{}: {e}", path.display())))?;
        match parse_dicom_file(&bytes) {
            Ok(rec) => series.entry(rec.series_uid.clone()).or_default().push(rec),
            Err(DicomError::MissingMagic) => log::debug!("skipping non-DICOM {}", path.display()),
            Err(e) => return Err(ctx(format!("{}: {e}", path.display()))),
        }
    }
    if series.is_empty() {
        return Err(ctx("no DICOM series found".into()));
    }
    let phases = series
        .into_iter()
        .map(|(uid, recs)| assemble_phase(recs).map_err(|e| ctx(format!("series {uid}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let phases = order_phases(phases, &opts.ordering).map_err(|e| ctx(e.to_string()))?;

    let out_dir = out_root.join(patient_id);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut volumes = Vec::with_capacity(phases.len());
    for (k, p) in phases.iter().enumerate() {
        let vol = phase_to_nifti(p).map_err(|e| ctx(e.to_string()))?;
        let path = out_dir.join(format!("{patient_id}_ph{k}.nii.gz"));
        write_nifti_file(&path, &vol).map_err(|e| ctx(e.to_string()))?;
        volumes.push(vol);
    }

    let tum_src = masks.get("tum").ok_or_else(|| ctx("missing _tum mask".into()))?;
    let copy = |src: &Path, kind: &str| -> Result<(), Error> {
        let suffix = if src.extension().is_some_and(|e| e == "gz") { ".nii.gz" } else { ".nii" };
        let dst = out_dir.join(format!("{patient_id}_{kind}{suffix}"));
        fs::copy(src, &dst).map_err(|e| ctx(format!("{}: {e}", src.display())))?;
        Ok(())
    };
    copy(tum_src, "tum")?;
    let derived = match masks.get("sus") {
        Some(src) => {
            copy(src, "sus")?;
            false
        }
        None => {
            let mask = propose_lesions_by_subtraction(&volumes[0], &volumes[1], SUBTRACTION_THRESHOLD)
                .map_err(|e| ctx(e.to_string()))?;
            let dims = volumes[0].dims();
            let (labels, _) = label_components(&mask, dims);
            let values: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
            let dt = if values.iter().all(|&v| Datatype::Int16.represents(v)) {
                Datatype::Int16
            } else {
                Datatype::Uint16
            };
            let voxels = VoxelData::from_f64(&values, dt).map_err(|e| ctx(e.to_string()))?;
            let mut sus = NiftiVolume::new(dims, voxels).map_err(|e| ctx(e.to_string()))?;
            sus.spacing = volumes[0].spacing;
            write_nifti_file(out_dir.join(format!("{patient_id}_sus.nii.gz")), &sus)
                .map_err(|e| ctx(e.to_string()))?;
            true
        }
    };
    let study = DceStudy::load(out_root, patient_id, Her2::Unknown).map_err(|e| ctx(e.to_string()))?;
    Ok((derive_lesions(&study), derived))
}

/// Converts `<dicom_root>/<patient>/...` DICOM series into the NIfTI layout
/// under `out_root` and writes `cohort_summary.json`.
///
/// Mask files named `<patient>_sus.nii[.gz]` and `<patient>_tum.nii[.gz]`
/// inside a patient's directory are copied; a missing `_sus` is derived by
/// subtraction thresholding.
pub fn curate(dicom_root: &Path, out_root: &Path, opts: &CurateOptions) -> Result<CurateReport, Error> {
    if !dicom_root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dicom_root.display())));
    }
    let mut patient_dirs: Vec<(String, PathBuf)> = fs::read_dir(dicom_root)
        .map_err(io_err(dicom_root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .filter_map(|e| Some((e.file_name().into_string().ok()?, e.path())))
        .collect();
    patient_dirs.sort();
    if patient_dirs.is_empty() {
        return Err(Error::Data(format!("no patients found under {}", dicom_root.display())));
    }
    fs::create_dir_all(out_root).map_err(io_err(out_root))?;

    let mut report = CurateReport {
        summary: CohortSummary::default(),
        patients: Vec::new(),
        failures: Vec::new(),
    };
    let mut strata = Vec::new();
    for (pid, dir) in &patient_dirs {
        match curate_patient(dir, pid, out_root, opts) {
            Ok((lesions, derived_sus)) => {
                report.summary.add_patient(&lesions);
                let malignant = lesions.iter().filter(|l| l.malignant).count();
                strata.push(PatientSummary {
                    patient_id: pid.clone(),
                    has_malignancy: malignant > 0,
                    her2: Her2::Unknown,
                });
                report.patients.push(CuratedPatient {
                    patient_id: pid.clone(),
                    lesions: lesions.len(),
                    malignant_lesions: malignant,
                    derived_sus,
                });
            }
            Err(e) => report.failures.push(e.to_string()),
        }
    }
    write(&out_root.join("cohort_summary.json"), to_sorted_json(&report))?;
    if let (Some(fr), false) = (opts.fractions, strata.is_empty()) {
        let manifest = stratified_split(&strata, fr, opts.seed).map_err(|e| Error::Config(e.to_string()))?;
        write(&out_root.join("manifest.json"), save_manifest(&manifest))?;
    }
    if !report.failures.is_empty() {
        return Err(Error::Data(format!(
            "{} of {} patient(s) failed: {}",
            report.failures.len(),
            patient_dirs.len(),
            report.failures.join("; ")
        )));
    }
    Ok(report)
}

/// RGB fusion of slice `z` of a curated patient.
pub fn fuse_slice(data_root: &Path, patient_id: &str, z: usize, fusion: &FusionOptions) -> Result<RgbImage, Error> {
    let study = DceStudy::load(data_root, patient_id, Her2::Unknown)
        .map_err(|e| data_err(format!("patient {patient_id}"))(&e))?;
    fuse_study_slice(&study, z, fusion).map_err(|e| data_err(format!("patient {patient_id}"))(&e))
}

pub fn write_fusion_png(path: &Path, img: &RgbImage) -> Result<(), Error> {
    write(path, encode_png_rgb16(img))
}

/// Loads an augmentation policy JSON file.
pub fn load_policy(path: &Path) -> Result<AugmentPolicy, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let policy: AugmentPolicy = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    policy.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewEntry {
    pub lesion_label: u16,
    pub z: usize,
    pub original: String,
    pub augmented: String,
    pub transforms: Vec<crate::augment::Transform>,
}

/// Writes original and augmented patches for every lesion slice of one
/// patient, plus `augment_preview.json` describing the drawn transforms.
#[allow(clippy::too_many_arguments)]
pub fn augment_preview(
    data_root: &Path,
    patient_id: &str,
    policy: &AugmentPolicy,
    fusion: &FusionOptions,
    patch: &PatchOptions,
    seed: u64,
    epoch: u64,
    jobs: usize,
    out_dir: &Path,
) -> Result<Vec<PreviewEntry>, Error> {
    let study = DceStudy::load(data_root, patient_id, Her2::Unknown)
        .map_err(|e| data_err(format!("patient {patient_id}"))(&e))?;
    let mut patches: Vec<RgbPatch> = Vec::new();
    for lesion in derive_lesions(&study) {
        patches.extend(
            lesion_patches(&study, &lesion, fusion, patch)
                .map_err(|e| data_err(format!("patient {patient_id}"))(&e))?,
        );
    }
    let augmented = augment_batch(&patches, policy, seed, epoch, jobs).map_err(|e| Error::Config(e.to_string()))?;
    let mut entries = Vec::new();
    for (orig, aug) in patches.iter().zip(&augmented) {
        let p = &orig.provenance;
        let stem = format!("{patient_id}_lesion{:03}_z{:03}", p.lesion_label, p.z);
        let (o, a) = (format!("{stem}_orig.png"), format!("{stem}_aug.png"));
        let size = orig.size();
        write(&out_dir.join(&o), encode_png_rgb8(size, size, &to_rgb8(&orig.image)))?;
        write(&out_dir.join(&a), encode_png_rgb8(size, size, &to_rgb8(&aug.image)))?;
        let key = AugmentKey {
            seed,
            patient_id: patient_id.to_string(),
            lesion_label: p.lesion_label,
            z: p.z,
            epoch,
        };
        entries.push(PreviewEntry {
            lesion_label: p.lesion_label,
            z: p.z,
            original: o,
            augmented: a,
            transforms: draw_transforms(policy, &key),
        });
    }
    write(&out_dir.join("augment_preview.json"), to_sorted_json(&entries))?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckReport {
    pub maps: usize,
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Compares analytic loss gradients with central differences on random
/// probability maps in `(0.01, 0.99)` against binary targets.
pub fn loss_check(seed: u64, maps: usize, size: usize) -> LossCheckReport {
    const STEP: f64 = 1e-5;
    const TOLERANCE: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..maps {
        let n = size * size;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        worst = worst.max(max_gradient_error(&p, &t, &cfg, STEP).expect("matching lengths"));
    }
    LossCheckReport {
        maps,
        size,
        step: STEP,
        tolerance: TOLERANCE,
        max_relative_error: worst,
        passed: worst <= TOLERANCE,
    }
}

/// Patient ids with a curated directory under `root`.
pub fn list_patients(root: &Path) -> Result<BTreeSet<String>, Error> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(root).map_err(io_err(root))? {
        let e = e.map_err(io_err(root))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_dir() && find_volume(&e.path(), &format!("{name}_ph0")).is_ok() {
            out.insert(name);
        }
    }
    Ok(out)
}
