//! Patients, lesions derived from the dual `_sus` / `_tum` masks, and
//! stratified patient-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grid::Dims3;
use crate::nifti::{read_nifti_file, NiftiError, NiftiVolume};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("patient {patient}: {what} has dims {found:?}, expected {expected:?}")]
    DimMismatch {
        patient: String,
        what: String,
        expected: Dims3,
        found: Dims3,
    },
    #[error("patient {patient}: _sus mask holds non-label value {value}")]
    BadLabel { patient: String, value: f64 },
    #[error("patient {patient}: need at least 3 phases, found {found}")]
    TooFewPhases { patient: String, found: usize },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("degenerate split fractions: {0}")]
    DegenerateFractions(String),
    #[error("patient {0} listed more than once")]
    DuplicatePatient(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Her2 {
    Positive,
    Negative,
    #[default]
    Unknown,
}

/// One patient's DCE phases plus the two annotation masks.
#[derive(Debug, Clone)]
pub struct DceStudy {
    pub patient_id: String,
    /// Acquisition-ordered phases; index 0 is pre-contrast.
    pub phases: Vec<NiftiVolume>,
    pub sus_mask: NiftiVolume,
    pub tum_mask: NiftiVolume,
    pub her2: Her2,
    labels: Vec<u16>,
}

impl DceStudy {
    pub fn new(
        patient_id: impl Into<String>,
        phases: Vec<NiftiVolume>,
        sus_mask: NiftiVolume,
        tum_mask: NiftiVolume,
        her2: Her2,
    ) -> Result<Self, CohortError> {
        let patient = patient_id.into();
        if phases.len() < 3 {
            return Err(CohortError::TooFewPhases {
                patient,
                found: phases.len(),
            });
        }
        let dims = sus_mask.dims();
        let check = |what: String, v: &NiftiVolume| {
            if v.dims() != dims {
                Err(CohortError::DimMismatch {
                    patient: patient.clone(),
                    what,
                    expected: dims,
                    found: v.dims(),
                })
            } else {
                Ok(())
            }
        };
        for (k, p) in phases.iter().enumerate() {
            check(format!("ph{k}"), p)?;
        }
        check("_tum".into(), &tum_mask)?;

        let labels = (0..dims.len())
            .map(|i| {
                let v = sus_mask.voxels().get(i);
                if v.fract() != 0.0 || !(0.0..=f64::from(u16::MAX)).contains(&v) {
                    Err(CohortError::BadLabel {
                        patient: patient.clone(),
                        value: v,
                    })
                } else {
                    Ok(v as u16)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Self {
            patient_id: patient,
            phases,
            sus_mask,
            tum_mask,
            her2,
            labels,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.sus_mask.dims()
    }

    /// `_sus` labels, flat in `(z, y, x)` order.
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn malignant_voxels(&self) -> Vec<bool> {
        (0..self.dims().len())
            .map(|i| self.tum_mask.voxels().get(i) != 0.0)
            .collect()
    }

    /// Loads `<root>/<pid>/<pid>_{ph0..,sus,tum}.nii[.gz]`. Phases beyond
    /// `ph4` are picked up while consecutive files exist.
    pub fn load(root: &Path, patient_id: &str, her2: Her2) -> Result<Self, CohortError> {
        let dir = root.join(patient_id);
        let read = |stem: &str| -> Result<NiftiVolume, CohortError> {
            let path = find_volume(&dir, &format!("{patient_id}_{stem}"))?;
            read_nifti_file(&path).map_err(|source| CohortError::Nifti { path, source })
        };
        let mut phases = Vec::with_capacity(5);
        for k in 0..5 {
            phases.push(read(&format!("ph{k}"))?);
        }
        for k in 5.. {
            match find_volume(&dir, &format!("{patient_id}_ph{k}")) {
                Ok(path) => phases.push(
                    read_nifti_file(&path).map_err(|source| CohortError::Nifti { path, source })?,
                ),
                Err(_) => break,
            }
        }
        let sus = read("sus")?;
        let tum = read("tum")?;
        Self::new(patient_id, phases, sus, tum, her2)
    }
}

/// Finds `<dir>/<stem>.nii.gz`, falling back to `.nii`.
pub fn find_volume(dir: &Path, stem: &str) -> Result<PathBuf, CohortError> {
    let gz = dir.join(format!("{stem}.nii.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    let plain = dir.join(format!("{stem}.nii"));
    if plain.is_file() {
        return Ok(plain);
    }
    Err(CohortError::MissingFile(gz))
}

/// Inclusive `(z, y, x)` bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox3 {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox3 {
    fn point(p: [usize; 3]) -> Self {
        Self { min: p, max: p }
    }

    fn grow(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub patient_id: String,
    pub label: u16,
    pub voxel_count: usize,
    pub bbox: BBox3,
    pub malignant: bool,
    /// Ascending z-indices where the label occurs.
    pub slices: Vec<usize>,
}

/// One record per nonzero label; a lesion is malignant when any of its
/// voxels is nonzero in `tum`.
pub fn derive_lesions_from(
    patient_id: &str,
    dims: Dims3,
    labels: &[u16],
    malignant: &[bool],
) -> Vec<LesionRecord> {
    struct Acc {
        count: usize,
        bbox: BBox3,
        malignant: bool,
        slices: BTreeSet<usize>,
    }
    let mut acc: BTreeMap<u16, Acc> = BTreeMap::new();
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let i = dims.index(z, y, x);
                let label = labels[i];
                if label == 0 {
                    continue;
                }
                let p = [z, y, x];
                let a = acc.entry(label).or_insert_with(|| Acc {
                    count: 0,
                    bbox: BBox3::point(p),
                    malignant: false,
                    slices: BTreeSet::new(),
                });
                a.count += 1;
                a.bbox.grow(p);
                a.malignant |= malignant[i];
                a.slices.insert(z);
            }
        }
    }
    acc.into_iter()
        .map(|(label, a)| LesionRecord {
            patient_id: patient_id.to_string(),
            label,
            voxel_count: a.count,
            bbox: a.bbox,
            malignant: a.malignant,
            slices: a.slices.into_iter().collect(),
        })
        .collect()
}

pub fn derive_lesions(study: &DceStudy) -> Vec<LesionRecord> {
    derive_lesions_from(
        &study.patient_id,
        study.dims(),
        study.labels(),
        &study.malignant_voxels(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Stratification input for one patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSummary {
    pub patient_id: String,
    pub has_malignancy: bool,
    pub her2: Her2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub split: Split,
    pub has_malignancy: bool,
    #[serde(default)]
    pub her2: Her2,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub entries: Vec<ManifestEntry>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SplitManifest {
    pub fn patients_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.patients_in(split).count()
    }
}

/// Largest-remainder apportionment of `total` units over `weights`.
fn largest_remainder(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| total as f64 * f);
    let mut out = quotas.map(|q| q.floor() as usize);
    let assigned: usize = out.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

/// Splits patients so each `(has_malignancy, her2)` stratum is divided in
/// proportion to `fractions`, while overall split sizes follow a single
/// largest-remainder rounding of the whole cohort.
pub fn stratified_split(
    patients: &[PatientSummary],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitManifest, CohortError> {
    if patients.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let f = fractions.as_array();
    if f.iter().any(|&x| !(x >= 0.0)) {
        return Err(CohortError::DegenerateFractions(format!("{f:?} has a negative entry")));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CohortError::DegenerateFractions(format!("{f:?} does not sum to 1")));
    }

    let mut strata: BTreeMap<(bool, Her2), Vec<&PatientSummary>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for p in patients {
        if !seen.insert(p.patient_id.as_str()) {
            return Err(CohortError::DuplicatePatient(p.patient_id.clone()));
        }
        strata.entry((p.has_malignancy, p.her2)).or_default().push(p);
    }

    let targets = largest_remainder(patients.len(), &f);
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let mut alloc: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| f.map(|x| (n as f64 * x).floor() as usize))
        .collect();
    let mut row_deficit: Vec<usize> = sizes
        .iter()
        .zip(&alloc)
        .map(|(&n, a)| n - a.iter().sum::<usize>())
        .collect();
    let mut col_deficit: [usize; 3] =
        std::array::from_fn(|k| targets[k] - alloc.iter().map(|a| a[k]).sum::<usize>());

    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        for k in 0..3 {
            let q = n as f64 * f[k];
            cells.push((s, k, q - q.floor()));
        }
    }
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let bumpable: Vec<[bool; 3]> = {
        let mut m = vec![[false; 3]; sizes.len()];
        for &(s, k, frac) in &cells {
            m[s][k] = frac > 1e-9;
        }
        m
    };
    let mut bumped = vec![[false; 3]; sizes.len()];
    for (s, k, _) in cells {
        if bumpable[s][k] && row_deficit[s] > 0 && col_deficit[k] > 0 {
            bumped[s][k] = true;
            row_deficit[s] -= 1;
            col_deficit[k] -= 1;
        }
    }
    // Greedy can strand a deficit; reroute along alternating paths so every
    // cell stays at the floor or ceiling of its quota.
    while let Some(s) = row_deficit.iter().position(|&d| d > 0) {
        match augmenting_path(s, &bumpable, &bumped, &col_deficit) {
            Some(path) => {
                for &(r, k, add) in &path {
                    bumped[r][k] = add;
                }
                let last = path.last().expect("path is non-empty").1;
                row_deficit[s] -= 1;
                col_deficit[last] -= 1;
            }
            None => break,
        }
    }
    for (s, row) in bumped.iter().enumerate() {
        for k in 0..3 {
            alloc[s][k] += usize::from(row[k]);
        }
    }
    // Only reachable if quotas were distorted by rounding noise.
    for s in 0..sizes.len() {
        for k in 0..3 {
            let take = row_deficit[s].min(col_deficit[k]);
            alloc[s][k] += take;
            row_deficit[s] -= take;
            col_deficit[k] -= take;
        }
    }

    let mut entries = Vec::with_capacity(patients.len());
    for (stratum_index, ((malignant, her2), mut members)) in strata.into_iter().enumerate() {
        members.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stratum_key(malignant, her2));
        members.shuffle(&mut rng);
        let counts = alloc[stratum_index];
        let mut it = members.into_iter();
        for (k, split) in Split::ALL.into_iter().enumerate() {
            for p in it.by_ref().take(counts[k]) {
                entries.push(ManifestEntry {
                    patient_id: p.patient_id.clone(),
                    split,
                    has_malignancy: p.has_malignancy,
                    her2: p.her2,
                    extra: BTreeMap::new(),
                });
            }
        }
    }
    entries.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(SplitManifest {
        seed,
        fractions,
        entries,
        extra: BTreeMap::new(),
    })
}

/// Breadth-first search for a row -> column -> row ... -> column path that
/// ends in a column still owed a patient. Returns the cell flips to apply.
fn augmenting_path(
    start: usize,
    bumpable: &[[bool; 3]],
    bumped: &[[bool; 3]],
    col_deficit: &[usize; 3],
) -> Option<Vec<(usize, usize, bool)>> {
    let mut row_from: Vec<Option<Option<usize>>> = vec![None; bumpable.len()];
    let mut col_from: [Option<usize>; 3] = [None; 3];
    row_from[start] = Some(None);
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for k in 0..3 {
            if col_from[k].is_some() || !bumpable[r][k] || bumped[r][k] {
                continue;
            }
            col_from[k] = Some(r);
            if col_deficit[k] > 0 {
                let mut path = Vec::new();
                let mut col = k;
                loop {
                    let row = col_from[col].expect("visited column");
                    path.push((row, col, true));
                    match row_from[row].expect("visited row") {
                        None => break,
                        Some(prev_col) => {
                            path.push((row, prev_col, false));
                            col = prev_col;
                        }
                    }
                }
                path.reverse();
                return Some(path);
            }
            for (r2, row) in bumped.iter().enumerate() {
                if row[k] && row_from[r2].is_none() {
                    row_from[r2] = Some(Some(k));
                    queue.push_back(r2);
                }
            }
        }
    }
    None
}

fn stratum_key(malignant: bool, her2: Her2) -> u64 {
    (u64::from(malignant) << 2) | her2 as u64
}

pub fn load_manifest(bytes: &[u8]) -> Result<SplitManifest, CohortError> {
    let manifest: SplitManifest =
        serde_json::from_slice(bytes).map_err(|e| CohortError::MalformedManifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.patient_id.as_str()) {
            return Err(CohortError::DuplicatePatient(e.patient_id.clone()));
        }
    }
    Ok(manifest)
}

/// Pretty JSON with lexicographically sorted keys.
pub fn save_manifest(manifest: &SplitManifest) -> Vec<u8> {
    let value = serde_json::to_value(manifest).expect("manifest is always serializable");
    let mut out = serde_json::to_vec_pretty(&value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Lists manifest patients that have no directory under `root`.
pub fn validate_manifest(manifest: &SplitManifest, root: &Path) -> Vec<String> {
    manifest
        .entries
        .iter()
        .filter(|e| !root.join(&e.patient_id).is_dir())
        .map(|e| format!("patient {} is in the manifest but absent from {}", e.patient_id, root.display()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub lesions: usize,
    pub benign_lesions: usize,
    pub malignant_lesions: usize,
    pub patients_with_malignancy: usize,
    pub patients_benign_only: usize,
}

impl CohortSummary {
    pub fn add_patient(&mut self, lesions: &[LesionRecord]) {
        self.patients += 1;
        self.lesions += lesions.len();
        let malignant = lesions.iter().filter(|l| l.malignant).count();
        self.malignant_lesions += malignant;
        self.benign_lesions += lesions.len() - malignant;
        if malignant > 0 {
            self.patients_with_malignancy += 1;
        } else if !lesions.is_empty() {
            self.patients_benign_only += 1;
        }
    }
}
