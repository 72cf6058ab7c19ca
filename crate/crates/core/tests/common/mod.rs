//! Shared fixtures: DICOM files from an independent writer and synthetic
//! DICOM trees for curation.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dicom_core::{dicom_value, DataElement, PrimitiveValue, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{FileMetaTableBuilder, InMemDicomObject};

use dce_kit::grid::Dims3;
use dce_kit::nifti::{write_nifti_file, Datatype, NiftiVolume, VoxelData};

pub fn fixture_cohort() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cohort")
}

pub fn fixture_onnx(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/onnx").join(name)
}

#[derive(Debug, Clone)]
pub struct SliceSpec {
    pub series_uid: String,
    pub description: String,
    pub acquisition_time: Option<String>,
    pub instance_number: Option<i32>,
    pub slice_location: Option<f64>,
    pub position: [f64; 3],
    pub spacing: [f64; 2],
    pub rows: u16,
    pub cols: u16,
    pub signed: bool,
    /// Stored values; reinterpreted as `i16` when `signed`.
    pub stored: Vec<u16>,
    pub slope: f64,
    pub intercept: f64,
    pub explicit_vr: bool,
}

impl SliceSpec {
    pub fn simple(series_uid: &str, instance: i32, rows: u16, cols: u16, stored: Vec<u16>) -> Self {
        Self {
            series_uid: series_uid.into(),
            description: "DCE".into(),
            acquisition_time: None,
            instance_number: Some(instance),
            slice_location: Some(f64::from(instance) * 2.5),
            position: [-10.0, 20.0, f64::from(instance) * 2.5],
            spacing: [0.75, 0.75],
            rows,
            cols,
            signed: false,
            stored,
            slope: 1.0,
            intercept: 0.0,
            explicit_vr: true,
        }
    }

    /// Values the parser should report after rescaling.
    pub fn expected_pixels(&self) -> Vec<f64> {
        self.stored
            .iter()
            .map(|&v| {
                let raw = if self.signed { f64::from(v as i16) } else { f64::from(v) };
                raw * self.slope + self.intercept
            })
            .collect()
    }
}

fn ds(v: f64) -> String {
    format!("{v}")
}

/// Encodes a DICOM Part 10 file with `dicom-object`.
pub fn write_dicom(spec: &SliceSpec) -> Vec<u8> {
    let sop_uid = format!("{}.{}", spec.series_uid, spec.instance_number.unwrap_or(0));
    let mut obj = InMemDicomObject::from_element_iter([
        DataElement::new(tags::SOP_CLASS_UID, VR::UI, PrimitiveValue::from(uids::MR_IMAGE_STORAGE)),
        DataElement::new(tags::SOP_INSTANCE_UID, VR::UI, PrimitiveValue::from(sop_uid.as_str())),
        DataElement::new(tags::MODALITY, VR::CS, PrimitiveValue::from("MR")),
        DataElement::new(tags::SERIES_DESCRIPTION, VR::LO, PrimitiveValue::from(spec.description.as_str())),
        DataElement::new(tags::SERIES_INSTANCE_UID, VR::UI, PrimitiveValue::from(spec.series_uid.as_str())),
        DataElement::new(
            tags::IMAGE_POSITION_PATIENT,
            VR::DS,
            dicom_value!(Strs, [ds(spec.position[0]), ds(spec.position[1]), ds(spec.position[2])]),
        ),
        DataElement::new(tags::SAMPLES_PER_PIXEL, VR::US, dicom_value!(U16, [1])),
        DataElement::new(tags::PHOTOMETRIC_INTERPRETATION, VR::CS, PrimitiveValue::from("MONOCHROME2")),
        DataElement::new(tags::ROWS, VR::US, dicom_value!(U16, [spec.rows])),
        DataElement::new(tags::COLUMNS, VR::US, dicom_value!(U16, [spec.cols])),
        DataElement::new(
            tags::PIXEL_SPACING,
            VR::DS,
            dicom_value!(Strs, [ds(spec.spacing[0]), ds(spec.spacing[1])]),
        ),
        DataElement::new(tags::BITS_ALLOCATED, VR::US, dicom_value!(U16, [16])),
        DataElement::new(tags::BITS_STORED, VR::US, dicom_value!(U16, [16])),
        DataElement::new(tags::HIGH_BIT, VR::US, dicom_value!(U16, [15])),
        DataElement::new(tags::PIXEL_REPRESENTATION, VR::US, dicom_value!(U16, [u16::from(spec.signed)])),
        DataElement::new(tags::RESCALE_INTERCEPT, VR::DS, PrimitiveValue::from(ds(spec.intercept))),
        DataElement::new(tags::RESCALE_SLOPE, VR::DS, PrimitiveValue::from(ds(spec.slope))),
        DataElement::new(
            tags::PIXEL_DATA,
            VR::OW,
            PrimitiveValue::U16(spec.stored.iter().copied().collect()),
        ),
    ]);
    if let Some(t) = &spec.acquisition_time {
        obj.put(DataElement::new(tags::ACQUISITION_TIME, VR::TM, PrimitiveValue::from(t.as_str())));
    }
    if let Some(n) = spec.instance_number {
        obj.put(DataElement::new(tags::INSTANCE_NUMBER, VR::IS, PrimitiveValue::from(n.to_string())));
    }
    if let Some(l) = spec.slice_location {
        obj.put(DataElement::new(tags::SLICE_LOCATION, VR::DS, PrimitiveValue::from(ds(l))));
    }
    let ts = if spec.explicit_vr {
        uids::EXPLICIT_VR_LITTLE_ENDIAN
    } else {
        uids::IMPLICIT_VR_LITTLE_ENDIAN
    };
    let file = obj
        .with_meta(FileMetaTableBuilder::new().transfer_syntax(ts))
        .expect("meta table");
    let mut out = Vec::new();
    file.write_all(&mut out).expect("encode");
    out
}

/// Phase volume values for the synthetic curation tree: a bright cube
/// enhancing after phase 0.
pub fn phase_value(phase: usize, z: usize, y: usize, x: usize, lesion: bool) -> u16 {
    let base = 100 + 5 * z as u16 + y as u16;
    let enhance = if lesion && phase > 0 { 150 + 10 * phase as u16 } else { 0 };
    base + enhance + x as u16 % 3
}

pub const TREE_DIMS: Dims3 = Dims3 { z: 3, y: 12, x: 10 };

pub fn in_lesion(z: usize, y: usize, x: usize) -> bool {
    z >= 1 && (3..7).contains(&y) && (2..6).contains(&x)
}

/// Writes `<root>/<pid>/series<k>/slice<j>.dcm` for five phases plus a
/// `_tum` mask (and a `_sus` mask when `with_sus`). Series UIDs sort in
/// reverse acquisition order so ordering must come from the times.
pub fn write_patient_tree(root: &Path, pid: &str, with_sus: bool, malignant: bool) {
    let d = TREE_DIMS;
    let dir = root.join(pid);
    for phase in 0..5 {
        let series_uid = format!("1.2.826.0.1.{}.{}", pid.len(), 9 - phase);
        let sdir = dir.join(format!("series{}", 4 - phase));
        std::fs::create_dir_all(&sdir).unwrap();
        for z in 0..d.z {
            let stored: Vec<u16> = (0..d.y * d.x)
                .map(|i| phase_value(phase, z, i / d.x, i % d.x, in_lesion(z, i / d.x, i % d.x)))
                .collect();
            let mut spec = SliceSpec::simple(&series_uid, z as i32 + 1, d.y as u16, d.x as u16, stored);
            spec.acquisition_time = Some(format!("10{:02}00.000000", 10 + phase));
            spec.description = format!("phase {phase}");
            spec.explicit_vr = phase % 2 == 0;
            // reverse file order relative to slice order
            std::fs::write(sdir.join(format!("slice{}.dcm", d.z - z)), write_dicom(&spec)).unwrap();
        }
    }
    std::fs::write(dir.join("notes.txt"), b"not dicom").unwrap();
    let mask = |f: &dyn Fn(bool) -> f64| -> Vec<f64> {
        (0..d.len())
            .map(|i| {
                let (z, r) = (i / d.slice_len(), i % d.slice_len());
                f(in_lesion(z, r / d.x, r % d.x))
            })
            .collect()
    };
    let tum = mask(&|l| if l && malignant { 1.0 } else { 0.0 });
    let vol = |v: Vec<f64>, dt| NiftiVolume::new(d, VoxelData::from_f64(&v, dt).unwrap()).unwrap();
    write_nifti_file(dir.join(format!("{pid}_tum.nii.gz")), &vol(tum, Datatype::Uint8)).unwrap();
    if with_sus {
        let sus = mask(&|l| if l { 1.0 } else { 0.0 });
        write_nifti_file(dir.join(format!("{pid}_sus.nii")), &vol(sus, Datatype::Int16)).unwrap();
    }
}

/// Writes `config.json` into `dir` for the fixture cohort; `overrides` are
/// merged over the defaults.
pub fn write_config(dir: &Path, overrides: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "data_root": fixture_cohort(),
        "manifest": fixture_cohort().join("manifest.json"),
        "backend": {"kind": "oracle_groundtruth"},
        "output_dir": "out",
    });
    for (k, v) in overrides.as_object().expect("object overrides") {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Every file under `root` as (relative path, bytes), sorted.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}
