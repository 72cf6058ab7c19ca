//! Writes the small synthetic cohort committed under
//! `tests/fixtures/cohort`.
//!
//! ```text
//! cargo run -p dce-kit --example forge_fixture_cohort -- crates/core/tests/fixtures/cohort
//! ```

use std::path::{Path, PathBuf};

use dce_kit::cohort::{save_manifest, Her2, ManifestEntry, Split, SplitFractions, SplitManifest};
use dce_kit::grid::Dims3;
use dce_kit::nifti::{write_nifti_file, Datatype, NiftiVolume, VoxelData};

const DIMS: Dims3 = Dims3 { z: 4, y: 48, x: 40 };

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    malignant: bool,
}

struct Patient {
    id: &'static str,
    split: Split,
    her2: Her2,
    blobs: Vec<Blob>,
}

fn blob(center: [f64; 3], radii: [f64; 3], malignant: bool) -> Blob {
    Blob {
        center,
        radii,
        malignant,
    }
}

fn cohort() -> Vec<Patient> {
    vec![
        Patient {
            id: "SYN001",
            split: Split::Train,
            her2: Her2::Positive,
            blobs: vec![
                blob([1.5, 14.0, 12.0], [1.6, 6.0, 5.0], true),
                blob([1.0, 34.0, 28.0], [1.2, 4.0, 4.0], false),
            ],
        },
        Patient {
            id: "SYN002",
            split: Split::Train,
            her2: Her2::Negative,
            blobs: vec![blob([2.0, 24.0, 20.0], [1.8, 8.0, 7.0], false)],
        },
        Patient {
            id: "SYN003",
            split: Split::Val,
            her2: Her2::Unknown,
            blobs: vec![
                blob([1.0, 10.0, 30.0], [1.2, 5.0, 5.0], true),
                blob([2.0, 36.0, 10.0], [1.4, 5.0, 4.0], true),
            ],
        },
        Patient {
            id: "SYN004",
            split: Split::Val,
            her2: Her2::Negative,
            blobs: vec![
                blob([1.5, 20.0, 14.0], [1.6, 4.0, 6.0], false),
                blob([1.5, 38.0, 30.0], [1.0, 3.0, 3.0], false),
            ],
        },
        Patient {
            id: "SYN005",
            split: Split::Test,
            her2: Her2::Positive,
            blobs: vec![
                blob([2.0, 22.0, 22.0], [2.0, 9.0, 8.0], true),
                blob([0.5, 6.0, 6.0], [1.0, 3.0, 3.0], false),
            ],
        },
        Patient {
            id: "SYN006",
            split: Split::Test,
            her2: Her2::Unknown,
            blobs: vec![blob([1.5, 30.0, 18.0], [1.6, 6.0, 6.0], false)],
        },
    ]
}

fn inside(b: &Blob, z: usize, y: usize, x: usize) -> f64 {
    let d = [z as f64 - b.center[0], y as f64 - b.center[1], x as f64 - b.center[2]];
    (0..3).map(|k| (d[k] / b.radii[k]).powi(2)).sum()
}

/// Enhancement curve over five phases: malignant lesions wash in fast and
/// wash out, benign ones enhance persistently.
fn enhancement(malignant: bool, phase: usize) -> f64 {
    if malignant {
        [0.0, 320.0, 280.0, 240.0, 200.0][phase]
    } else {
        [0.0, 120.0, 170.0, 210.0, 240.0][phase]
    }
}

fn write(path: PathBuf, dt: Datatype, values: &[f64]) {
    let vol = NiftiVolume::new(DIMS, VoxelData::from_f64(values, dt).expect("values fit"))
        .expect("dims match")
        .with_spacing([3.0, 0.8, 0.8]);
    write_nifti_file(&path, &vol).expect("write");
}

fn forge(root: &Path) {
    let n = DIMS.len();
    let mut entries = Vec::new();
    for p in cohort() {
        let dir = root.join(p.id);
        std::fs::create_dir_all(&dir).expect("mkdir");
        let mut sus = vec![0.0; n];
        let mut tum = vec![0.0; n];
        let mut phases = vec![vec![0.0; n]; 5];
        for z in 0..DIMS.z {
            for y in 0..DIMS.y {
                for x in 0..DIMS.x {
                    let i = DIMS.index(z, y, x);
                    let background = 90.0 + 40.0 * (y as f64 / DIMS.y as f64) + 3.0 * z as f64;
                    for (k, ph) in phases.iter_mut().enumerate() {
                        ph[i] = background + 8.0 * k as f64;
                    }
                    for (l, b) in p.blobs.iter().enumerate() {
                        let r = inside(b, z, y, x);
                        if r <= 1.0 {
                            sus[i] = (l + 1) as f64;
                            // tum covers the lesion's upper two thirds
                            let upper = (y as f64) <= b.center[1] + b.radii[1] / 3.0;
                            if b.malignant && upper {
                                tum[i] = 1.0;
                            }
                            let rim = if b.malignant && r > 0.5 { 1.2 } else { 1.0 };
                            for (k, ph) in phases.iter_mut().enumerate() {
                                ph[i] += rim * enhancement(b.malignant, k) * (1.0 - 0.3 * r);
                            }
                        }
                    }
                }
            }
        }
        for (k, ph) in phases.iter().enumerate() {
            let rounded: Vec<f64> = ph.iter().map(|v| v.round()).collect();
            write(dir.join(format!("{}_ph{k}.nii.gz", p.id)), Datatype::Int16, &rounded);
        }
        write(dir.join(format!("{}_sus.nii.gz", p.id)), Datatype::Int16, &sus);
        write(dir.join(format!("{}_tum.nii.gz", p.id)), Datatype::Uint8, &tum);
        entries.push(ManifestEntry {
            patient_id: p.id.to_string(),
            split: p.split,
            has_malignancy: p.blobs.iter().any(|b| b.malignant),
            her2: p.her2,
            extra: Default::default(),
        });
    }
    let manifest = SplitManifest {
        seed: 0,
        fractions: SplitFractions {
            train: 2.0 / 6.0,
            val: 2.0 / 6.0,
            test: 2.0 / 6.0,
        },
        entries,
        extra: Default::default(),
    };
    std::fs::write(root.join("manifest.json"), save_manifest(&manifest)).expect("manifest");
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cohort"));
    forge(&root);
    println!("wrote {}", root.display());
}
