use std::path::{Path, PathBuf};

use dce_kit::grid::Dims3;
use dce_kit::nifti::{read_nifti, read_nifti_file, write_nifti, Datatype, NiftiVolume, VoxelData};
use nifti::{InMemNiftiObject, NiftiObject, RandomAccessNiftiVolume as _, ReaderOptions};
use proptest::prelude::*;

const ALL: [Datatype; 4] = [Datatype::Uint8, Datatype::Int16, Datatype::Uint16, Datatype::Float32];

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nifti")
}

fn name(dt: Datatype) -> &'static str {
    match dt {
        Datatype::Uint8 => "u8",
        Datatype::Int16 => "i16",
        Datatype::Uint16 => "u16",
        Datatype::Float32 => "f32",
    }
}

/// The volume behind every golden file: dims (z, y, x) = (2, 3, 4).
fn golden_values(dt: Datatype) -> Vec<f64> {
    (0..24)
        .map(|i| {
            let i = i as f64;
            match dt {
                Datatype::Uint8 => i * 10.0,
                Datatype::Int16 => (i - 12.0) * 1000.0,
                Datatype::Uint16 => i * 2500.0,
                Datatype::Float32 => (i - 5.0) * 0.125,
            }
        })
        .collect()
}

fn golden_volume(dt: Datatype) -> NiftiVolume {
    NiftiVolume::new(Dims3::new(2, 3, 4), VoxelData::from_f64(&golden_values(dt), dt).unwrap())
        .unwrap()
        .with_spacing([2.5, 0.75, 0.5])
}

fn independent_read(path: &Path) -> InMemNiftiObject {
    ReaderOptions::new().read_file(path).unwrap()
}

/// Values through the `nifti` crate, visited in our `(z, y, x)` order.
fn independent_values(obj: &InMemNiftiObject, dims: Dims3) -> Vec<f64> {
    let vol = obj.volume();
    let mut out = Vec::new();
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                out.push(vol.get_f64(&[x as u16, y as u16, z as u16]).unwrap());
            }
        }
    }
    out
}

fn voxel_strategy(dt: Datatype, n: usize) -> BoxedStrategy<Vec<f64>> {
    match dt {
        Datatype::Uint8 => proptest::collection::vec(any::<u8>().prop_map(f64::from), n).boxed(),
        Datatype::Int16 => proptest::collection::vec(any::<i16>().prop_map(f64::from), n).boxed(),
        Datatype::Uint16 => proptest::collection::vec(any::<u16>().prop_map(f64::from), n).boxed(),
        Datatype::Float32 => proptest::collection::vec(
            any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(f64::from),
            n,
        )
        .boxed(),
    }
}

fn volume_strategy() -> impl Strategy<Value = (NiftiVolume, bool)> {
    (1usize..4, 1usize..6, 1usize..7, 0usize..4, any::<bool>()).prop_flat_map(|(z, y, x, d, gz)| {
        let dt = ALL[d];
        voxel_strategy(dt, z * y * x).prop_map(move |v| {
            let vol = NiftiVolume::new(Dims3::new(z, y, x), VoxelData::from_f64(&v, dt).unwrap())
                .unwrap()
                .with_spacing([1.5, 0.7, 0.7]);
            (vol, gz)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn read_after_write_is_identity((vol, gz) in volume_strategy()) {
        let bytes = write_nifti(&vol, gz).unwrap();
        let back = read_nifti(&bytes, gz).unwrap();
        prop_assert_eq!(back.voxels(), vol.voxels());
        prop_assert_eq!(back.dims(), vol.dims());
        prop_assert_eq!(back.spacing, vol.spacing);
        prop_assert_eq!(write_nifti(&back, gz).unwrap(), bytes);
    }
}

#[test]
fn written_files_parse_in_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    for dt in ALL {
        for gz in [false, true] {
            let vol = golden_volume(dt);
            let path = dir.path().join(format!("v_{}.nii{}", name(dt), if gz { ".gz" } else { "" }));
            std::fs::write(&path, write_nifti(&vol, gz).unwrap()).unwrap();
            let obj = independent_read(&path);
            let h = obj.header();
            assert_eq!(&h.dim[..4], &[3, 4, 3, 2], "{dt:?}");
            assert_eq!(h.datatype, dt.code());
            assert_eq!(&h.pixdim[1..4], &[0.5, 0.75, 2.5]);
            assert_eq!(independent_values(&obj, vol.dims()), golden_values(dt), "{dt:?} gz={gz}");
        }
    }
}

#[test]
fn writer_output_matches_committed_golden_files() {
    let regenerate = std::env::var_os("DCE_KIT_REGEN_GOLDEN").is_some();
    for dt in ALL {
        for gz in [false, true] {
            let path = golden_dir().join(format!("dce_kit_{}.nii{}", name(dt), if gz { ".gz" } else { "" }));
            let bytes = write_nifti(&golden_volume(dt), gz).unwrap();
            if regenerate {
                std::fs::create_dir_all(golden_dir()).unwrap();
                std::fs::write(&path, &bytes).unwrap();
            }
            let committed = std::fs::read(&path).unwrap();
            assert_eq!(bytes, committed, "{}", path.display());
            let obj = independent_read(&path);
            assert_eq!(independent_values(&obj, Dims3::new(2, 3, 4)), golden_values(dt));
        }
    }
}

#[test]
fn reads_files_written_by_nibabel() {
    for (file, dt) in [("nibabel_i16.nii.gz", Datatype::Int16), ("nibabel_f32.nii", Datatype::Float32)] {
        let vol = read_nifti_file(golden_dir().join(file)).unwrap();
        assert_eq!(vol.dims(), Dims3::new(2, 3, 4), "{file}");
        assert_eq!(vol.datatype(), dt);
        assert_eq!(vol.voxels().to_f64(), golden_values(dt), "{file}");
        assert_eq!(vol.spacing, [2.5, 0.75, 0.5]);
    }
}
