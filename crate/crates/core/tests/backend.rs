use std::path::PathBuf;

use dce_kit::backend::{load_onnx, Backend, BackendError, BackendKind, BackendSpec, Channel};
use dce_kit::grid::{Grid2, RgbImage};
use dce_kit::preprocess::{PatchProvenance, RgbPatch};
use sha2::{Digest, Sha256};

/// Output hash of `tiny_seg.onnx` on [`test_patch`], captured once.
const TINY_SEG_GOLDEN: &str = "87187db9d8d4135080ca6ab98fd3598f48e90daeae7febf2c688e29f72055477";

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/onnx").join(name)
}

/// Smooth deterministic 256x256 patch with a bright-G disc in the middle.
fn test_patch() -> RgbPatch {
    let n = 256;
    let mut image = RgbImage::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f32 / 255.0, x as f32 / 255.0);
            let d2 = (fy - 0.5).powi(2) + (fx - 0.5).powi(2);
            image.set(0, y, x, 0.2 + 0.3 * fx);
            image.set(1, y, x, if d2 < 0.04 { 0.9 } else { 0.25 * fy });
            image.set(2, y, x, 0.5 * (1.0 - fx));
        }
    }
    let mask = Grid2::from_fn(n, n, |y, x| u16::from((y as i32 - 128).pow(2) + (x as i32 - 128).pow(2) < 60 * 60));
    let malignant = Some(Grid2::from_fn(n, n, |y, x| u8::from(y < 128 && mask.get(y, x) != 0)));
    RgbPatch {
        image,
        mask,
        malignant,
        provenance: PatchProvenance {
            patient_id: "T".into(),
            lesion_label: 1,
            z: 0,
            origin: (0, 0),
            window: n,
            resize_factor: 1.0,
        },
    }
}

fn onnx_spec(name: &str) -> BackendSpec {
    BackendSpec::new(BackendKind::Onnx {
        model_path: fixture(name),
    })
}

fn probability_hash(p: &Grid2<f32>) -> String {
    let mut h = Sha256::new();
    for v in p.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn tiny_fixture_loads_with_contract_dims() {
    let model = load_onnx(&fixture("tiny_seg.onnx")).unwrap();
    assert_eq!(model.input_dims(), [1, 3, 256, 256]);
}

#[test]
fn tiny_fixture_output_matches_golden_hash() {
    let backend = Backend::load(onnx_spec("tiny_seg.onnx")).unwrap();
    let pred = backend.predict(&test_patch()).unwrap();
    assert_eq!(probability_hash(&pred.probability), TINY_SEG_GOLDEN);
}

#[test]
fn tiny_fixture_matches_its_closed_form() {
    // the fixture is a 1x1 convolution: logit = -4 R + 10 G - 2 B - 2
    let patch = test_patch();
    let backend = Backend::load(onnx_spec("tiny_seg.onnx")).unwrap();
    let pred = backend.predict(&patch).unwrap();
    for y in (0..256).step_by(7) {
        for x in (0..256).step_by(5) {
            let img = &patch.image;
            let logit = -4.0 * f64::from(img.get(0, y, x)) + 10.0 * f64::from(img.get(1, y, x))
                - 2.0 * f64::from(img.get(2, y, x))
                - 2.0;
            let expect = 1.0 / (1.0 + (-logit).exp());
            let got = f64::from(pred.probability.get(y, x));
            assert!((got - expect).abs() < 1e-5, "({y},{x}) {got} vs {expect}");
            assert_eq!(pred.mask.get(y, x), u8::from(pred.probability.get(y, x) >= 0.5));
        }
    }
}

#[test]
fn onnx_predictions_are_repeatable() {
    let backend = Backend::load(onnx_spec("tiny_seg.onnx")).unwrap();
    let patch = test_patch();
    let a = backend.predict(&patch).unwrap();
    let b = std::thread::spawn({
        let backend = backend.clone();
        let patch = patch.clone();
        move || backend.predict(&patch).unwrap()
    })
    .join()
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn two_input_model_is_rejected() {
    let err = load_onnx(&fixture("two_inputs.onnx")).unwrap_err();
    assert!(matches!(err, BackendError::ModelShapeMismatch(_)), "{err:?}");
}

#[test]
fn wrong_input_shape_is_rejected() {
    let err = Backend::load(onnx_spec("wrong_input_shape.onnx")).unwrap_err();
    assert!(matches!(err, BackendError::ModelShapeMismatch(_)), "{err:?}");
}

#[test]
fn missing_and_corrupt_models_fail_to_load() {
    let err = load_onnx(&fixture("does_not_exist.onnx")).unwrap_err();
    assert!(matches!(err, BackendError::ModelLoadFailure(_)));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.onnx");
    std::fs::write(&junk, b"not a model").unwrap();
    assert!(matches!(load_onnx(&junk), Err(BackendError::ModelLoadFailure(_))));
}

#[test]
fn onnx_backend_rejects_other_patch_sizes() {
    let backend = Backend::load(onnx_spec("tiny_seg.onnx")).unwrap();
    let mut patch = test_patch();
    patch.image = RgbImage::zeros(64, 64);
    patch.mask = Grid2::filled(64, 64, 1);
    patch.malignant = None;
    assert!(matches!(backend.predict(&patch), Err(BackendError::ModelShapeMismatch(_))));
}

#[test]
fn constant_zero_gives_empty_mask() {
    let backend = Backend::load("constant:0".parse().unwrap()).unwrap();
    let pred = backend.predict(&test_patch()).unwrap();
    assert!(pred.mask.data().iter().all(|&m| m == 0));
    assert!(pred.probability.data().iter().all(|&p| p == 0.0));
}

#[test]
fn oracle_marks_exactly_the_malignant_pixels() {
    let mut patch = test_patch();
    // 60 of 100 lesion pixels malignant
    patch.mask = Grid2::from_fn(256, 256, |y, x| u16::from(y < 10 && x < 10));
    patch.malignant = Some(Grid2::from_fn(256, 256, |y, x| u8::from(y < 6 && x < 10)));
    let backend = Backend::load(BackendSpec::new(BackendKind::OracleGroundtruth)).unwrap();
    let pred = backend.predict(&patch).unwrap();
    assert_eq!(pred.probability.data().iter().filter(|&&p| p == 1.0).count(), 60);
    assert_eq!(pred.mask, *patch.malignant.as_ref().unwrap());

    patch.malignant = None;
    assert_eq!(backend.predict(&patch), Err(BackendError::MissingMaskForOracle));
}

#[test]
fn heuristic_keeps_channel_values_above_threshold() {
    let spec = BackendSpec::new(BackendKind::IntensityHeuristic {
        channel: Channel::G,
        threshold: 0.5,
    });
    let patch = test_patch();
    let pred = Backend::load(spec).unwrap().predict(&patch).unwrap();
    for (i, (&p, &g)) in pred.probability.data().iter().zip(patch.image.channel(1)).enumerate() {
        assert_eq!(p, if g > 0.5 { g } else { 0.0 }, "pixel {i}");
    }
}

#[test]
fn fingerprint_depends_on_content_not_path() {
    let a = Backend::load(onnx_spec("tiny_seg.onnx")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.onnx");
    std::fs::copy(fixture("tiny_seg.onnx"), &copy).unwrap();
    let b = Backend::load(BackendSpec::new(BackendKind::Onnx { model_path: copy })).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = Backend::load("constant:0.5".parse().unwrap()).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}
