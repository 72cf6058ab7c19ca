//! Lesion-level malignancy classification for breast DCE-MRI.
//!
//! The pipeline reads DICOM or NIfTI studies, fuses three contrast phases
//! into an RGB image, cuts a patch around every annotated lesion, asks a
//! segmentation backend for a malignancy map and scores each lesion by the
//! fraction of its pixels predicted malignant.
//!
//! ```
//! use dce_kit::classify::{classify_lesion, Confusion};
//!
//! assert!(classify_lesion(0.6, 0.3));
//! let c = Confusion::new(15, 8, 5, 0);
//! assert!((c.accuracy() - 0.821).abs() < 0.001);
//! ```

pub mod augment;
pub mod backend;
pub mod classify;
pub mod cohort;
pub mod dicom;
pub mod grid;
pub mod loss;
pub mod nifti;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod resample;

pub use backend::{Backend, BackendKind, BackendSpec};
pub use classify::{Confusion, EvalReport};
pub use cohort::{DceStudy, LesionRecord, SplitManifest};
pub use grid::{Dims3, Grid2, RgbImage};
pub use nifti::NiftiVolume;
pub use pipeline::{Error, RunConfig};
pub use preprocess::RgbPatch;
