//! Intensity normalization, temporal RGB fusion, subtraction-based lesion
//! proposals and lesion-centered patch extraction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{DceStudy, LesionRecord};
use crate::grid::{Dims3, Grid2, RgbImage};
use crate::nifti::NiftiVolume;
use crate::resample::{crop, crop_rgb, resize_bilinear, resize_nearest};

/// Subtraction threshold used for AMBL-style automatic lesion proposals.
pub const SUBTRACTION_THRESHOLD: f64 = 75.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("slice contains non-finite values")]
    NonFiniteInput,
    #[error("quantile {0} outside [0, 0.5)")]
    BadQuantile(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("lesion label {0} absent from slice")]
    LabelAbsent(u16),
    #[error("slice is empty")]
    EmptySlice,
    #[error("slice {z} out of range for {depth} slices")]
    SliceOutOfRange { z: usize, depth: usize },
}

/// Maps the slice's range onto `[0, 1]`; a constant slice maps to zeros.
pub fn minmax_normalize(slice: &Grid2<f64>) -> Result<Grid2<f64>, PreprocessError> {
    let (lo, hi) = finite_range(slice.data())?;
    let span = hi - lo;
    Ok(slice.map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }))
}

fn finite_range(values: &[f64]) -> Result<(f64, f64), PreprocessError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(PreprocessError::NonFiniteInput);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Quantile of ascending `sorted` by linear interpolation between order
/// statistics (`h = (n - 1) * q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clamps values outside the `[q, 1 - q]` quantile band.
pub fn quantile_clip(slice: &Grid2<f64>, q: f64) -> Result<Grid2<f64>, PreprocessError> {
    if !(0.0..0.5).contains(&q) {
        return Err(PreprocessError::BadQuantile(q));
    }
    finite_range(slice.data())?;
    if q == 0.0 || slice.data().is_empty() {
        return Ok(slice.clone());
    }
    let mut sorted = slice.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, q);
    let hi = quantile_sorted(&sorted, 1.0 - q);
    Ok(slice.map(|&v| v.clamp(lo, hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Each phase slice min-max normalized on its own.
    #[default]
    PerSlice,
    /// Raw phases stacked, then one min-max over all three channels.
    PostFusionGlobal,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-slice" => Ok(FusionMode::PerSlice),
            "post-fusion-global" => Ok(FusionMode::PostFusionGlobal),
            other => Err(format!("unknown fusion mode {other:?}")),
        }
    }
}

/// R = pre-contrast, G = first post-contrast, B = final phase.
pub fn rgb_fuse(
    pre: &Grid2<f64>,
    early: &Grid2<f64>,
    late: &Grid2<f64>,
    mode: FusionMode,
) -> Result<RgbImage, PreprocessError> {
    for other in [early, late] {
        if other.shape() != pre.shape() {
            let (h, w) = pre.shape();
            let (oh, ow) = other.shape();
            return Err(PreprocessError::ShapeMismatch((1, h, w), (1, oh, ow)));
        }
    }
    let to_f32 = |g: Grid2<f64>| g.map(|&v| v as f32);
    match mode {
        FusionMode::PerSlice => Ok(RgbImage::from_channels(
            &to_f32(minmax_normalize(pre)?),
            &to_f32(minmax_normalize(early)?),
            &to_f32(minmax_normalize(late)?),
        )),
        FusionMode::PostFusionGlobal => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for g in [pre, early, late] {
                let (a, b) = finite_range(g.data())?;
                lo = lo.min(a);
                hi = hi.max(b);
            }
            let span = hi - lo;
            let norm = |g: &Grid2<f64>| {
                g.map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
            };
            Ok(RgbImage::from_channels(&norm(pre), &norm(early), &norm(late)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    #[serde(default)]
    pub mode: FusionMode,
    /// Optional quantile clipping of each phase slice before fusion.
    #[serde(default)]
    pub clip_quantile: Option<f64>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            mode: FusionMode::PerSlice,
            clip_quantile: None,
        }
    }
}

fn volume_slice(vol: &NiftiVolume, z: usize) -> Result<Grid2<f64>, PreprocessError> {
    let d = vol.dims();
    if z >= d.z {
        return Err(PreprocessError::SliceOutOfRange { z, depth: d.z });
    }
    Ok(Grid2::new(d.y, d.x, vol.slice_f64(z)))
}

/// Fuses slice `z` of the pre-contrast, first post-contrast and last phase.
pub fn fuse_study_slice(
    study: &DceStudy,
    z: usize,
    opts: &FusionOptions,
) -> Result<RgbImage, PreprocessError> {
    let last = study.phases.len() - 1;
    let mut planes = Vec::with_capacity(3);
    for k in [0, 1, last] {
        let s = volume_slice(&study.phases[k], z)?;
        planes.push(match opts.clip_quantile {
            Some(q) => quantile_clip(&s, q)?,
            None => s,
        });
    }
    rgb_fuse(&planes[0], &planes[1], &planes[2], opts.mode)
}

/// Candidate mask `(post - pre) > threshold`, evaluated on raw values.
pub fn propose_lesions_by_subtraction(
    pre: &NiftiVolume,
    post: &NiftiVolume,
    threshold: f64,
) -> Result<Vec<bool>, PreprocessError> {
    let (a, b) = (pre.dims(), post.dims());
    if a != b {
        return Err(PreprocessError::ShapeMismatch((a.z, a.y, a.x), (b.z, b.y, b.x)));
    }
    Ok((0..a.len())
        .map(|i| post.voxels().get(i) - pre.voxels().get(i) > threshold)
        .collect())
}

/// Labels 6-connected foreground components 1, 2, ... in scan order.
/// Returns the label volume and the component count.
pub fn label_components(mask: &[bool], dims: Dims3) -> (Vec<u16>, usize) {
    let mut labels = vec![0u16; dims.len()];
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..dims.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        let label = u16::try_from(next).unwrap_or(u16::MAX);
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let z = i / dims.slice_len();
            let y = (i / dims.x) % dims.y;
            let x = i % dims.x;
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < dims.x {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - dims.x);
            }
            if y + 1 < dims.y {
                visit(i + dims.x);
            }
            if z > 0 {
                visit(i - dims.slice_len());
            }
            if z + 1 < dims.z {
                visit(i + dims.slice_len());
            }
        }
    }
    (labels, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub size: usize,
    /// Minimum context kept around the lesion's bounding box.
    pub context_pad: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            size: 256,
            context_pad: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProvenance {
    pub patient_id: String,
    pub lesion_label: u16,
    pub z: usize,
    /// Top-left corner of the source window; negative when zero-padded.
    pub origin: (i64, i64),
    /// Side length of the square source window.
    pub window: usize,
    /// `window / size`; 1.0 when no resize happened.
    pub resize_factor: f64,
}

/// A fused patch with its label map and (when known) malignant-tissue map.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPatch {
    pub image: RgbImage,
    /// `_sus` labels inside the window.
    pub mask: Grid2<u16>,
    /// `_tum` nonzero indicator inside the window.
    pub malignant: Option<Grid2<u8>>,
    pub provenance: PatchProvenance,
}

impl RgbPatch {
    pub fn size(&self) -> usize {
        self.image.height()
    }

    /// Binary map of pixels carrying this patch's lesion label.
    pub fn lesion_region(&self) -> impl Iterator<Item = bool> + '_ {
        let label = self.provenance.lesion_label;
        self.mask.data().iter().map(move |&l| l == label)
    }
}

/// Window start along one axis: centered on `center`, clamped inside the
/// image when it fits, symmetrically zero-padded when it does not.
fn place_window(center: i64, side: usize, extent: usize) -> i64 {
    if extent >= side {
        (center - (side / 2) as i64).clamp(0, (extent - side) as i64)
    } else {
        -(((side - extent) / 2) as i64)
    }
}

/// Extracts a `size x size` patch centered on the lesion's in-slice bounding
/// box. When the box plus `context_pad` on each side exceeds `size`, a
/// larger square window is cut and resized down to `size`.
pub fn extract_patch(
    rgb: &RgbImage,
    labels: &Grid2<u16>,
    malignant: Option<&Grid2<u8>>,
    lesion_label: u16,
    patient_id: &str,
    z: usize,
    opts: &PatchOptions,
) -> Result<RgbPatch, PreprocessError> {
    let (h, w) = labels.shape();
    if h == 0 || w == 0 {
        return Err(PreprocessError::EmptySlice);
    }
    if rgb.shape() != (h, w) {
        return Err(PreprocessError::ShapeMismatch((3, rgb.height(), rgb.width()), (1, h, w)));
    }
    if let Some(m) = malignant {
        if m.shape() != (h, w) {
            return Err(PreprocessError::ShapeMismatch((1, m.height(), m.width()), (1, h, w)));
        }
    }

    let mut bbox: Option<[usize; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            if labels.get(y, x) == lesion_label {
                let b = bbox.get_or_insert([y, y, x, x]);
                b[0] = b[0].min(y);
                b[1] = b[1].max(y);
                b[2] = b[2].min(x);
                b[3] = b[3].max(x);
            }
        }
    }
    let [y_min, y_max, x_min, x_max] = bbox.ok_or(PreprocessError::LabelAbsent(lesion_label))?;

    let needed_h = y_max - y_min + 1 + 2 * opts.context_pad;
    let needed_w = x_max - x_min + 1 + 2 * opts.context_pad;
    let side = opts.size.max(needed_h).max(needed_w);
    let cy = ((y_min + y_max + 1) / 2) as i64;
    let cx = ((x_min + x_max + 1) / 2) as i64;
    let y0 = place_window(cy, side, h);
    let x0 = place_window(cx, side, w);

    let mut image = crop_rgb(rgb, y0, x0, side, side);
    let mut mask = crop(labels, y0, x0, side, side);
    let mut tum = malignant.map(|m| crop(m, y0, x0, side, side));
    if side != opts.size {
        image = resize_bilinear(&image, opts.size, opts.size);
        mask = resize_nearest(&mask, opts.size, opts.size);
        if !mask.data().contains(&lesion_label) {
            stamp_label(&mut mask, &crop(labels, y0, x0, side, side), lesion_label);
        }
        tum = tum.map(|t| resize_nearest(&t, opts.size, opts.size));
    }

    Ok(RgbPatch {
        image,
        mask,
        malignant: tum,
        provenance: PatchProvenance {
            patient_id: patient_id.to_string(),
            lesion_label,
            z,
            origin: (y0, x0),
            window: side,
            resize_factor: side as f64 / opts.size as f64,
        },
    })
}

/// Nearest-neighbor downscaling can skip a thin lesion entirely; forward-map
/// each source pixel of `label` so the lesion keeps at least one pixel.
fn stamp_label(dst: &mut Grid2<u16>, src: &Grid2<u16>, label: u16) {
    let (sh, sw) = src.shape();
    let (dh, dw) = dst.shape();
    for y in 0..sh {
        for x in 0..sw {
            if src.get(y, x) == label {
                dst.set(y * dh / sh, x * dw / sw, label);
            }
        }
    }
}

/// Label and malignant-indicator planes of slice `z`.
pub fn mask_slices(study: &DceStudy, z: usize) -> Result<(Grid2<u16>, Grid2<u8>), PreprocessError> {
    let d = study.dims();
    if z >= d.z {
        return Err(PreprocessError::SliceOutOfRange { z, depth: d.z });
    }
    let n = d.slice_len();
    let labels = Grid2::new(d.y, d.x, study.labels()[z * n..(z + 1) * n].to_vec());
    let tum = Grid2::new(
        d.y,
        d.x,
        study
            .tum_mask
            .slice_f64(z)
            .into_iter()
            .map(|v| u8::from(v != 0.0))
            .collect(),
    );
    Ok((labels, tum))
}

/// One patch per slice the lesion occupies.
pub fn lesion_patches(
    study: &DceStudy,
    lesion: &LesionRecord,
    fusion: &FusionOptions,
    opts: &PatchOptions,
) -> Result<Vec<RgbPatch>, PreprocessError> {
    lesion
        .slices
        .iter()
        .map(|&z| {
            let rgb = fuse_study_slice(study, z, fusion)?;
            let (labels, tum) = mask_slices(study, z)?;
            extract_patch(&rgb, &labels, Some(&tum), lesion.label, &study.patient_id, z, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Grid2<f64> {
        Grid2::new(1, v.len(), v.to_vec())
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&row(&[0.0, 5.0, 10.0])).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&row(&[7.0, 7.0, 7.0])).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&row(&[-2.0, 0.0, 2.0])).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(
            minmax_normalize(&row(&[1.0, f64::NAN])),
            Err(PreprocessError::NonFiniteInput)
        );
    }

    #[test]
    fn quantile_clip_cases() {
        let ramp = row(&(1..=100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(quantile_clip(&ramp, 0.0).unwrap(), ramp);
        let flat = row(&[3.0; 9]);
        assert_eq!(quantile_clip(&flat, 0.2).unwrap(), flat);
        assert_eq!(quantile_clip(&ramp, 0.5), Err(PreprocessError::BadQuantile(0.5)));
        assert_eq!(quantile_clip(&ramp, -0.1), Err(PreprocessError::BadQuantile(-0.1)));
    }

    #[test]
    fn fusion_modes() {
        let pre = row(&[0.0, 1.0]);
        let early = row(&[0.0, 2.0]);
        let late = row(&[0.0, 4.0]);
        let per = rgb_fuse(&pre, &early, &late, FusionMode::PerSlice).unwrap();
        for c in 0..3 {
            assert_eq!(per.channel(c), &[0.0, 1.0]);
        }
        let global = rgb_fuse(&pre, &early, &late, FusionMode::PostFusionGlobal).unwrap();
        assert_eq!(global.channel(0), &[0.0, 0.25]);
        assert_eq!(global.channel(1), &[0.0, 0.5]);
        assert_eq!(global.channel(2), &[0.0, 1.0]);

        let zeros = row(&[0.0; 4]);
        let ones = row(&[1.0; 4]);
        let c = rgb_fuse(&zeros, &ones, &zeros, FusionMode::PerSlice).unwrap();
        assert!(c.planar().iter().all(|&v| v == 0.0));
        assert!(rgb_fuse(&zeros, &row(&[1.0]), &zeros, FusionMode::PerSlice).is_err());
    }

    #[test]
    fn components_are_six_connected() {
        let dims = Dims3::new(2, 2, 3);
        #[rustfmt::skip]
        let mask = [
            true, false, true,
            false, false, true,
            true, false, false,
            false, false, false,
        ];
        let (labels, n) = label_components(&mask, dims);
        assert_eq!(n, 2);
        assert_eq!(labels, vec![1, 0, 2, 0, 0, 2, 1, 0, 0, 0, 0, 0]);
    }

    fn blank_slice(h: usize, w: usize) -> (RgbImage, Grid2<u16>) {
        (RgbImage::zeros(h, w), Grid2::filled(h, w, 0u16))
    }

    #[test]
    fn small_image_is_padded_symmetrically() {
        let (rgb, mut labels) = blank_slice(100, 60);
        labels.set(50, 30, 4);
        let p = extract_patch(&rgb, &labels, None, 4, "p", 0, &PatchOptions::default()).unwrap();
        assert_eq!(p.provenance.origin, (-78, -98));
        assert_eq!(p.mask.get(128, 128), 4);
        assert_eq!(p.mask.data().iter().filter(|&&l| l == 4).count(), 1);
    }

    #[test]
    fn missing_label_and_empty_slice() {
        let (rgb, labels) = blank_slice(10, 10);
        let opts = PatchOptions::default();
        assert_eq!(
            extract_patch(&rgb, &labels, None, 1, "p", 0, &opts),
            Err(PreprocessError::LabelAbsent(1))
        );
        let (rgb, labels) = blank_slice(0, 0);
        assert_eq!(
            extract_patch(&rgb, &labels, None, 1, "p", 0, &opts),
            Err(PreprocessError::EmptySlice)
        );
    }
}
