//! Minimal DICOM reader for uncompressed little-endian slice files, and
//! assembly of slices into ordered DCE phase volumes.
//!
//! Only the handful of attributes the pipeline consumes are decoded; every
//! other element is skipped by its length (undefined-length sequences are
//! walked item by item).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::grid::Dims3;

const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// A `(group, element)` attribute tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const ACQUISITION_TIME: Tag = Tag(0x0008, 0x0032);
    pub const SERIES_DESCRIPTION: Tag = Tag(0x0008, 0x103E);
    pub const SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
    pub const SLICE_LOCATION: Tag = Tag(0x0020, 0x1041);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    pub(super) const ITEM: Tag = Tag(0xFFFE, 0xE000);
    pub(super) const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
    pub(super) const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DicomError {
    #[error("no DICM magic at offset 128 and no recognizable bare dataset")]
    MissingMagic,
    #[error("element {tag} truncated at offset {offset}: needs {needed} bytes, {available} available")]
    TruncatedElement {
        tag: Tag,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unsupported transfer syntax: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing required tag {0}")]
    MissingRequiredTag(&'static str),
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
    #[error("malformed value in {tag}: {value:?}")]
    MalformedValue { tag: Tag, value: String },
    #[error("malformed sequence encoding at offset {0}")]
    MalformedSequence(usize),
    #[error("no slices to assemble")]
    EmptyInput,
    #[error("slices disagree on geometry: {expected:?} vs {found:?}")]
    InconsistentGeometry {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("slices belong to different series: {0} and {1}")]
    MixedSeries(String, String),
    #[error("two slices share position {0}")]
    DuplicateSlicePosition(f64),
    #[error("slices carry neither SliceLocation nor InstanceNumber for every record")]
    MissingSliceOrder,
    #[error("expected 5 phases, got {0}")]
    PhaseCountMismatch(usize),
    #[error("phase volumes disagree on dims: {0:?} vs {1:?}")]
    PhaseDimsMismatch(Dims3, Dims3),
    #[error("cannot determine phase order: {0}")]
    AmbiguousOrdering(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRepresentation {
    Unsigned,
    Signed,
}

/// One decoded slice. `pixels` already carries `slope * stored + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSliceRecord {
    pub series_uid: String,
    pub series_description: String,
    pub acquisition_time: Option<String>,
    pub instance_number: Option<i64>,
    pub slice_location: Option<f64>,
    pub image_position: Option<[f64; 3]>,
    pub pixel_spacing: Option<[f64; 2]>,
    pub rows: usize,
    pub cols: usize,
    pub bits_allocated: u16,
    pub pixel_representation: PixelRepresentation,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub pixels: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Encoding {
    ExplicitLe,
    ImplicitLe,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    fn take(&mut self, n: usize, tag: Tag) -> Result<&'a [u8], DicomError> {
        if self.remaining() < n {
            return Err(DicomError::TruncatedElement {
                tag,
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, tag: Tag) -> Result<u16, DicomError> {
        let b = self.take(2, tag)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, tag: Tag) -> Result<u32, DicomError> {
        let b = self.take(4, tag)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        let unknown = Tag(0xFFFF, 0xFFFF);
        let group = self.u16(unknown)?;
        let element = self.u16(unknown)?;
        Ok(Tag(group, element))
    }
}

fn is_long_vr(vr: &[u8]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR"
            | b"UT" | b"UV"
    )
}

fn is_known_vr(vr: &[u8]) -> bool {
    is_long_vr(vr)
        || matches!(
            vr,
            b"AE" | b"AS" | b"AT" | b"CS" | b"DA" | b"DS" | b"DT" | b"FL" | b"FD" | b"IS" | b"LO"
                | b"LT" | b"PN" | b"SH" | b"SL" | b"SS" | b"ST" | b"TM" | b"UI" | b"UL" | b"US"
        )
}

/// Reads one element header, returning `(tag, value length)`.
fn read_header(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(Tag, u32), DicomError> {
    let tag = cur.tag()?;
    if tag.0 == 0xFFFE || enc == Encoding::ImplicitLe {
        return Ok((tag, cur.u32(tag)?));
    }
    let vr = cur.take(2, tag)?;
    if is_long_vr(vr) {
        cur.take(2, tag)?;
        Ok((tag, cur.u32(tag)?))
    } else {
        Ok((tag, u32::from(cur.u16(tag)?)))
    }
}

fn skip_sequence(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(), DicomError> {
    loop {
        let at = cur.pos;
        let tag = cur.tag()?;
        let len = cur.u32(tag)?;
        match tag {
            tags::SEQUENCE_DELIMITER => return Ok(()),
            tags::ITEM if len == UNDEFINED_LENGTH => skip_item_dataset(cur, enc)?,
            tags::ITEM => {
                cur.take(len as usize, tag)?;
            }
            _ => return Err(DicomError::MalformedSequence(at)),
        }
    }
}

fn skip_item_dataset(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(), DicomError> {
    loop {
        let (tag, len) = read_header(cur, enc)?;
        if tag == tags::ITEM_DELIMITER {
            return Ok(());
        }
        if len == UNDEFINED_LENGTH {
            skip_sequence(cur, enc)?;
        } else {
            cur.take(len as usize, tag)?;
        }
    }
}

/// Collects top-level element values until the buffer ends, PixelData is
/// read, or (when `meta_only`) the group leaves 0x0002.
fn read_elements<'a>(
    cur: &mut Cursor<'a>,
    enc: Encoding,
    meta_only: bool,
    out: &mut BTreeMap<Tag, &'a [u8]>,
) -> Result<(), DicomError> {
    while cur.remaining() > 0 {
        if meta_only {
            if cur.remaining() < 2 {
                break;
            }
            let group = u16::from_le_bytes([cur.buf[cur.pos], cur.buf[cur.pos + 1]]);
            if group != 0x0002 {
                break;
            }
        }
        let (tag, len) = read_header(cur, enc)?;
        if len == UNDEFINED_LENGTH {
            if tag == tags::PIXEL_DATA {
                return Err(DicomError::UnsupportedTransferSyntax(
                    "encapsulated pixel data".into(),
                ));
            }
            skip_sequence(cur, enc)?;
            continue;
        }
        let value = cur.take(len as usize, tag)?;
        out.insert(tag, value);
        if tag == tags::PIXEL_DATA {
            break;
        }
    }
    Ok(())
}

/// Guesses whether `buf` starts directly with a dataset (no preamble).
fn sniff_bare(buf: &[u8]) -> Option<Encoding> {
    if buf.len() < 8 {
        return None;
    }
    let group = u16::from_le_bytes([buf[0], buf[1]]);
    if group < 0x0002 || group > 0x7FE0 || group % 2 != 0 {
        return None;
    }
    if is_known_vr(&buf[4..6]) {
        Some(Encoding::ExplicitLe)
    } else {
        let len = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]);
        (len != UNDEFINED_LENGTH && (len as usize) <= buf.len() - 8).then_some(Encoding::ImplicitLe)
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_end_matches(['\0', ' '])
        .trim_start()
        .to_string()
}

fn parse_numbers(tag: Tag, value: &[u8]) -> Result<Vec<f64>, DicomError> {
    let s = text(value);
    s.split('\\')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| DicomError::MalformedValue {
                    tag,
                    value: s.clone(),
                })
        })
        .collect()
}

fn us_value(tag: Tag, value: &[u8]) -> Result<u16, DicomError> {
    if value.len() < 2 {
        return Err(DicomError::MalformedValue {
            tag,
            value: format!("{value:02X?}"),
        });
    }
    Ok(u16::from_le_bytes([value[0], value[1]]))
}

/// Parses a Part-10 file or a bare little-endian dataset.
pub fn parse_dicom_file(bytes: &[u8]) -> Result<DicomSliceRecord, DicomError> {
    let mut elements = BTreeMap::new();
    let mut cur = Cursor { buf: bytes, pos: 0 };

    let enc = if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        cur.pos = 132;
        read_elements(&mut cur, Encoding::ExplicitLe, true, &mut elements)?;
        match elements.get(&tags::TRANSFER_SYNTAX_UID).map(|v| text(v)) {
            Some(ts) if ts == EXPLICIT_VR_LE => Encoding::ExplicitLe,
            Some(ts) if ts == IMPLICIT_VR_LE => Encoding::ImplicitLe,
            Some(ts) => return Err(DicomError::UnsupportedTransferSyntax(ts)),
            None => Encoding::ImplicitLe,
        }
    } else {
        let enc = sniff_bare(bytes).ok_or(DicomError::MissingMagic)?;
        // A bare file may still open with group 0002 meta elements.
        if u16::from_le_bytes([bytes[0], bytes[1]]) == 0x0002 {
            read_elements(&mut cur, Encoding::ExplicitLe, true, &mut elements)?;
            match elements.get(&tags::TRANSFER_SYNTAX_UID).map(|v| text(v)) {
                Some(ts) if ts == EXPLICIT_VR_LE => Encoding::ExplicitLe,
                Some(ts) if ts == IMPLICIT_VR_LE => Encoding::ImplicitLe,
                Some(ts) => return Err(DicomError::UnsupportedTransferSyntax(ts)),
                None => enc,
            }
        } else {
            enc
        }
    };
    read_elements(&mut cur, enc, false, &mut elements)?;
    build_record(&elements)
}

fn build_record(el: &BTreeMap<Tag, &[u8]>) -> Result<DicomSliceRecord, DicomError> {
    let rows = el
        .get(&tags::ROWS)
        .ok_or(DicomError::MissingRequiredTag("Rows"))
        .and_then(|v| us_value(tags::ROWS, v))? as usize;
    let cols = el
        .get(&tags::COLUMNS)
        .ok_or(DicomError::MissingRequiredTag("Columns"))
        .and_then(|v| us_value(tags::COLUMNS, v))? as usize;
    let data = *el
        .get(&tags::PIXEL_DATA)
        .ok_or(DicomError::MissingRequiredTag("PixelData"))?;

    let n = rows * cols;
    let bits_allocated = match el.get(&tags::BITS_ALLOCATED) {
        Some(v) => us_value(tags::BITS_ALLOCATED, v)?,
        // Inferred from the payload size when the attribute is absent.
        None if n > 0 && data.len() >= 2 * n => 16,
        None => 8,
    };
    let pixel_representation = match el.get(&tags::PIXEL_REPRESENTATION) {
        Some(v) if us_value(tags::PIXEL_REPRESENTATION, v)? == 1 => PixelRepresentation::Signed,
        _ => PixelRepresentation::Unsigned,
    };
    let single = |tag: Tag, default: f64| -> Result<f64, DicomError> {
        match el.get(&tag) {
            Some(v) if !text(v).is_empty() => Ok(parse_numbers(tag, v)?[0]),
            _ => Ok(default),
        }
    };
    let rescale_slope = single(tags::RESCALE_SLOPE, 1.0)?;
    let rescale_intercept = single(tags::RESCALE_INTERCEPT, 0.0)?;

    let bytes_per = match bits_allocated {
        8 => 1,
        16 => 2,
        other => {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "BitsAllocated={other}"
            )))
        }
    };
    if data.len() < n * bytes_per {
        return Err(DicomError::TruncatedElement {
            tag: tags::PIXEL_DATA,
            offset: 0,
            needed: n * bytes_per,
            available: data.len(),
        });
    }
    let stored = |i: usize| -> f64 {
        match (bytes_per, pixel_representation) {
            (1, PixelRepresentation::Unsigned) => f64::from(data[i]),
            (1, PixelRepresentation::Signed) => f64::from(data[i] as i8),
            (_, PixelRepresentation::Unsigned) => {
                f64::from(u16::from_le_bytes([data[2 * i], data[2 * i + 1]]))
            }
            (_, PixelRepresentation::Signed) => {
                f64::from(i16::from_le_bytes([data[2 * i], data[2 * i + 1]]))
            }
        }
    };
    let pixels = (0..n)
        .map(|i| rescale_slope * stored(i) + rescale_intercept)
        .collect();

    let opt_text = |tag: Tag| el.get(&tag).map(|v| text(v)).filter(|s| !s.is_empty());
    let instance_number = match opt_text(tags::INSTANCE_NUMBER) {
        Some(s) => Some(s.parse::<i64>().map_err(|_| DicomError::MalformedValue {
            tag: tags::INSTANCE_NUMBER,
            value: s,
        })?),
        None => None,
    };
    let slice_location = match el.get(&tags::SLICE_LOCATION) {
        Some(v) if !text(v).is_empty() => Some(parse_numbers(tags::SLICE_LOCATION, v)?[0]),
        _ => None,
    };
    let image_position = match el.get(&tags::IMAGE_POSITION_PATIENT) {
        Some(v) if !text(v).is_empty() => {
            let p = parse_numbers(tags::IMAGE_POSITION_PATIENT, v)?;
            if p.len() != 3 {
                return Err(DicomError::MalformedValue {
                    tag: tags::IMAGE_POSITION_PATIENT,
                    value: text(v),
                });
            }
            Some([p[0], p[1], p[2]])
        }
        _ => None,
    };
    let pixel_spacing = match el.get(&tags::PIXEL_SPACING) {
        Some(v) if !text(v).is_empty() => {
            let p = parse_numbers(tags::PIXEL_SPACING, v)?;
            (p.len() == 2).then(|| [p[0], p[1]])
        }
        _ => None,
    };

    Ok(DicomSliceRecord {
        series_uid: opt_text(tags::SERIES_INSTANCE_UID).unwrap_or_default(),
        series_description: opt_text(tags::SERIES_DESCRIPTION).unwrap_or_default(),
        acquisition_time: opt_text(tags::ACQUISITION_TIME),
        instance_number,
        slice_location,
        image_position,
        pixel_spacing,
        rows,
        cols,
        bits_allocated,
        pixel_representation,
        rescale_slope,
        rescale_intercept,
        pixels,
    })
}

/// One DCE acquisition assembled into a dense `(z, y, x)` volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVolume {
    /// Position in the DCE sequence, 0 = pre-contrast. Zero until
    /// [`order_phases`] assigns it.
    pub phase_index: usize,
    pub dims: Dims3,
    pub voxels: Vec<f64>,
    /// `(dz, dy, dx)` in millimeters; 1.0 where the source is silent.
    pub spacing: [f64; 3],
    pub series_uid: String,
    pub series_description: String,
    /// Earliest AcquisitionTime across the slices, seconds since midnight.
    pub acquisition_seconds: Option<f64>,
}

/// Parses a DICOM TM value (`HHMMSS.FFFFFF`, partial forms, or the legacy
/// colon-separated form) into seconds since midnight.
pub fn parse_dicom_time(tm: &str) -> Option<f64> {
    let s: String = tm.trim().chars().filter(|c| *c != ':').collect();
    let (whole, frac) = match s.split_once('.') {
        Some((w, f)) => (w, f),
        None => (s.as_str(), ""),
    };
    if whole.is_empty() || whole.len() % 2 != 0 || whole.len() > 6 {
        return None;
    }
    if !whole.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let mut parts = [0u32; 3];
    for (i, chunk) in whole.as_bytes().chunks(2).enumerate() {
        parts[i] = std::str::from_utf8(chunk).ok()?.parse().ok()?;
    }
    let frac: f64 = if frac.is_empty() {
        0.0
    } else {
        format!("0.{frac}").parse().ok()?
    };
    Some(f64::from(parts[0] * 3600 + parts[1] * 60 + parts[2]) + frac)
}

/// Stacks the slices of one series into a volume ordered by SliceLocation,
/// falling back to InstanceNumber when any record lacks a location.
pub fn assemble_phase(records: Vec<DicomSliceRecord>) -> Result<PhaseVolume, DicomError> {
    let first = records.first().ok_or(DicomError::EmptyInput)?;
    let (rows, cols) = (first.rows, first.cols);
    let series_uid = first.series_uid.clone();
    for r in &records {
        if (r.rows, r.cols) != (rows, cols) {
            return Err(DicomError::InconsistentGeometry {
                expected: (rows, cols),
                found: (r.rows, r.cols),
            });
        }
        if r.series_uid != series_uid {
            return Err(DicomError::MixedSeries(series_uid, r.series_uid.clone()));
        }
    }

    let keys: Vec<f64> = if records.iter().all(|r| r.slice_location.is_some()) {
        records.iter().map(|r| r.slice_location.unwrap()).collect()
    } else if records.iter().all(|r| r.instance_number.is_some()) {
        records
            .iter()
            .map(|r| r.instance_number.unwrap() as f64)
            .collect()
    } else {
        return Err(DicomError::MissingSliceOrder);
    };
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    for w in order.windows(2) {
        if keys[w[0]] == keys[w[1]] {
            return Err(DicomError::DuplicateSlicePosition(keys[w[0]]));
        }
    }

    let dz = if records.iter().all(|r| r.slice_location.is_some()) && order.len() > 1 {
        (keys[order[1]] - keys[order[0]]).abs()
    } else {
        1.0
    };
    let [dy, dx] = first.pixel_spacing.unwrap_or([1.0, 1.0]);
    let acquisition_seconds = records
        .iter()
        .filter_map(|r| r.acquisition_time.as_deref().and_then(parse_dicom_time))
        .min_by(f64::total_cmp);
    let series_description = first.series_description.clone();

    let dims = Dims3::new(records.len(), rows, cols);
    let mut slots: Vec<Option<DicomSliceRecord>> = records.into_iter().map(Some).collect();
    let mut voxels = Vec::with_capacity(dims.len());
    for i in order {
        let r = slots[i].take().expect("each slot visited once");
        voxels.extend(r.pixels);
    }
    Ok(PhaseVolume {
        phase_index: 0,
        dims,
        voxels,
        spacing: [dz, dy, dx],
        series_uid,
        series_description,
        acquisition_seconds,
    })
}

/// How [`order_phases`] may establish acquisition order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseOrdering {
    /// Try to read phase positions out of SeriesDescription when
    /// acquisition times are unusable.
    pub parse_descriptions: bool,
    /// `explicit[k]` is the input index of phase `k`; used last.
    pub explicit: Option<Vec<usize>>,
}

/// Ordering key from a series description: "pre" sorts first, otherwise the
/// first integer in the text.
fn description_key(desc: &str) -> Option<i64> {
    let lower = desc.to_ascii_lowercase();
    if lower.contains("pre") && !lower.contains("post") {
        return Some(-1);
    }
    let digits: String = lower
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn distinct_order<K: PartialOrd + Copy>(keys: &[K]) -> Option<Vec<usize>> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal));
    idx.windows(2)
        .all(|w| keys[w[0]] < keys[w[1]])
        .then_some(idx)
}

/// Orders five phase volumes into acquisition order.
///
/// Precedence: AcquisitionTime on every phase and all distinct, then the
/// description heuristic (if enabled), then the caller's explicit order.
pub fn order_phases(
    phases: Vec<PhaseVolume>,
    ordering: &PhaseOrdering,
) -> Result<Vec<PhaseVolume>, DicomError> {
    if phases.len() != 5 {
        return Err(DicomError::PhaseCountMismatch(phases.len()));
    }
    let dims = phases[0].dims;
    if let Some(p) = phases.iter().find(|p| p.dims != dims) {
        return Err(DicomError::PhaseDimsMismatch(dims, p.dims));
    }

    let by_time = phases
        .iter()
        .map(|p| p.acquisition_seconds)
        .collect::<Option<Vec<f64>>>()
        .and_then(|t| distinct_order(&t));
    let by_description = || {
        if !ordering.parse_descriptions {
            return None;
        }
        phases
            .iter()
            .map(|p| description_key(&p.series_description))
            .collect::<Option<Vec<i64>>>()
            .and_then(|k| distinct_order(&k))
    };
    let by_explicit = || {
        let e = ordering.explicit.as_ref()?;
        let mut seen = [false; 5];
        for &i in e {
            if i >= 5 || std::mem::replace(&mut seen[i], true) {
                return None;
            }
        }
        (e.len() == 5).then(|| e.clone())
    };

    let order = by_time
        .or_else(by_description)
        .or_else(by_explicit)
        .ok_or_else(|| {
            DicomError::AmbiguousOrdering(
                "no distinct acquisition times, unparseable descriptions, and no valid explicit order"
                    .into(),
            )
        })?;

    let mut slots: Vec<Option<PhaseVolume>> = phases.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let mut p = slots[i].take().expect("order is a permutation");
            p.phase_index = k;
            p
        })
        .collect())
}
