//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.
//!
//! Stored values surface exactly as written: `scl_slope`/`scl_inter` are
//! kept on the volume but never applied. sform/qform fields are carried
//! through verbatim without interpretation.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Dims3;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a single-file NIfTI-1 stream (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("voxel count does not match dims: {0}")]
    DimMismatch(String),
    #[error("truncated data: need {needed} bytes, have {available}")]
    TruncatedData { needed: usize, available: usize },
    #[error("value {value} is not representable as {datatype:?}")]
    ValueOutOfRange { value: f64, datatype: Datatype },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Uint16,
    Float32,
}

impl Datatype {
    pub const fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Uint16 => 512,
        }
    }

    pub const fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            512 => Some(Datatype::Uint16),
            _ => None,
        }
    }

    pub const fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Float32 => 4,
        }
    }

    /// Whether `v` survives conversion to this type without change.
    pub fn represents(self, v: f64) -> bool {
        let int_in = |lo: f64, hi: f64| v.fract() == 0.0 && v >= lo && v <= hi;
        match self {
            Datatype::Uint8 => int_in(0.0, 255.0),
            Datatype::Int16 => int_in(-32768.0, 32767.0),
            Datatype::Uint16 => int_in(0.0, 65535.0),
            Datatype::Float32 => v.is_nan() || f64::from(v as f32) == v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Uint8(Vec<u8>),
    Int16(Vec<i16>),
    Uint16(Vec<u16>),
    Float32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Uint8(v) => v.len(),
            VoxelData::Int16(v) => v.len(),
            VoxelData::Uint16(v) => v.len(),
            VoxelData::Float32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::Uint8(_) => Datatype::Uint8,
            VoxelData::Int16(_) => Datatype::Int16,
            VoxelData::Uint16(_) => Datatype::Uint16,
            VoxelData::Float32(_) => Datatype::Float32,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VoxelData::Uint8(v) => f64::from(v[i]),
            VoxelData::Int16(v) => f64::from(v[i]),
            VoxelData::Uint16(v) => f64::from(v[i]),
            VoxelData::Float32(v) => f64::from(v[i]),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Converts `values` to `datatype`, rejecting anything that would change.
    pub fn from_f64(values: &[f64], datatype: Datatype) -> Result<Self, NiftiError> {
        if let Some(&value) = values.iter().find(|&&v| !datatype.represents(v)) {
            return Err(NiftiError::ValueOutOfRange { value, datatype });
        }
        Ok(match datatype {
            Datatype::Uint8 => VoxelData::Uint8(values.iter().map(|&v| v as u8).collect()),
            Datatype::Int16 => VoxelData::Int16(values.iter().map(|&v| v as i16).collect()),
            Datatype::Uint16 => VoxelData::Uint16(values.iter().map(|&v| v as u16).collect()),
            Datatype::Float32 => VoxelData::Float32(values.iter().map(|&v| v as f32).collect()),
        })
    }
}

/// Orientation-related header fields, preserved byte-for-byte in meaning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialHeader {
    pub qfac: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub xyzt_units: u8,
}

impl Default for SpatialHeader {
    fn default() -> Self {
        Self {
            qfac: 1.0,
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
            xyzt_units: 2, // millimeters
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    dims: Dims3,
    voxels: VoxelData,
    /// `(dz, dy, dx)` in millimeters.
    pub spacing: [f32; 3],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub spatial: SpatialHeader,
}

impl NiftiVolume {
    pub fn new(dims: Dims3, voxels: VoxelData) -> Result<Self, NiftiError> {
        if dims.len() != voxels.len() {
            return Err(NiftiError::DimMismatch(format!(
                "dims {dims:?} hold {} voxels, data has {}",
                dims.len(),
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            voxels,
            spacing: [1.0; 3],
            scl_slope: 1.0,
            scl_inter: 0.0,
            spatial: SpatialHeader::default(),
        })
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn datatype(&self) -> Datatype {
        self.voxels.datatype()
    }

    pub fn voxels(&self) -> &VoxelData {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels.get(self.dims.index(z, y, x))
    }

    /// Values of slice `z`, row-major.
    pub fn slice_f64(&self, z: usize) -> Vec<f64> {
        let n = self.dims.slice_len();
        (z * n..(z + 1) * n).map(|i| self.voxels.get(i)).collect()
    }

    /// Re-encodes the voxels as `datatype`; fails if any value would change.
    pub fn convert(&self, datatype: Datatype) -> Result<Self, NiftiError> {
        if datatype == self.datatype() {
            return Ok(self.clone());
        }
        let voxels = VoxelData::from_f64(&self.voxels.to_f64(), datatype)?;
        Ok(Self {
            voxels,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    b: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let a = [self.b[at], self.b[at + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(a),
            Endian::Big => i16::from_be_bytes(a),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let a = [self.b[at], self.b[at + 1], self.b[at + 2], self.b[at + 3]];
        match self.endian {
            Endian::Little => f32::from_le_bytes(a),
            Endian::Big => f32::from_be_bytes(a),
        }
    }

    fn f32s<const N: usize>(&self, at: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(at + 4 * i))
    }
}

/// Decodes a NIfTI-1 stream, optionally gzip-wrapped.
pub fn read_nifti(bytes: &[u8], gzipped: bool) -> Result<NiftiVolume, NiftiError> {
    if gzipped {
        let mut raw = Vec::new();
        MultiGzDecoder::new(bytes).read_to_end(&mut raw)?;
        return read_nifti(&raw, false);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedData {
            needed: HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    let endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")),
        i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        _ => return Err(NiftiError::BadMagic(magic)),
    };
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic));
    }
    let h = HeaderReader { b: bytes, endian };

    let dim: [i16; 8] = std::array::from_fn(|i| h.i16(40 + 2 * i));
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(NiftiError::DimMismatch(format!("dim[0] = {rank}")));
    }
    let extent = |i: usize| -> Result<usize, NiftiError> {
        if i as i16 > rank {
            return Ok(1);
        }
        if dim[i] < 1 {
            return Err(NiftiError::DimMismatch(format!("dim[{i}] = {}", dim[i])));
        }
        Ok(dim[i] as usize)
    };
    for i in 4..=rank as usize {
        if extent(i)? != 1 {
            return Err(NiftiError::DimMismatch(format!(
                "only 3D volumes are supported, dim[{i}] = {}",
                dim[i]
            )));
        }
    }
    let dims = Dims3::new(extent(3)?, extent(2)?, extent(1)?);

    let code = h.i16(70);
    let datatype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let pixdim: [f32; 8] = h.f32s(76);
    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::DimMismatch(format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let needed = dims.len() * datatype.size();
    let available = bytes.len().saturating_sub(start);
    if available < needed {
        return Err(NiftiError::TruncatedData { needed, available });
    }
    let data = &bytes[start..start + needed];

    macro_rules! decode {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| {
                    let a: [u8; $n] = c.try_into().expect("exact chunk");
                    match endian {
                        Endian::Little => <$t>::from_le_bytes(a),
                        Endian::Big => <$t>::from_be_bytes(a),
                    }
                })
                .collect()
        };
    }
    let voxels = match datatype {
        Datatype::Uint8 => VoxelData::Uint8(data.to_vec()),
        Datatype::Int16 => VoxelData::Int16(decode!(i16, 2)),
        Datatype::Uint16 => VoxelData::Uint16(decode!(u16, 2)),
        Datatype::Float32 => VoxelData::Float32(decode!(f32, 4)),
    };

    let mut vol = NiftiVolume::new(dims, voxels)?;
    vol.spacing = [pixdim[3], pixdim[2], pixdim[1]];
    vol.scl_slope = h.f32(112);
    vol.scl_inter = h.f32(116);
    vol.spatial = SpatialHeader {
        qfac: pixdim[0],
        qform_code: h.i16(252),
        sform_code: h.i16(254),
        quatern: h.f32s(256),
        qoffset: h.f32s(268),
        srow_x: h.f32s(280),
        srow_y: h.f32s(296),
        srow_z: h.f32s(312),
        xyzt_units: bytes[123],
    };
    Ok(vol)
}

fn encode_header(vol: &NiftiVolume) -> Result<Vec<u8>, NiftiError> {
    let d = vol.dims();
    if d.is_empty() {
        return Err(NiftiError::DimMismatch(format!("empty dims {d:?}")));
    }
    let extent = |n: usize| -> Result<i16, NiftiError> {
        i16::try_from(n).map_err(|_| NiftiError::DimMismatch(format!("extent {n} exceeds i16")))
    };
    let mut h = vec![0u8; VOX_OFFSET];
    let mut put = |at: usize, bytes: &[u8]| h[at..at + bytes.len()].copy_from_slice(bytes);

    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3, extent(d.x)?, extent(d.y)?, extent(d.z)?, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        put(40 + 2 * i, &v.to_le_bytes());
    }
    put(70, &vol.datatype().code().to_le_bytes());
    put(72, &((vol.datatype().size() * 8) as i16).to_le_bytes());
    let [dz, dy, dx] = vol.spacing;
    let pixdim = [vol.spatial.qfac, dx, dy, dz, 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &v.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &vol.scl_slope.to_le_bytes());
    put(116, &vol.scl_inter.to_le_bytes());
    put(123, &[vol.spatial.xyzt_units]);
    put(252, &vol.spatial.qform_code.to_le_bytes());
    put(254, &vol.spatial.sform_code.to_le_bytes());
    let floats = |v: &[f32]| v.iter().flat_map(|f| f.to_le_bytes()).collect::<Vec<u8>>();
    put(256, &floats(&vol.spatial.quatern));
    put(268, &floats(&vol.spatial.qoffset));
    put(280, &floats(&vol.spatial.srow_x));
    put(296, &floats(&vol.spatial.srow_y));
    put(312, &floats(&vol.spatial.srow_z));
    put(344, MAGIC_SINGLE);
    // bytes 348..352: empty extension flag
    Ok(h)
}

/// Encodes `vol` little-endian with `vox_offset = 352`.
pub fn write_nifti(vol: &NiftiVolume, gzip: bool) -> Result<Vec<u8>, NiftiError> {
    let mut out = encode_header(vol)?;
    out.reserve(vol.dims().len() * vol.datatype().size());
    match vol.voxels() {
        VoxelData::Uint8(v) => out.extend_from_slice(v),
        VoxelData::Int16(v) => out.extend(v.iter().flat_map(|x| x.to_le_bytes())),
        VoxelData::Uint16(v) => out.extend(v.iter().flat_map(|x| x.to_le_bytes())),
        VoxelData::Float32(v) => out.extend(v.iter().flat_map(|x| x.to_le_bytes())),
    }
    if !gzip {
        return Ok(out);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&out)?;
    Ok(enc.finish()?)
}

/// Converts to `datatype` first, then encodes.
pub fn write_nifti_as(
    vol: &NiftiVolume,
    datatype: Datatype,
    gzip: bool,
) -> Result<Vec<u8>, NiftiError> {
    write_nifti(&vol.convert(datatype)?, gzip)
}

/// Reads a `.nii` or `.nii.gz` file, detecting gzip from the stream itself.
pub fn read_nifti_file(path: impl AsRef<Path>) -> Result<NiftiVolume, NiftiError> {
    let bytes = std::fs::read(path)?;
    let gz = bytes.starts_with(&[0x1F, 0x8B]);
    read_nifti(&bytes, gz)
}

/// Writes `vol`, gzip-compressed when the path ends in `.gz`.
pub fn write_nifti_file(path: impl AsRef<Path>, vol: &NiftiVolume) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let gz = path.extension().is_some_and(|e| e == "gz");
    std::fs::write(path, write_nifti(vol, gz)?)?;
    Ok(())
}
