//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Reads `uint8`, `int16` and `float32` payloads in either byte order and
//! applies `scl_slope`/`scl_inter`. Writes little-endian `float32` for
//! intensities and `uint8` for masks, with `vox_offset` 352.

use super::{Mask, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::io::{Read, Write};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;

/// Byte offsets of the header fields this codec touches.
pub mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

/// Supported datatype codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    UInt8,
    Int16,
    Float32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::UInt8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::UInt8),
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            other => Err(Error::UnsupportedDataType(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::UInt8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))
}

/// Decodes an in-memory single-file NIfTI-1 image.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Volume<T>> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("{} bytes is shorter than the 348-byte header", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        decode_with::<T, LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        decode_with::<T, BigEndian>(bytes)
    } else {
        Err(Error::Format("sizeof_hdr is not 348".into()))
    }
}

fn decode_with<T: Scalar, E: ByteOrder>(bytes: &[u8]) -> Result<Volume<T>> {
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!("magic {magic:?} is not a single-file NIfTI-1 image")));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&bytes[offsets::DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let extent = |i: usize| -> Result<usize> {
        if i as i16 > ndim {
            return Ok(1);
        }
        match dim[i] {
            d if d >= 1 => Ok(d as usize),
            d => Err(Error::Format(format!("dim[{i}] = {d}"))),
        }
    };
    let (nx, ny, nz) = (extent(1)?, extent(2)?, extent(3)?);
    for i in 4..=7 {
        if extent(i)? != 1 {
            return Err(Error::Format("only 3D images are supported".into()));
        }
    }
    let datatype = DataType::from_code(E::read_i16(&bytes[offsets::DATATYPE..]))?;
    let bitpix = E::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::Format(format!("bitpix {bitpix} does not match datatype {datatype:?}")));
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&bytes[offsets::PIXDIM + 4 * i..]);
    }
    let spacing = [pixdim[3] as f64, pixdim[2] as f64, pixdim[1] as f64].map(|s| if s > 0.0 { s } else { 1.0 });
    let vox_offset = E::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside header")));
    }
    let start = vox_offset as usize;
    let n = nx * ny * nz;
    let end = start + n * datatype.bytes();
    if bytes.len() < end {
        return Err(Error::Format(format!("payload truncated: need {end} bytes, have {}", bytes.len())));
    }
    let payload = &bytes[start..end];
    let raw: Vec<f64> = match datatype {
        DataType::UInt8 => payload.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => payload.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        DataType::Float32 => payload.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
    };
    let slope = E::read_f32(&bytes[offsets::SCL_SLOPE..]) as f64;
    let inter = E::read_f32(&bytes[offsets::SCL_INTER..]) as f64;
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = raw
        .into_iter()
        .map(|v| {
            let v = if scaled { slope * v + inter } else { v };
            if v.is_finite() {
                Ok(T::lit(v))
            } else {
                Err(Error::Format("non-finite intensity".into()))
            }
        })
        .collect::<Result<Vec<T>>>()?;
    Volume::from_vec([nz, ny, nx], spacing, data)
}

/// Builds a header for a `(z, y, x)` volume; payload starts at byte 352.
pub fn encode_header(shape: [usize; 3], spacing: [f64; 3], datatype: DataType) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let [nz, ny, nx] = shape;
    let dims = [3usize, nx, ny, nz, 1, 1, 1, 1];
    for (i, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds NIfTI-1 limits")))?;
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * i..], d);
    }
    LittleEndian::write_i16(&mut h[offsets::DATATYPE..], datatype.code());
    LittleEndian::write_i16(&mut h[offsets::BITPIX..], 8 * datatype.bytes() as i16);
    let [dz, dy, dx] = spacing.map(|s| s as f32);
    let pixdim = [1.0f32, dx, dy, dz, 1.0, 1.0, 1.0, 1.0];
    for (i, &p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * i..], p);
    }
    LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    h[offsets::XYZT_UNITS] = 2; // millimetres
    LittleEndian::write_i16(&mut h[offsets::SFORM_CODE..], 1);
    for (row, off) in [offsets::SROW_X, offsets::SROW_Y, offsets::SROW_Z].into_iter().enumerate() {
        LittleEndian::write_f32(&mut h[off + 4 * row..], [dx, dy, dz][row]);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

pub fn encode_volume<T: Scalar>(v: &Volume<T>) -> Result<Vec<u8>> {
    let mut out = encode_header(v.shape(), v.spacing(), DataType::Float32)?;
    out.reserve(4 * v.len());
    let mut buf = [0u8; 4];
    for &x in v.data() {
        LittleEndian::write_f32(&mut buf, x.to_f32().unwrap_or(f32::NAN));
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

pub fn encode_mask(m: &Mask) -> Result<Vec<u8>> {
    let mut out = encode_header(m.shape(), m.spacing(), DataType::UInt8)?;
    out.extend_from_slice(m.data());
    Ok(out)
}

/// Loads a volume, converting stored values to `T`.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    decode(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a 0/1 mask stored with any supported datatype.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let v: Volume<f64> = load_volume(path.as_ref())?;
    Mask::from_binary_values(&v).map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))
}

/// Writes intensities as `float32`; a `.gz` extension selects gzip.
pub fn write_volume<T: Scalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v)?)
}

/// Writes a mask as `uint8`.
pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m)?)
}
