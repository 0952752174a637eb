//! Single-file NIfTI-1 (`.nii`, optionally gzip-compressed `.nii.gz`).
//!
//! Reading honours `dim[1..3]`, `pixdim[1..3]`, the datatype and
//! `scl_slope`/`scl_inter`; either byte order is accepted. Writing produces
//! little-endian files with identity scaling, an axis-aligned sform, float32
//! for images and uint8 for labels. Output is byte-for-byte reproducible.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Result, SegError};
use crate::volume::{ImageVolume, LabelVolume, Spacing, Volume, Voxel, MAX_LABEL};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;
pub const DT_UINT32: i16 = 768;

/// Which interpretation a file is read with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Image(ImageVolume),
    Label(LabelVolume),
}

/// The header fields this crate relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
}

/// Voxel types that can be written.
pub trait NiftiVoxel: Voxel {
    const DATATYPE: i16;
    const BITPIX: i16;
    fn write_le(self, out: &mut Vec<u8>);
}

impl NiftiVoxel for f32 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NiftiVoxel for u8 {
    const DATATYPE: i16 = DT_UINT8;
    const BITPIX: i16 = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Serializes a volume to uncompressed NIfTI-1 bytes.
pub fn encode<T: NiftiVoxel>(vol: &Volume<T>) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let [nx, ny, nz] = vol.dims();
    let [sx, sy, sz] = vol.spacing().as_array();
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    for (i, d) in [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, d);
    }
    put_i16(&mut h, 70, T::DATATYPE);
    put_i16(&mut h, 72, T::BITPIX);
    for (i, p) in [1.0f32, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0]
        .into_iter()
        .enumerate()
    {
        put_f32(&mut h, 76 + 4 * i, p);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // xyzt_units: millimetres
    put_i16(&mut h, 254, 1); // sform_code: scanner
    for (row, s) in [sx, sy, sz].into_iter().enumerate() {
        put_f32(&mut h, 280 + 16 * row + 4 * row, s as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352: empty extension block
    let mut out = h;
    out.reserve(vol.len() * (T::BITPIX as usize / 8));
    for &v in vol.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_volume<T: NiftiVoxel>(vol: &Volume<T>, path: &Path) -> Result<()> {
    let bytes = encode(vol);
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| SegError::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn u32(&self, off: usize) -> u32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().expect("4 bytes");
        if self.big {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        self.u32(off) as i32
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.u32(off))
    }

    fn u16(&self, off: usize) -> u16 {
        self.i16(off) as u16
    }

    fn f64(&self, off: usize) -> f64 {
        let b: [u8; 8] = self.bytes[off..off + 8].try_into().expect("8 bytes");
        if self.big {
            f64::from_be_bytes(b)
        } else {
            f64::from_le_bytes(b)
        }
    }
}

/// Parses the header of an in-memory, uncompressed file.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    let bad = |reason: String| SegError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("file has {} bytes, header needs 348", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(bad("sizeof_hdr is not 348".into())),
    };
    let r = Reader { bytes, big };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(bad("two-file (.hdr/.img) NIfTI is not supported".into())),
        m => return Err(bad(format!("bad magic {m:?}"))),
    }
    let rank = r.i16(40);
    if !(1..=7).contains(&rank) {
        return Err(bad(format!("dim[0] = {rank}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if (a as i16) < rank {
            let v = r.i16(42 + 2 * a);
            if v < 1 {
                return Err(bad(format!("dim[{}] = {v}", a + 1)));
            }
            *d = v as usize;
        }
    }
    for a in 3..rank as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(bad("volumes with more than three dimensions are not supported".into()));
        }
    }
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * a).abs() as f64;
        if (a as i16) < rank {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("pixdim[{}] = {v}", a + 1)));
            }
            *s = v;
        }
    }
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(bad(format!("vox_offset = {vox_offset}")));
    }
    Ok(NiftiHeader {
        dims,
        spacing,
        datatype: r.i16(70),
        bitpix: r.i16(72),
        vox_offset: vox_offset as usize,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        big_endian: big,
    })
}

/// Decodes voxel values to `f64` with intensity scaling applied.
fn decode_values(bytes: &[u8], header: &NiftiHeader, path: &Path) -> Result<Vec<f64>> {
    let width = match header.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        code => {
            return Err(SegError::UnsupportedDatatype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let count: usize = header.dims.iter().product();
    let end = header.vox_offset + count * width;
    if bytes.len() < end {
        return Err(SegError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("data truncated: need {end} bytes, file has {}", bytes.len()),
        });
    }
    let r = Reader {
        bytes,
        big: header.big_endian,
    };
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let values = (0..count)
        .map(|i| {
            let off = header.vox_offset + i * width;
            let v = match header.datatype {
                DT_UINT8 => bytes[off] as f64,
                DT_INT8 => bytes[off] as i8 as f64,
                DT_INT16 => r.i16(off) as f64,
                DT_UINT16 => r.u16(off) as f64,
                DT_INT32 => r.i32(off) as f64,
                DT_UINT32 => r.u32(off) as f64,
                DT_FLOAT32 => r.f32(off) as f64,
                _ => r.f64(off),
            };
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Ok(values)
}

fn load(path: &Path) -> Result<(NiftiHeader, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, path)?;
    let values = decode_values(&bytes, &header, path)?;
    Ok((header, values))
}

fn spacing_of(h: &NiftiHeader) -> Result<Spacing> {
    Spacing::from_array(h.spacing)
}

pub fn read_image(path: &Path) -> Result<ImageVolume> {
    let (h, values) = load(path)?;
    Volume::new(h.dims, spacing_of(&h)?, values.into_iter().map(|v| v as f32).collect())
}

/// Reads a label volume; values must be integers in `0..=13`.
pub fn read_label(path: &Path) -> Result<LabelVolume> {
    let (h, values) = load(path)?;
    let mut labels = Vec::with_capacity(values.len());
    for v in values {
        if v.fract() != 0.0 || v < 0.0 || v > MAX_LABEL as f64 {
            return Err(SegError::LabelOutOfRange { value: v });
        }
        labels.push(v as u8);
    }
    Volume::new(h.dims, spacing_of(&h)?, labels)
}

pub fn read_volume(path: &Path, kind: VolumeKind) -> Result<AnyVolume> {
    Ok(match kind {
        VolumeKind::Image => AnyVolume::Image(read_image(path)?),
        VolumeKind::Label => AnyVolume::Label(read_label(path)?),
    })
}

/// Lists `*.nii` / `*.nii.gz` files in a directory as `(case id, path)`,
/// sorted by id.
pub fn list_cases(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        let id = if let Some(s) = name.strip_suffix(".nii.gz") {
            s
        } else if let Some(s) = name.strip_suffix(".nii") {
            s
        } else {
            continue;
        };
        out.push((id.to_string(), path));
    }
    out.sort();
    Ok(out)
}
