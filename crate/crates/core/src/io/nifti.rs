//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Images are written as float32 with unit scaling, `vox_offset = 352`, an
//! axis-aligned sform/qform built from the grid origin and spacing, and the
//! phase-encoding axis recorded in `dim_info`. The reader accepts uint8, int16 and
//! float32 in either byte order and applies `scl_slope`/`scl_inter`.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3};

use super::{atomic_write, read_file};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// Axis used when a file does not record its phase-encoding dimension.
pub const DEFAULT_PED_AXIS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Nifti1Header {
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub little_endian: bool,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn check_extension(path: &Path) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    if name.ends_with(".hdr") || name.ends_with(".img") || name.ends_with(".hdr.gz") || name.ends_with(".img.gz") {
        return Err(Error::Nifti(format!(
            "{}: header/image pairs are not supported, use a single .nii or .nii.gz file",
            path.display()
        )));
    }
    Ok(())
}

fn load(path: &Path) -> Result<Vec<u8>> {
    check_extension(path)?;
    let raw = read_file(path)?;
    if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("{}: gzip stream is corrupt: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        self.buf[off..off + N].try_into().expect("in-bounds header field")
    }
    fn i16(&self, off: usize) -> i16 {
        let b = self.bytes::<2>(off);
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }
    fn f32(&self, off: usize) -> f32 {
        let b = self.bytes::<4>(off);
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

fn parse_header(buf: &[u8]) -> Result<Nifti1Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "truncated header: {} bytes, need {HEADER_SIZE}",
            buf.len()
        )));
    }
    let size_le = i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes"));
    let size_be = i32::from_be_bytes(buf[0..4].try_into().expect("4 bytes"));
    let le = if size_le == HEADER_SIZE as i32 {
        true
    } else if size_be == HEADER_SIZE as i32 {
        false
    } else {
        return Err(Error::Nifti(format!("sizeof_hdr is {size_le}, expected 348")));
    };
    let r = Reader { buf, le };
    let magic: [u8; 4] = r.bytes(344);
    if &magic != b"n+1\0" {
        if &magic == b"ni1\0" {
            return Err(Error::Nifti("bad magic: header/image pair (ni1) is not supported".into()));
        }
        return Err(Error::Nifti(format!("bad magic {magic:?}, expected \"n+1\\0\"")));
    }
    let descrip_raw = &buf[148..228];
    let end = descrip_raw.iter().position(|&c| c == 0).unwrap_or(descrip_raw.len());
    Ok(Nifti1Header {
        dim_info: buf[39],
        dim: [0, 1, 2, 3, 4, 5, 6, 7].map(|i| r.i16(40 + 2 * i)),
        datatype: r.i16(70),
        bitpix: r.i16(72),
        pixdim: [0, 1, 2, 3, 4, 5, 6, 7].map(|i| r.f32(76 + 4 * i)),
        vox_offset: r.f32(108),
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        xyzt_units: buf[123],
        descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        srow: [0, 1, 2].map(|row| [0, 1, 2, 3].map(|c| r.f32(280 + 16 * row + 4 * c))),
        magic,
        little_endian: le,
    })
}

impl Nifti1Header {
    /// Spatial dims and the number of volumes.
    pub fn shape(&self) -> Result<([usize; 3], usize)> {
        let nd = self.dim[0];
        if !(1..=7).contains(&nd) {
            return Err(Error::Nifti(format!("dim[0] = {nd} is out of range")));
        }
        let get = |i: usize| -> Result<usize> {
            if i as i16 > nd {
                return Ok(1);
            }
            let d = self.dim[i];
            if d < 1 {
                return Err(Error::Nifti(format!("dim[{i}] = {d} must be >= 1")));
            }
            Ok(d as usize)
        };
        if nd > 4 && (5..=nd as usize).any(|i| self.dim[i] > 1) {
            return Err(Error::Nifti("images with more than four dimensions are not supported".into()));
        }
        Ok(([get(1)?, get(2)?, get(3)?], get(4)?))
    }

    /// Grid from the sform, else the qform offset with pixdim, else pixdim alone.
    ///
    /// Only spacing and origin are kept; rotations and axis flips are not represented.
    pub fn geometry(&self) -> Result<Geometry> {
        let (dims, _) = self.shape()?;
        let pix = [self.pixdim[1], self.pixdim[2], self.pixdim[3]].map(|p| if p > 0.0 { p as f64 } else { 1.0 });
        let (spacing, origin) = if self.sform_code > 0 {
            let s = [0, 1, 2].map(|c| {
                let n = (0..3).map(|r| (self.srow[r][c] as f64).powi(2)).sum::<f64>().sqrt();
                if n > 0.0 {
                    n
                } else {
                    pix[c]
                }
            });
            (s, [0, 1, 2].map(|r| self.srow[r][3] as f64))
        } else if self.qform_code > 0 {
            (pix, self.qoffset.map(|v| v as f64))
        } else {
            (pix, [0.0; 3])
        };
        Geometry::new(dims, spacing, origin)
    }

    /// Phase-encoding axis from `dim_info`, or [`DEFAULT_PED_AXIS`].
    pub fn ped_axis(&self) -> usize {
        match (self.dim_info >> 2) & 3 {
            0 => DEFAULT_PED_AXIS,
            p => p as usize - 1,
        }
    }

    fn for_volumes(geom: &Geometry, n_vols: usize, ped_axis: usize) -> Self {
        let dims = geom.dims;
        let four_d = n_vols > 1;
        let mut dim = [0i16; 8];
        dim[0] = if four_d { 4 } else { 3 };
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        dim[4] = n_vols as i16;
        dim[5..].iter_mut().for_each(|d| *d = 1);
        let mut pixdim = [1.0f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = geom.spacing[a] as f32;
        }
        let mut srow = [[0.0f32; 4]; 3];
        for a in 0..3 {
            srow[a][a] = geom.spacing[a] as f32;
            srow[a][3] = geom.origin[a] as f32;
        }
        Self {
            dim_info: ((ped_axis as u8 + 1) << 2) & 0b1100,
            dim,
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm and seconds
            xyzt_units: 2 | 8,
            descrip: "eddycorr".into(),
            qform_code: 1,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: geom.origin.map(|v| v as f32),
            srow,
            magic: *b"n+1\0",
            little_endian: true,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        let put = |b: &mut Vec<u8>, off: usize, bytes: &[u8]| b[off..off + bytes.len()].copy_from_slice(bytes);
        put(&mut b, 0, &(HEADER_SIZE as i32).to_le_bytes());
        b[38] = b'r';
        b[39] = self.dim_info;
        for i in 0..8 {
            put(&mut b, 40 + 2 * i, &self.dim[i].to_le_bytes());
            put(&mut b, 76 + 4 * i, &self.pixdim[i].to_le_bytes());
        }
        put(&mut b, 70, &self.datatype.to_le_bytes());
        put(&mut b, 72, &self.bitpix.to_le_bytes());
        put(&mut b, 108, &self.vox_offset.to_le_bytes());
        put(&mut b, 112, &self.scl_slope.to_le_bytes());
        put(&mut b, 116, &self.scl_inter.to_le_bytes());
        b[123] = self.xyzt_units;
        let d = self.descrip.as_bytes();
        put(&mut b, 148, &d[..d.len().min(79)]);
        put(&mut b, 252, &self.qform_code.to_le_bytes());
        put(&mut b, 254, &self.sform_code.to_le_bytes());
        for i in 0..3 {
            put(&mut b, 256 + 4 * i, &self.quatern[i].to_le_bytes());
            put(&mut b, 268 + 4 * i, &self.qoffset[i].to_le_bytes());
            for c in 0..4 {
                put(&mut b, 280 + 16 * i + 4 * c, &self.srow[i][c].to_le_bytes());
            }
        }
        put(&mut b, 344, &self.magic);
        b
    }
}

pub fn read_nifti_header(path: &Path) -> Result<Nifti1Header> {
    parse_header(&load(path)?)
}

/// Read a 3D or 4D image as a list of volumes sharing one grid.
pub fn read_nifti(path: &Path) -> Result<Vec<Volume3>> {
    let buf = load(path)?;
    let h = parse_header(&buf)?;
    let (dims, n_vols) = h.shape()?;
    let geom = h.geometry()?;
    let (bytes_per, expected_bitpix) = match h.datatype {
        DT_UINT8 => (1, 8),
        DT_INT16 => (2, 16),
        DT_FLOAT32 => (4, 32),
        other => {
            return Err(Error::Nifti(format!(
                "unsupported datatype code {other} (supported: uint8, int16, float32)"
            )))
        }
    };
    if h.bitpix != expected_bitpix {
        return Err(Error::Nifti(format!(
            "bitpix {} does not match datatype {}",
            h.bitpix, h.datatype
        )));
    }
    let offset = h.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::Nifti(format!("vox_offset {} lies inside the header", h.vox_offset)));
    }
    let n_vox = dims.iter().product::<usize>();
    let need = n_vox * n_vols * bytes_per;
    if buf.len() < offset + need {
        return Err(Error::Nifti(format!(
            "truncated data: need {need} bytes after offset {offset}, found {}",
            buf.len().saturating_sub(offset)
        )));
    }
    // A zero slope means "no scaling".
    let (slope, inter) = if h.scl_slope == 0.0 || !h.scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (h.scl_slope, if h.scl_inter.is_finite() { h.scl_inter } else { 0.0 })
    };
    let data = &buf[offset..offset + need];
    let le = h.little_endian;
    let value = |i: usize| -> f32 {
        let raw = match h.datatype {
            DT_UINT8 => data[i] as f32,
            DT_INT16 => {
                let b = [data[2 * i], data[2 * i + 1]];
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f32
            }
            _ => {
                let b = [data[4 * i], data[4 * i + 1], data[4 * i + 2], data[4 * i + 3]];
                if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            }
        };
        if slope == 1.0 && inter == 0.0 {
            raw
        } else {
            raw * slope + inter
        }
    };
    let ped = h.ped_axis();
    (0..n_vols)
        .map(|v| Volume3::new(geom, ped, (v * n_vox..(v + 1) * n_vox).map(value).collect()))
        .collect()
}

/// Encode volumes (one: 3D, several: 4D) as NIfTI-1 bytes, uncompressed.
pub fn encode_nifti(vols: &[Volume3]) -> Result<Vec<u8>> {
    let first = vols.first().ok_or_else(|| Error::Nifti("nothing to write".into()))?;
    for v in vols {
        first.check_same_grid(v, "write_nifti")?;
    }
    if first.dims().iter().any(|&d| d > i16::MAX as usize) || vols.len() > i16::MAX as usize {
        return Err(Error::Nifti("dimension exceeds the NIfTI-1 limit of 32767".into()));
    }
    let h = Nifti1Header::for_volumes(first.geometry(), vols.len(), first.ped_axis());
    let mut out = h.to_bytes();
    out.reserve(vols.len() * first.len() * 4);
    for v in vols {
        for &x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write atomically; gzip when the file name ends in `.gz`.
pub fn write_nifti(path: &Path, vols: &[Volume3]) -> Result<()> {
    check_extension(path)?;
    let raw = encode_nifti(vols)?;
    let bytes = if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    atomic_write(path, &bytes)
}
