//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only the fields needed to recover voxel data are interpreted; the rest of
//! the 348-byte header is written as zeros. Both byte orders are accepted and
//! detected from `dim[0]`.

use super::Volume4D;
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            other => Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nifti1Header {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub endian: Endian,
}

impl Nifti1Header {
    /// Header describing a `[T, H, W, D]` volume stored at the default offset.
    pub fn for_volume(v: &Volume4D, datatype: Datatype) -> Self {
        let [h, w, d] = v.spatial();
        let t = v.frames();
        let dim0 = if t > 1 { 4 } else { 3 };
        let mut pixdim = [0.0f32; 8];
        pixdim[0] = 1.0;
        for i in 0..3 {
            pixdim[i + 1] = v.voxel_size_mm[i] as f32;
        }
        pixdim[4] = v.tr_seconds as f32;
        Nifti1Header {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [dim0, h as i16, w as i16, d as i16, t as i16, 1, 1, 1],
            datatype: datatype.code(),
            bitpix: datatype.bitpix(),
            pixdim,
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            magic: MAGIC_SINGLE,
            endian: Endian::Little,
        }
    }

    /// Number of voxels across all stored dimensions.
    pub fn voxel_count(&self) -> usize {
        let n = (self.dim[0].clamp(0, 7)) as usize;
        self.dim[1..=n].iter().map(|&d| d.max(0) as usize).product()
    }

    /// Writes the 348-byte header in this header's byte order.
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = vec![0u8; HEADER_SIZE];
        let mut w = Writer {
            buf: &mut buf,
            endian: self.endian,
        };
        w.put(
            0,
            &self.sizeof_hdr.to_le_bytes(),
            &self.sizeof_hdr.to_be_bytes(),
        );
        for (i, d) in self.dim.iter().enumerate() {
            w.put(OFF_DIM + 2 * i, &d.to_le_bytes(), &d.to_be_bytes());
        }
        w.put(
            OFF_DATATYPE,
            &self.datatype.to_le_bytes(),
            &self.datatype.to_be_bytes(),
        );
        w.put(
            OFF_BITPIX,
            &self.bitpix.to_le_bytes(),
            &self.bitpix.to_be_bytes(),
        );
        for (i, p) in self.pixdim.iter().enumerate() {
            w.put(OFF_PIXDIM + 4 * i, &p.to_le_bytes(), &p.to_be_bytes());
        }
        w.put(
            OFF_VOX_OFFSET,
            &self.vox_offset.to_le_bytes(),
            &self.vox_offset.to_be_bytes(),
        );
        w.put(
            OFF_SCL_SLOPE,
            &self.scl_slope.to_le_bytes(),
            &self.scl_slope.to_be_bytes(),
        );
        w.put(
            OFF_SCL_INTER,
            &self.scl_inter.to_le_bytes(),
            &self.scl_inter.to_be_bytes(),
        );
        buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&self.magic);
        buf
    }

    /// Parses and validates a header from the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated {
                expected: HEADER_SIZE,
                found: bytes.len(),
            });
        }
        let dim0_le = i16::from_le_bytes([bytes[OFF_DIM], bytes[OFF_DIM + 1]]);
        let endian = if (1..=7).contains(&dim0_le) {
            Endian::Little
        } else {
            Endian::Big
        };
        let r = Reader { bytes, endian };
        let sizeof_hdr = r.i32(0);
        if sizeof_hdr == 540 {
            return Err(Error::Unsupported("NIfTI-2 files are not supported".into()));
        }
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Format(format!(
                "sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}"
            )));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(OFF_DIM + 2 * i);
        }
        if !(1..=7).contains(&dim[0]) {
            return Err(Error::Format(format!("dim[0] = {} outside 1..=7", dim[0])));
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(OFF_PIXDIM + 4 * i);
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[OFF_MAGIC..OFF_MAGIC + 4]);
        if magic == MAGIC_PAIR {
            return Err(Error::Format(
                "magic \"ni1\": .hdr/.img pairs are not supported".into(),
            ));
        }
        if magic != MAGIC_SINGLE {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        Ok(Nifti1Header {
            sizeof_hdr,
            dim,
            datatype: r.i16(OFF_DATATYPE),
            bitpix: r.i16(OFF_BITPIX),
            pixdim,
            vox_offset: r.f32(OFF_VOX_OFFSET),
            scl_slope: r.f32(OFF_SCL_SLOPE),
            scl_inter: r.f32(OFF_SCL_INTER),
            magic,
            endian,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.take(at)),
            Endian::Big => i16::from_be_bytes(self.take(at)),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.take(at)),
            Endian::Big => i32::from_be_bytes(self.take(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.take(at)),
            Endian::Big => f32::from_be_bytes(self.take(at)),
        }
    }

    fn f64(&self, at: usize) -> f64 {
        match self.endian {
            Endian::Little => f64::from_le_bytes(self.take(at)),
            Endian::Big => f64::from_be_bytes(self.take(at)),
        }
    }
}

struct Writer<'a> {
    buf: &'a mut [u8],
    endian: Endian,
}

impl Writer<'_> {
    fn put(&mut self, at: usize, le: &[u8], be: &[u8]) {
        let src = match self.endian {
            Endian::Little => le,
            Endian::Big => be,
        };
        self.buf[at..at + src.len()].copy_from_slice(src);
    }
}

fn positive_or_one(v: f32) -> f64 {
    let v = f64::from(v).abs();
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

/// Parses a single-file NIfTI-1 image into a header and a volume.
///
/// Voxels are reordered from the file's x-fastest layout into the row-major
/// `[T, H, W, D]` layout with `H = dim[1]`, `W = dim[2]`, `D = dim[3]`.
pub fn parse_nifti(bytes: &[u8]) -> Result<(Nifti1Header, Volume4D)> {
    let hdr = Nifti1Header::parse(bytes)?;
    let dtype = Datatype::from_code(hdr.datatype)?;
    if hdr.dim[0] != 3 && hdr.dim[0] != 4 {
        return Err(Error::Unsupported(format!(
            "dim[0] = {}; only 3D and 4D images are supported",
            hdr.dim[0]
        )));
    }
    let ext: Vec<usize> = hdr.dim[1..=4].iter().map(|&d| d.max(1) as usize).collect();
    if hdr.dim[1..=3].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!(
            "non-positive spatial extent {:?}",
            hdr.dim
        )));
    }
    let (nx, ny, nz) = (ext[0], ext[1], ext[2]);
    let nt = if hdr.dim[0] == 4 { ext[3] } else { 1 };
    let nvox = nx * ny * nz * nt;
    let bytes_per = (dtype.bitpix() / 8) as usize;
    if !(hdr.vox_offset >= 0.0 && hdr.vox_offset.is_finite()) {
        return Err(Error::Format(format!(
            "invalid vox_offset {}",
            hdr.vox_offset
        )));
    }
    let start = hdr.vox_offset as usize;
    let needed = start + nvox * bytes_per;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            expected: needed,
            found: bytes.len(),
        });
    }
    let r = Reader {
        bytes,
        endian: hdr.endian,
    };
    let scale = hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite();
    let (slope, inter) = (f64::from(hdr.scl_slope), f64::from(hdr.scl_inter));
    let mut data = vec![0.0; nvox];
    for t in 0..nt {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let file_idx = x + nx * (y + ny * (z + nz * t));
                    let at = start + file_idx * bytes_per;
                    let raw = match dtype {
                        Datatype::Int16 => f64::from(r.i16(at)),
                        Datatype::Float32 => f64::from(r.f32(at)),
                        Datatype::Float64 => r.f64(at),
                    };
                    let v = if scale { raw * slope + inter } else { raw };
                    data[((t * nx + x) * ny + y) * nz + z] = v;
                }
            }
        }
    }
    let mut vol = Volume4D::from_frames(nt, [nx, ny, nz], data)?;
    vol.voxel_size_mm = [
        positive_or_one(hdr.pixdim[1]),
        positive_or_one(hdr.pixdim[2]),
        positive_or_one(hdr.pixdim[3]),
    ];
    vol.tr_seconds = if nt > 1 {
        positive_or_one(hdr.pixdim[4])
    } else {
        1.0
    };
    Ok((hdr, vol))
}

/// Serializes a volume as little-endian single-file NIfTI-1.
pub fn write_nifti(v: &Volume4D, datatype: Datatype) -> Vec<u8> {
    let hdr = Nifti1Header::for_volume(v, datatype);
    let [nx, ny, nz] = v.spatial();
    let nt = v.frames();
    let bytes_per = (datatype.bitpix() / 8) as usize;
    let mut out = hdr.serialize();
    out.resize(DEFAULT_VOX_OFFSET, 0);
    out.reserve(nx * ny * nz * nt * bytes_per);
    let src = v.data();
    for t in 0..nt {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let val = src[((t * nx + x) * ny + y) * nz + z];
                    match datatype {
                        Datatype::Int16 => out.extend_from_slice(
                            &(val.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                                .to_le_bytes(),
                        ),
                        Datatype::Float32 => out.extend_from_slice(&(val as f32).to_le_bytes()),
                        Datatype::Float64 => out.extend_from_slice(&val.to_le_bytes()),
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn fixture(slope: f32, inter: f32) -> Vec<u8> {
        let v = Volume4D::from_frames(1, [2, 2, 2], vec![1.0; 8]).unwrap();
        let mut hdr = Nifti1Header::for_volume(&v, Datatype::Float32);
        hdr.scl_slope = slope;
        hdr.scl_inter = inter;
        let mut bytes = hdr.serialize();
        bytes.resize(DEFAULT_VOX_OFFSET, 0);
        for _ in 0..8 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn minimal_float_volume() {
        let (hdr, v) = parse_nifti(&fixture(0.0, 0.0)).unwrap();
        assert_eq!(hdr.sizeof_hdr, 348);
        assert_eq!(v.frames(), 1);
        assert_eq!(v.spatial(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn affine_intensity_scaling() {
        let (_, v) = parse_nifti(&fixture(2.0, 1.0)).unwrap();
        assert!(v.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn pair_magic_rejected() {
        let mut b = fixture(0.0, 0.0);
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"ni1\0");
        assert!(matches!(parse_nifti(&b), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype_and_truncation() {
        let mut b = fixture(0.0, 0.0);
        b[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(parse_nifti(&b), Err(Error::Unsupported(_))));

        let b = fixture(0.0, 0.0);
        let short = &b[..b.len() - 1];
        assert!(matches!(
            parse_nifti(short),
            Err(Error::Truncated {
                expected: 384,
                found: 383
            })
        ));
    }

    #[test]
    fn nifti2_rejected() {
        let mut b = fixture(0.0, 0.0);
        b[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(parse_nifti(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn big_endian_file_parses() {
        let v = Volume4D::from_frames(2, [3, 2, 1], (0..12).map(f64::from).collect()).unwrap();
        let mut hdr = Nifti1Header::for_volume(&v, Datatype::Int16);
        hdr.endian = Endian::Big;
        let mut bytes = hdr.serialize();
        bytes.resize(DEFAULT_VOX_OFFSET, 0);
        // File order is x fastest; write the big-endian payload by hand.
        for t in 0..2 {
            for z in 0..1 {
                for y in 0..2 {
                    for x in 0..3 {
                        let val = v.data()[((t * 3 + x) * 2 + y) + z] as i16;
                        bytes.extend_from_slice(&val.to_be_bytes());
                    }
                }
            }
        }
        let (h, parsed) = parse_nifti(&bytes).unwrap();
        assert_eq!(h.endian, Endian::Big);
        assert_eq!(parsed.data(), v.data());
    }

    #[test]
    fn write_then_parse_roundtrips_voxels() {
        let v = Volume4D::from_frames(
            3,
            [4, 3, 2],
            (0..72).map(|i| i as f64 * 0.37 - 5.0).collect(),
        )
        .unwrap();
        let (_, back) = parse_nifti(&write_nifti(&v, Datatype::Float64)).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.spatial(), [4, 3, 2]);
        assert_eq!(back.frames(), 3);
    }

    fn arb_header() -> impl Strategy<Value = Nifti1Header> {
        (
            (1i16..=7, proptest::array::uniform7(1i16..200)),
            prop_oneof![Just(4i16), Just(16i16), Just(64i16)],
            proptest::array::uniform8(-1e6f32..1e6),
            (0f32..1e4, -1e3f32..1e3, -1e3f32..1e3),
            any::<bool>(),
        )
            .prop_map(|((d0, rest), dt, pixdim, (off, slope, inter), big)| {
                let mut dim = [0i16; 8];
                dim[0] = d0;
                dim[1..].copy_from_slice(&rest);
                Nifti1Header {
                    sizeof_hdr: 348,
                    dim,
                    datatype: dt,
                    bitpix: Datatype::from_code(dt).unwrap().bitpix(),
                    pixdim,
                    vox_offset: off,
                    scl_slope: slope,
                    scl_inter: inter,
                    magic: MAGIC_SINGLE,
                    endian: if big { Endian::Big } else { Endian::Little },
                }
            })
    }

    proptest! {
        #[test]
        fn header_serialize_parse_roundtrip(h in arb_header()) {
            let parsed = Nifti1Header::parse(&h.serialize()).unwrap();
            prop_assert_eq!(parsed.serialize(), h.serialize());
            prop_assert_eq!(parsed, h);
        }
    }
}
