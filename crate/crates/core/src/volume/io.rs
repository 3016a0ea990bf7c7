use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{voxel_count, Dims, Mask, Volume};
use crate::error::{Error, Result};

/// Leading bytes of a raw float volume file.
pub const RAW_MAGIC: &[u8; 8] = b"DLVOL001";

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    /// Single-file NIfTI-1 (`.nii`).
    Nifti1,
    /// `DLVOL001` magic, length-prefixed JSON header, little-endian f32 payload.
    Rawf32,
}

impl VolumeFormat {
    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti1 => "nii",
            VolumeFormat::Rawf32 => "vol",
        }
    }

    /// Guess from the extension; anything but `.nii` is treated as raw.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::Rawf32,
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nifti1" | "nifti" | "nii" => Ok(VolumeFormat::Nifti1),
            "rawf32" | "raw" => Ok(VolumeFormat::Rawf32),
            other => Err(Error::Config(format!("unknown volume format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        VolumeFormat::Rawf32 => decode_raw(&bytes),
        VolumeFormat::Nifti1 => decode_nifti(&bytes),
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>, format: VolumeFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        VolumeFormat::Rawf32 => encode_raw(v),
        VolumeFormat::Nifti1 => encode_nifti(v),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Masks are stored as 0/1 volumes with unit spacing.
pub fn save_mask(m: &Mask, path: impl AsRef<Path>, format: VolumeFormat) -> Result<()> {
    let data = m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    save_volume(&Volume::new(m.dims(), [1.0; 3], data)?, path, format)
}

pub fn load_mask(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Mask> {
    let v = load_volume(path, format)?;
    Mask::new(v.dims(), v.data().iter().map(|&x| x > 0.5).collect())
}

fn encode_raw(v: &Volume) -> Vec<u8> {
    let header = serde_json::to_vec(&RawHeader {
        dims: v.dims(),
        spacing: v.spacing(),
    })
    .expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * v.len());
    out.extend_from_slice(RAW_MAGIC);
    out.write_u32::<LittleEndian>(header.len() as u32).unwrap();
    out.extend_from_slice(&header);
    for &x in v.data() {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
    out
}

fn decode_raw(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format("missing DLVOL001 magic".into()));
    }
    let hlen = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("truncated JSON header".into()))?;
    let header: RawHeader =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad JSON header: {e}")))?;
    if header.dims.contains(&0) {
        return Err(Error::Format(format!("non-positive dims {:?}", header.dims)));
    }
    let payload = &bytes[12 + hlen..];
    let n = voxel_count(header.dims);
    if payload.len() != 4 * n {
        return Err(Error::Corrupt(format!(
            "dims {:?} need {} payload bytes, found {}",
            header.dims,
            4 * n,
            payload.len()
        )));
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(payload, &mut data);
    Volume::new(header.dims, header.spacing, data).map_err(|e| Error::Corrupt(e.to_string()))
}

fn encode_nifti(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], NIFTI_HEADER_SIZE as i32);
    let dims = v.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..74], 32);
    let sp = v.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], NIFTI_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    LittleEndian::write_f32(&mut h[116..120], 0.0);
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    let mut out = h;
    out.reserve(4 * v.len());
    for &x in v.data() {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
    out
}

fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_SIZE as i32 {
        parse_nifti::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_SIZE as i32 {
        parse_nifti::<BigEndian>(bytes)
    } else {
        Err(Error::Format("sizeof_hdr is not 348".into()))
    }
}

fn parse_nifti<B: ByteOrder>(bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format("magic is not n+1 (only single-file .nii is supported)".into()));
    }
    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[40..56], &mut dim);
    if !(1..=7).contains(&dim[0]) {
        return Err(Error::Format(format!("dim[0] = {} out of range", dim[0])));
    }
    if dim[1..=dim[0] as usize].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("non-positive extent in dim {dim:?}")));
    }
    if dim[4..=dim[0].max(3) as usize].iter().any(|&d| d > 1) {
        return Err(Error::Unsupported(format!("only 3D volumes are supported, dim = {dim:?}")));
    }
    let extent = |i: usize| if i <= dim[0] as usize { dim[i] as usize } else { 1 };
    let dims: Dims = [extent(1), extent(2), extent(3)];
    let datatype = B::read_i16(&bytes[70..72]);
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&bytes[76..108], &mut pixdim);
    let spacing = [1, 2, 3].map(|i| if pixdim[i] > 0.0 { pixdim[i] } else { 1.0 });
    let vox_offset = B::read_f32(&bytes[108..112]);
    if !(vox_offset >= NIFTI_HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside the header")));
    }
    let vox_offset = vox_offset as usize;
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);
    let n = voxel_count(dims);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
    };
    let payload = bytes.get(vox_offset..).unwrap_or(&[]);
    if payload.len() < n * width {
        return Err(Error::Corrupt(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            n * width,
            payload.len()
        )));
    }
    let mut rdr = Cursor::new(&payload[..n * width]);
    let data: Vec<f32> = match datatype {
        DT_FLOAT32 => {
            let mut d = vec![0f32; n];
            rdr.read_f32_into::<B>(&mut d).map_err(|e| Error::Corrupt(e.to_string()))?;
            d
        }
        _ => {
            let mut raw = vec![0i16; n];
            rdr.read_i16_into::<B>(&mut raw).map_err(|e| Error::Corrupt(e.to_string()))?;
            // scl_slope == 0 means "no scaling"
            let (s, b) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };
            raw.into_iter().map(|x| x as f32 * s + b).collect()
        }
    };
    Volume::new(dims, spacing, data).map_err(|e| Error::Corrupt(e.to_string()))
}
