//! Volume file formats.
//!
//! Two formats are supported:
//! - NIfTI-1 (`.nii` / `.nii.gz`), read-only, standard 348-byte header.
//! - A raw-binary format used for preprocessed outputs: a flat little-endian
//!   float32 file in axis-0-major (C) order plus a JSON sidecar at
//!   `<path>.json` holding `{shape, spacing, orientation, dtype, byte_order}`.

use super::{CTVolume, Orientation, VolumeError};
use flate2::read::GzDecoder;
use ndarray::{Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Sidecar header for the raw-binary volume format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: String,
    pub dtype: String,
    pub byte_order: String,
}

fn sidecar_path(data_path: &Path) -> std::path::PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Write voxels as flat little-endian f32 in axis-0-major order, with the
/// JSON sidecar beside the data file.
pub fn write_raw(v: &CTVolume, data_path: &Path) -> Result<(), VolumeError> {
    let header = RawHeader {
        shape: v.shape(),
        spacing: v.spacing,
        orientation: v.orientation.to_string(),
        dtype: "f32".to_string(),
        byte_order: "little".to_string(),
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| VolumeError::BadFile(format!("sidecar serialization: {e}")))?;
    std::fs::write(sidecar_path(data_path), json)?;

    let mut w = BufWriter::new(File::create(data_path)?);
    // Standard layout guarantees axis-0-major iteration order.
    let owned;
    let voxels = if v.voxels.is_standard_layout() {
        &v.voxels
    } else {
        owned = v.voxels.as_standard_layout().to_owned();
        &owned
    };
    for &x in voxels.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a raw-binary volume written by [`write_raw`].
pub fn read_raw(data_path: &Path) -> Result<CTVolume, VolumeError> {
    let sidecar = sidecar_path(data_path);
    let json = std::fs::read_to_string(&sidecar)?;
    let header: RawHeader =
        serde_json::from_str(&json).map_err(|e| VolumeError::BadFile(format!("sidecar: {e}")))?;
    if header.dtype != "f32" {
        return Err(VolumeError::BadFile(format!(
            "unsupported dtype `{}` (expected f32)",
            header.dtype
        )));
    }
    if header.byte_order != "little" {
        return Err(VolumeError::BadFile(format!(
            "unsupported byte order `{}`",
            header.byte_order
        )));
    }
    let n: usize = header.shape.iter().product();
    let bytes = std::fs::read(data_path)?;
    if bytes.len() != n * 4 {
        return Err(VolumeError::BadFile(format!(
            "expected {} bytes for shape {:?}, found {}",
            n * 4,
            header.shape,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec(header.shape, data)
        .map_err(|e| VolumeError::BadFile(format!("shape: {e}")))?;
    CTVolume::new(voxels, header.spacing, Orientation::parse(&header.orientation)?)
}

const NIFTI1_HEADER_LEN: usize = 348;

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Derive per-axis direction codes from the voxel-to-world rotation part of
/// an affine whose world frame is RAS+.
fn orientation_from_affine(rot: &[[f64; 3]; 3]) -> Result<Orientation, VolumeError> {
    use super::AxisCode;
    let pos = [AxisCode::Right, AxisCode::Anterior, AxisCode::Superior];
    let neg = [AxisCode::Left, AxisCode::Posterior, AxisCode::Inferior];
    let mut codes = [AxisCode::Right; 3];
    let mut used = [false; 3];
    for j in 0..3 {
        let col = [rot[0][j], rot[1][j], rot[2][j]];
        let (mut best, mut best_abs) = (0usize, 0.0f64);
        for (i, &c) in col.iter().enumerate() {
            if c.abs() > best_abs {
                best_abs = c.abs();
                best = i;
            }
        }
        if best_abs == 0.0 || used[best] {
            return Err(VolumeError::DegenerateOrientation(format!("{rot:?}")));
        }
        used[best] = true;
        codes[j] = if col[best] > 0.0 { pos[best] } else { neg[best] };
    }
    Ok(Orientation(codes))
}

/// Convert quaternion parameters (NIfTI qform) into a rotation matrix with
/// column scaling by the qfac convention on the third axis.
fn qform_rotation(b: f64, c: f64, d: f64, qfac: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if qfac >= 0.0 { 1.0 } else { -1.0 };
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            qfac * 2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            qfac * 2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            qfac * (a * a + d * d - b * b - c * c),
        ],
    ]
}

/// Read a NIfTI-1 volume (`.nii`, optionally gzip-compressed). The first
/// three dimensions are used; scl_slope/scl_inter rescaling is applied.
pub fn read_nifti(path: &Path) -> Result<CTVolume, VolumeError> {
    let file = File::open(path)?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < NIFTI1_HEADER_LEN {
        return Err(VolumeError::BadFile("truncated NIfTI header".into()));
    }
    let h = &bytes[..NIFTI1_HEADER_LEN];
    if &h[344..348] != b"n+1\0" && &h[344..348] != b"ni1\0" {
        return Err(VolumeError::BadFile("missing NIfTI-1 magic".into()));
    }
    let ndim = le_i16(h, 40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::BadFile(format!("bad ndim {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = le_i16(h, 42 + 2 * i);
        if v < 1 {
            return Err(VolumeError::BadFile(format!("bad dim[{}] {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(VolumeError::BadFile("only 3D volumes are supported".into()));
    }
    let shape = [dim[0], dim[1], dim[2]];
    let datatype = le_i16(h, 70);
    let vox_offset = le_f32(h, 108) as usize;
    let pixdim = [
        le_f32(h, 76) as f64, // qfac
        le_f32(h, 80) as f64,
        le_f32(h, 84) as f64,
        le_f32(h, 88) as f64,
    ];
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let scl_slope = le_f32(h, 112);
    let scl_inter = le_f32(h, 116);
    let qform_code = le_i16(h, 252);
    let sform_code = le_i16(h, 254);

    let orientation = if sform_code > 0 {
        let mut rot = [[0.0f64; 3]; 3];
        for (r, row_off) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for j in 0..3 {
                rot[r][j] = le_f32(h, row_off + 4 * j) as f64;
            }
        }
        orientation_from_affine(&rot)?
    } else if qform_code > 0 {
        let b = le_f32(h, 256) as f64;
        let c = le_f32(h, 260) as f64;
        let d = le_f32(h, 264) as f64;
        orientation_from_affine(&qform_rotation(b, c, d, pixdim[0]))?
    } else {
        return Err(VolumeError::UnknownOrientation(
            "NIfTI file carries neither sform nor qform".into(),
        ));
    };

    let n: usize = shape.iter().product();
    let start = vox_offset.max(NIFTI1_HEADER_LEN);
    let data = &bytes[start..];
    let mut values: Vec<f32> = match datatype {
        2 => data.iter().take(n).map(|&b| b as f32).collect(),
        4 => data
            .chunks_exact(2)
            .take(n)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        8 => data
            .chunks_exact(4)
            .take(n)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
        16 => data
            .chunks_exact(4)
            .take(n)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        64 => data
            .chunks_exact(8)
            .take(n)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32)
            .collect(),
        other => {
            return Err(VolumeError::BadFile(format!(
                "unsupported NIfTI datatype {other}"
            )))
        }
    };
    if values.len() != n {
        return Err(VolumeError::BadFile(format!(
            "expected {n} voxels, file holds {}",
            values.len()
        )));
    }
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * scl_slope + scl_inter;
        }
    }
    // NIfTI stores the first dimension fastest.
    let voxels = Array3::from_shape_vec(shape.f(), values)
        .map_err(|e| VolumeError::BadFile(format!("shape: {e}")))?;
    CTVolume::new(voxels.as_standard_layout().to_owned(), spacing, orientation)
}
