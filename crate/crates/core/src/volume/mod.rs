//! CT volume handling: orientation, resampling, intensity windowing, and
//! shape standardization.
//!
//! The canonical model input is a (224, 224, 160) volume in RAS orientation
//! (axis 0 left→right, axis 1 posterior→anterior, axis 2 inferior→superior)
//! with voxel values windowed from Hounsfield units into [0, 1].

mod io;

pub use io::{read_nifti, read_raw, write_raw, RawHeader};

use ndarray::{Array3, ArrayView1, Axis, Slice};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("unrecognized orientation code string `{0}`")]
    UnknownOrientation(String),
    #[error("orientation `{0}` does not span the three anatomical axes")]
    DegenerateOrientation(String),
    #[error("spacing components must be strictly positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("resampling to {target:?} mm collapses axis {axis} to zero voxels")]
    EmptyAxis { axis: usize, target: [f64; 3] },
    #[error("intensity window must satisfy lo < hi, got ({0}, {1})")]
    BadWindow(f64, f64),
    #[error("non-finite voxel value {value} at index {index:?}")]
    NonFiniteVoxel { value: f32, index: [usize; 3] },
    #[error("volume file I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed volume file: {0}")]
    BadFile(String),
}

/// Anatomical direction a voxel axis points toward as its index increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisCode {
    Right,
    Left,
    Anterior,
    Posterior,
    Superior,
    Inferior,
}

impl AxisCode {
    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'R' => Some(AxisCode::Right),
            'L' => Some(AxisCode::Left),
            'A' => Some(AxisCode::Anterior),
            'P' => Some(AxisCode::Posterior),
            'S' => Some(AxisCode::Superior),
            'I' => Some(AxisCode::Inferior),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            AxisCode::Right => 'R',
            AxisCode::Left => 'L',
            AxisCode::Anterior => 'A',
            AxisCode::Posterior => 'P',
            AxisCode::Superior => 'S',
            AxisCode::Inferior => 'I',
        }
    }

    /// Index of the anatomical axis this code lives on (0 = left/right,
    /// 1 = posterior/anterior, 2 = inferior/superior).
    fn anatomical_axis(self) -> usize {
        match self {
            AxisCode::Right | AxisCode::Left => 0,
            AxisCode::Anterior | AxisCode::Posterior => 1,
            AxisCode::Superior | AxisCode::Inferior => 2,
        }
    }

    /// True when the code points in the positive RAS direction.
    fn is_positive(self) -> bool {
        matches!(
            self,
            AxisCode::Right | AxisCode::Anterior | AxisCode::Superior
        )
    }
}

/// Per-axis direction codes for a 3D array, e.g. "RAS" or "LPS".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation(pub [AxisCode; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisCode::Right, AxisCode::Anterior, AxisCode::Superior]);

    pub fn parse(s: &str) -> Result<Self, VolumeError> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 {
            return Err(VolumeError::UnknownOrientation(s.to_string()));
        }
        let mut codes = [AxisCode::Right; 3];
        for (i, c) in chars.iter().enumerate() {
            codes[i] =
                AxisCode::from_char(*c).ok_or_else(|| VolumeError::UnknownOrientation(s.to_string()))?;
        }
        let orient = Orientation(codes);
        orient.validate()?;
        Ok(orient)
    }

    fn validate(&self) -> Result<(), VolumeError> {
        let mut seen = [false; 3];
        for code in self.0 {
            let axis = code.anatomical_axis();
            if seen[axis] {
                return Err(VolumeError::DegenerateOrientation(self.to_string()));
            }
            seen[axis] = true;
        }
        Ok(())
    }

    pub fn is_ras(&self) -> bool {
        *self == Self::RAS
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for code in self.0 {
            write!(f, "{}", code.to_char())?;
        }
        Ok(())
    }
}

/// A CT volume with geometry metadata. Values are Hounsfield units on ingest
/// and [0, 1] after `window_normalize`.
#[derive(Debug, Clone)]
pub struct CTVolume {
    pub voxels: Array3<f32>,
    /// Voxel spacing in millimeters per array axis.
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    pub patient_id: String,
    pub series_id: String,
}

impl CTVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], orientation: Orientation) -> Result<Self, VolumeError> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        orientation.validate()?;
        Ok(CTVolume {
            voxels,
            spacing,
            orientation,
            patient_id: String::new(),
            series_id: String::new(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

/// Parameters of the deterministic preprocessing pipeline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub target_spacing_mm: [f64; 3],
    pub target_shape: [usize; 3],
    pub hu_window: (f64, f64),
    /// Fill for padding, in normalized space. 0 corresponds to air.
    pub pad_value: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: [1.5, 1.5, 3.0],
            target_shape: [224, 224, 160],
            hu_window: (-1000.0, 1000.0),
            pad_value: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.target_shape.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyAxis {
                axis: self.target_shape.iter().position(|&d| d == 0).unwrap(),
                target: self.target_spacing_mm,
            });
        }
        if self.hu_window.0 >= self.hu_window.1 {
            return Err(VolumeError::BadWindow(self.hu_window.0, self.hu_window.1));
        }
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::BadSpacing(self.target_spacing_mm));
        }
        Ok(())
    }
}

/// Permute and flip axes so the volume is RAS-oriented. Voxel values are
/// moved, never interpolated; a volume already in RAS is returned unchanged.
pub fn reorient_to_ras(v: &CTVolume) -> Result<CTVolume, VolumeError> {
    v.orientation.validate()?;
    if v.orientation.is_ras() {
        return Ok(v.clone());
    }

    // perm[d] = source axis that lands on output axis d.
    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    for (src_axis, code) in v.orientation.0.iter().enumerate() {
        let dst = code.anatomical_axis();
        perm[dst] = src_axis;
        flip[dst] = !code.is_positive();
    }

    let mut view = v.voxels.view().permuted_axes(perm);
    for (axis, &f) in flip.iter().enumerate() {
        if f {
            view.slice_axis_inplace(Axis(axis), Slice::new(0, None, -1));
        }
    }
    let voxels = view.to_owned();
    let spacing = [v.spacing[perm[0]], v.spacing[perm[1]], v.spacing[perm[2]]];

    Ok(CTVolume {
        voxels,
        spacing,
        orientation: Orientation::RAS,
        patient_id: v.patient_id.clone(),
        series_id: v.series_id.clone(),
    })
}

fn rounded_len(old_len: usize, old_sp: f64, new_sp: f64) -> usize {
    (old_len as f64 * old_sp / new_sp + 0.5).floor() as usize
}

/// Linear interpolation of `row` (spacing `old_sp`) at `new_len` positions
/// spaced `new_sp` apart, with origin-aligned voxel centers.
fn resample_axis(row: ArrayView1<'_, f32>, old_sp: f64, new_sp: f64, new_len: usize) -> Vec<f32> {
    let old_len = row.len();
    let ratio = new_sp / old_sp;
    (0..new_len)
        .map(|j| {
            let x = j as f64 * ratio;
            let i0 = x.floor() as isize;
            let i0c = i0.clamp(0, old_len as isize - 1) as usize;
            let i1c = (i0 + 1).clamp(0, old_len as isize - 1) as usize;
            let t = (x - i0 as f64) as f32;
            row[i0c] * (1.0 - t) + row[i1c] * t
        })
        .collect()
}

/// Resample to `target_spacing` using separable linear interpolation.
pub fn resample(v: &CTVolume, target_spacing: [f64; 3]) -> Result<CTVolume, VolumeError> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(VolumeError::BadSpacing(target_spacing));
    }
    let mut voxels = v.voxels.clone();
    for axis in 0..3 {
        let (old_sp, new_sp) = (v.spacing[axis], target_spacing[axis]);
        if old_sp == new_sp {
            continue;
        }
        let old_len = voxels.shape()[axis];
        let new_len = rounded_len(old_len, old_sp, new_sp);
        if new_len == 0 {
            return Err(VolumeError::EmptyAxis {
                axis,
                target: target_spacing,
            });
        }
        let mut shape = [voxels.shape()[0], voxels.shape()[1], voxels.shape()[2]];
        shape[axis] = new_len;
        let mut out = Array3::<f32>::zeros(shape);
        for (src, mut dst) in voxels.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            let vals = resample_axis(src, old_sp, new_sp, new_len);
            for (d, val) in dst.iter_mut().zip(vals) {
                *d = val;
            }
        }
        voxels = out;
    }
    Ok(CTVolume {
        voxels,
        spacing: target_spacing,
        orientation: v.orientation,
        patient_id: v.patient_id.clone(),
        series_id: v.series_id.clone(),
    })
}

/// Affine map of `[lo, hi]` onto `[0, 1]`, clamping values outside the window.
pub fn window_normalize(v: &CTVolume, window: (f64, f64)) -> Result<CTVolume, VolumeError> {
    let (lo, hi) = window;
    if lo >= hi {
        return Err(VolumeError::BadWindow(lo, hi));
    }
    if let Some((index, &value)) = v.voxels.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(VolumeError::NonFiniteVoxel {
            value,
            index: [index.0, index.1, index.2],
        });
    }
    let lo = lo as f32;
    let inv = 1.0 / (hi - window.0) as f32;
    let voxels = v.voxels.mapv(|x| ((x - lo) * inv).clamp(0.0, 1.0));
    Ok(CTVolume {
        voxels,
        spacing: v.spacing,
        orientation: v.orientation,
        patient_id: v.patient_id.clone(),
        series_id: v.series_id.clone(),
    })
}

/// Center-crop axes longer than the target and pad shorter ones with
/// `pad_value`. Odd differences put the extra voxel on the high-index side.
pub fn pad_center_crop(v: &CTVolume, target_shape: [usize; 3], pad_value: f32) -> CTVolume {
    let src_shape = v.shape();
    let mut out = Array3::<f32>::from_elem(target_shape, pad_value);

    // Per axis: source range copied and destination offset.
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut copy_len = [0usize; 3];
    for axis in 0..3 {
        if src_shape[axis] >= target_shape[axis] {
            src_lo[axis] = (src_shape[axis] - target_shape[axis]) / 2;
            dst_lo[axis] = 0;
            copy_len[axis] = target_shape[axis];
        } else {
            src_lo[axis] = 0;
            dst_lo[axis] = (target_shape[axis] - src_shape[axis]) / 2;
            copy_len[axis] = src_shape[axis];
        }
    }

    let src = v.voxels.slice(ndarray::s![
        src_lo[0]..src_lo[0] + copy_len[0],
        src_lo[1]..src_lo[1] + copy_len[1],
        src_lo[2]..src_lo[2] + copy_len[2]
    ]);
    out.slice_mut(ndarray::s![
        dst_lo[0]..dst_lo[0] + copy_len[0],
        dst_lo[1]..dst_lo[1] + copy_len[1],
        dst_lo[2]..dst_lo[2] + copy_len[2]
    ])
    .assign(&src);

    CTVolume {
        voxels: out,
        spacing: v.spacing,
        orientation: v.orientation,
        patient_id: v.patient_id.clone(),
        series_id: v.series_id.clone(),
    }
}

/// Full pipeline: reorient → resample → window → pad/crop.
pub fn preprocess(v: &CTVolume, cfg: &PreprocessConfig) -> Result<CTVolume, VolumeError> {
    cfg.validate()?;
    let v = reorient_to_ras(v)?;
    let v = resample(&v, cfg.target_spacing_mm)?;
    let v = window_normalize(&v, cfg.hu_window)?;
    Ok(pad_center_crop(&v, cfg.target_shape, cfg.pad_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp_volume(shape: [usize; 3], spacing: [f64; 3], orientation: &str) -> CTVolume {
        let voxels = Array3::from_shape_fn(shape, |(i, _, _)| i as f32);
        CTVolume::new(voxels, spacing, Orientation::parse(orientation).unwrap()).unwrap()
    }

    #[test]
    fn reorient_identity_for_ras() {
        let v = ramp_volume([4, 5, 6], [1.0, 1.0, 2.0], "RAS");
        let out = reorient_to_ras(&v).unwrap();
        assert_eq!(out.voxels, v.voxels);
        assert_eq!(out.spacing, v.spacing);
    }

    #[test]
    fn reorient_las_flips_axis0() {
        let v = ramp_volume([4, 5, 6], [1.0, 1.0, 2.0], "LAS");
        let out = reorient_to_ras(&v).unwrap();
        assert!(out.orientation.is_ras());
        for i in 0..4 {
            assert_eq!(out.voxels[[i, 0, 0]], (3 - i) as f32);
        }
    }

    #[test]
    fn reorient_permutes_spacing() {
        // SRA: axis0 → S (anat 2), axis1 → R (anat 0), axis2 → A (anat 1).
        let v = ramp_volume([2, 3, 4], [3.0, 1.0, 2.0], "SRA");
        let out = reorient_to_ras(&v).unwrap();
        assert_eq!(out.shape(), [3, 4, 2]);
        assert_eq!(out.spacing, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn reorient_is_idempotent() {
        let v = ramp_volume([3, 4, 5], [1.0, 2.0, 3.0], "PIL");
        let once = reorient_to_ras(&v).unwrap();
        let twice = reorient_to_ras(&once).unwrap();
        assert_eq!(once.voxels, twice.voxels);
    }

    #[test]
    fn reorient_preserves_value_multiset() {
        let v = ramp_volume([3, 4, 5], [1.0, 2.0, 3.0], "IPR");
        let out = reorient_to_ras(&v).unwrap();
        let mut a: Vec<f32> = v.voxels.iter().copied().collect();
        let mut b: Vec<f32> = out.voxels.iter().copied().collect();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn reorient_rejects_unknown_code() {
        assert!(matches!(
            Orientation::parse("RAX"),
            Err(VolumeError::UnknownOrientation(_))
        ));
        assert!(matches!(
            Orientation::parse("RRS"),
            Err(VolumeError::DegenerateOrientation(_))
        ));
    }

    #[test]
    fn resample_identity_spacing_is_exact() {
        let v = CTVolume::new(
            Array3::from_elem([4, 4, 4], 7.25),
            [1.0, 1.0, 1.0],
            Orientation::RAS,
        )
        .unwrap();
        let out = resample(&v, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.voxels, v.voxels);
    }

    #[test]
    fn resample_preserves_constant() {
        let v = CTVolume::new(
            Array3::from_elem([6, 5, 4], 3.5),
            [2.0, 2.0, 2.0],
            Orientation::RAS,
        )
        .unwrap();
        let out = resample(&v, [1.3, 0.9, 2.7]).unwrap();
        for &x in out.voxels.iter() {
            assert!((x - 3.5).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_halved_spacing_halves_ramp_slope() {
        // Values a*i along axis 0 at spacing 2mm; at 1mm the analytic value at
        // output index j is a*j/2 until the clamped tail.
        let a = 1.5f32;
        let v = CTVolume::new(
            Array3::from_shape_fn([8, 2, 2], |(i, _, _)| a * i as f32),
            [2.0, 1.0, 1.0],
            Orientation::RAS,
        )
        .unwrap();
        let out = resample(&v, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.shape(), [16, 2, 2]);
        for j in 0..16 {
            let x = (j as f64 * 0.5).min(7.0);
            let expect = a * x as f32;
            assert!(
                (out.voxels[[j, 0, 0]] - expect).abs() < 1e-5,
                "j={j}: {} vs {expect}",
                out.voxels[[j, 0, 0]]
            );
        }
    }

    #[test]
    fn resample_rejects_collapsing_axis() {
        let v = ramp_volume([2, 2, 2], [1.0, 1.0, 1.0], "RAS");
        assert!(matches!(
            resample(&v, [1000.0, 1.0, 1.0]),
            Err(VolumeError::EmptyAxis { axis: 0, .. })
        ));
    }

    #[test]
    fn window_maps_endpoints_and_clamps() {
        let vals = [-1000.0f32, 0.0, 1000.0, 2000.0, -1500.0];
        let v = CTVolume::new(
            Array3::from_shape_fn([5, 1, 1], |(i, _, _)| vals[i]),
            [1.0; 3],
            Orientation::RAS,
        )
        .unwrap();
        let out = window_normalize(&v, (-1000.0, 1000.0)).unwrap();
        let expect = [0.0f32, 0.5, 1.0, 1.0, 0.0];
        for i in 0..5 {
            assert!((out.voxels[[i, 0, 0]] - expect[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn window_rejects_non_finite() {
        let v = CTVolume::new(
            Array3::from_elem([2, 2, 2], f32::NAN),
            [1.0; 3],
            Orientation::RAS,
        )
        .unwrap();
        assert!(matches!(
            window_normalize(&v, (-1000.0, 1000.0)),
            Err(VolumeError::NonFiniteVoxel { .. })
        ));
    }

    #[test]
    fn window_is_monotone() {
        let v = CTVolume::new(
            Array3::from_shape_fn([64, 1, 1], |(i, _, _)| -1200.0 + 40.0 * i as f32),
            [1.0; 3],
            Orientation::RAS,
        )
        .unwrap();
        let out = window_normalize(&v, (-1000.0, 1000.0)).unwrap();
        for i in 1..64 {
            assert!(out.voxels[[i, 0, 0]] >= out.voxels[[i - 1, 0, 0]]);
        }
    }

    #[test]
    fn crop_takes_central_subvolume() {
        let v = CTVolume::new(
            Array3::from_shape_fn([10, 10, 10], |(i, j, k)| (i * 100 + j * 10 + k) as f32),
            [1.0; 3],
            Orientation::RAS,
        )
        .unwrap();
        let out = pad_center_crop(&v, [4, 4, 4], 0.0);
        assert_eq!(out.shape(), [4, 4, 4]);
        // 10 → 4 removes 6, split 3 low / 3 high.
        assert_eq!(out.voxels[[0, 0, 0]], v.voxels[[3, 3, 3]]);
        assert_eq!(out.voxels[[3, 3, 3]], v.voxels[[6, 6, 6]]);
    }

    #[test]
    fn pad_centers_data_with_fill() {
        let v = CTVolume::new(
            Array3::from_elem([2, 2, 2], 5.0),
            [1.0; 3],
            Orientation::RAS,
        )
        .unwrap();
        let out = pad_center_crop(&v, [5, 5, 5], -1.0);
        // 5 − 2 = 3 pads: 1 low, 2 high.
        assert_eq!(out.voxels[[0, 0, 0]], -1.0);
        assert_eq!(out.voxels[[1, 1, 1]], 5.0);
        assert_eq!(out.voxels[[2, 2, 2]], 5.0);
        assert_eq!(out.voxels[[3, 3, 3]], -1.0);
        assert_eq!(out.voxels[[4, 4, 4]], -1.0);
    }

    #[test]
    fn pad_crop_identity_when_already_target() {
        let v = ramp_volume([4, 5, 6], [1.0; 3], "RAS");
        let out = pad_center_crop(&v, [4, 5, 6], 0.0);
        assert_eq!(out.voxels, v.voxels);
    }

    #[test]
    fn pad_crop_is_idempotent() {
        let v = ramp_volume([7, 3, 9], [1.0; 3], "RAS");
        let once = pad_center_crop(&v, [5, 5, 5], 0.0);
        let twice = pad_center_crop(&once, [5, 5, 5], 0.0);
        assert_eq!(once.voxels, twice.voxels);
    }

    #[test]
    fn full_pipeline_standardizes_shape_and_range() {
        let v = CTVolume::new(
            Array3::from_shape_fn([40, 30, 20], |(i, j, k)| {
                -1200.0 + (i * j + k) as f32 * 3.0
            }),
            [0.8, 1.1, 2.5],
            Orientation::parse("LPI").unwrap(),
        )
        .unwrap();
        let cfg = PreprocessConfig {
            target_shape: [24, 24, 16],
            ..Default::default()
        };
        let out = preprocess(&v, &cfg).unwrap();
        assert_eq!(out.shape(), [24, 24, 16]);
        assert!(out.orientation.is_ras());
        for &x in out.voxels.iter() {
            assert!((0.0..=1.0).contains(&x));
        }
    }
}
