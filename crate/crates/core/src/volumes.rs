//! Volumetric images and binary masks with physical voxel spacing, plus NIfTI-1 I/O.
//!
//! Voxels are addressed as `(x, y, z)` with `z` the slice axis. Storage is
//! x-fastest, the same order NIfTI uses on disk.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::{IntoNdArray, NiftiError, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Dims = [usize; 3];

/// Millimetres per voxel along x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Spacing([sx, sy, sz]);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in self.0.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::domain(format!(
                    "spacing along axis {axis} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_volume_mm3(&self) -> Result<f64> {
        voxel_volume_mm3(self.0)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0, 1.0, 1.0])
    }
}

/// Volume of one voxel in mm³.
pub fn voxel_volume_mm3(spacing: [f64; 3]) -> Result<f64> {
    Spacing(spacing).validate()?;
    Ok(spacing[0] * spacing[1] * spacing[2])
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn coords_of(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let yz = idx / dims[0];
    [x, yz % dims[1], yz / dims[1]]
}

/// Orientation header fields carried through load/save without interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
    pub qfac: f32,
}

impl Orientation {
    /// Scanner-aligned axes scaled by the voxel spacing.
    pub fn axis_aligned(spacing: Spacing) -> Self {
        let [sx, sy, sz] = spacing.0;
        Orientation {
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 6],
            srow: [
                [sx as f32, 0.0, 0.0, 0.0],
                [0.0, sy as f32, 0.0, 0.0],
                [0.0, 0.0, sz as f32, 0.0],
            ],
            qfac: 1.0,
        }
    }

    fn from_header(h: &NiftiHeader) -> Self {
        Orientation {
            qform_code: h.qform_code,
            sform_code: h.sform_code,
            quatern: [
                h.quatern_b,
                h.quatern_c,
                h.quatern_d,
                h.quatern_x,
                h.quatern_y,
                h.quatern_z,
            ],
            srow: [h.srow_x, h.srow_y, h.srow_z],
            qfac: h.pixdim[0],
        }
    }

    fn apply(&self, h: &mut NiftiHeader) {
        h.qform_code = self.qform_code;
        h.sform_code = self.sform_code;
        [
            h.quatern_b,
            h.quatern_c,
            h.quatern_d,
            h.quatern_x,
            h.quatern_y,
            h.quatern_z,
        ] = self.quatern;
        h.srow_x = self.srow[0];
        h.srow_y = self.srow[1];
        h.srow_z = self.srow[2];
        h.pixdim[0] = if self.qfac == 0.0 { 1.0 } else { self.qfac };
    }
}

/// 3D scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume<T> {
    data: Vec<T>,
    dims: Dims,
    spacing: Spacing,
    orientation: Orientation,
}

impl<T: Scalar> ImageVolume<T> {
    pub fn new(data: Vec<T>, dims: Dims, spacing: Spacing) -> Result<Self> {
        let orientation = Orientation::axis_aligned(spacing);
        Self::with_orientation(data, dims, spacing, orientation)
    }

    pub fn with_orientation(
        data: Vec<T>,
        dims: Dims,
        spacing: Spacing,
        orientation: Orientation,
    ) -> Result<Self> {
        spacing.validate()?;
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let [x, y, z] = coords_of(dims, i);
            return Err(Error::domain(format!(
                "non-finite intensity at voxel ({x}, {y}, {z})"
            )));
        }
        Ok(ImageVolume {
            data,
            dims,
            spacing,
            orientation,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        Self::new(vec![value; voxel_count(dims)], dims, spacing)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Rebuild with new data on the same grid; the data must stay finite.
    pub fn map_data(&self, data: Vec<T>) -> Result<Self> {
        Self::with_orientation(data, self.dims, self.spacing, self.orientation.clone())
    }

    /// `(min, max)` intensity.
    pub fn range(&self) -> (T, T) {
        self.data.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    /// Min-max rescale into `[0, 1]`; a constant volume maps to zeros.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = self.range();
        let span = hi - lo;
        let data = if span > T::zero() {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![T::zero(); self.data.len()]
        };
        ImageVolume {
            data,
            dims: self.dims,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageVolume<U> {
        ImageVolume {
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            dims: self.dims,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
        }
    }

    pub fn is_aligned_with(&self, mask: &LabelMask) -> bool {
        self.dims == mask.dims && same_spacing(self.spacing, mask.spacing)
    }
}

/// Binary mask aligned to an [`ImageVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    data: Vec<u8>,
    dims: Dims,
    spacing: Spacing,
    orientation: Orientation,
}

impl LabelMask {
    pub fn new(data: Vec<u8>, dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::with_orientation(data, dims, spacing, Orientation::axis_aligned(spacing))
    }

    pub fn with_orientation(
        data: Vec<u8>,
        dims: Dims,
        spacing: Spacing,
        orientation: Orientation,
    ) -> Result<Self> {
        spacing.validate()?;
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            let [x, y, z] = coords_of(dims, i);
            return Err(Error::domain(format!(
                "mask value {} at voxel ({x}, {y}, {z}) is not 0 or 1",
                data[i]
            )));
        }
        Ok(LabelMask {
            data,
            dims,
            spacing,
            orientation,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(vec![0; voxel_count(dims)], dims, spacing)
    }

    /// Empty mask on the same grid as `volume`.
    pub fn zeros_like<T: Scalar>(volume: &ImageVolume<T>) -> Self {
        LabelMask {
            data: vec![0; volume.data.len()],
            dims: volume.dims,
            spacing: volume.spacing,
            orientation: volume.orientation.clone(),
        }
    }

    /// Mask built from a predicate over linear indices, on the grid of `self`.
    pub fn from_fn_like(&self, mut f: impl FnMut(usize) -> bool) -> Self {
        LabelMask {
            data: (0..self.data.len()).map(|i| f(i) as u8).collect(),
            dims: self.dims,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = on as u8;
    }

    #[inline]
    pub fn is_set(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates of every foreground voxel, in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| coords_of(dims, i))
    }

    pub fn is_aligned_with(&self, other: &LabelMask) -> bool {
        self.dims == other.dims && same_spacing(self.spacing, other.spacing)
    }
}

fn same_spacing(a: Spacing, b: Spacing) -> bool {
    a.0.iter()
        .zip(b.0.iter())
        .all(|(p, q)| (p - q).abs() <= 1e-6 * p.abs().max(q.abs()))
}

fn check_dims(dims: Dims, len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::domain(format!("zero-sized dimension in {dims:?}")));
    }
    if voxel_count(dims) != len {
        return Err(Error::shape(format!(
            "dims {dims:?} imply {} voxels but data has {len}",
            voxel_count(dims)
        )));
    }
    Ok(())
}

fn map_nifti_err(path: &Path, e: NiftiError) -> Error {
    match e {
        NiftiError::Io(io)
            if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::InvalidData) =>
        {
            Error::format(format!("{}: truncated or corrupt file ({io})", path.display()))
        }
        NiftiError::Io(io) => Error::io(path, io),
        NiftiError::MissingVolumeFile(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

struct RawNifti {
    data: Vec<f64>,
    dims: Dims,
    spacing: Spacing,
    orientation: Orientation,
}

/// Shortest decimal that round-trips through the f32 header field, so a
/// spacing of 1.4 mm reads back as exactly `1.4f64`.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn read_nifti(path: &Path) -> Result<RawNifti> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| map_nifti_err(path, e))?;
    let header = obj.header().clone();
    let rank = header.dim[0] as usize;
    if rank < 3 || header.dim[4..=rank.min(7)].iter().any(|&d| d > 1) {
        return Err(Error::format(format!(
            "{}: expected a 3D volume, header dim = {:?}",
            path.display(),
            &header.dim[..=rank.min(7)]
        )));
    }
    let datatype = header
        .data_type()
        .map_err(|e| map_nifti_err(path, e))?;
    if matches!(
        datatype,
        NiftiType::Rgb24 | NiftiType::Rgba32 | NiftiType::Complex64 | NiftiType::Complex128 | NiftiType::Complex256
    ) {
        return Err(Error::format(format!(
            "{}: non-scalar payload type {datatype:?}",
            path.display()
        )));
    }
    let dims = [
        header.dim[1] as usize,
        header.dim[2] as usize,
        header.dim[3] as usize,
    ];
    let spacing = Spacing([
        widen(header.pixdim[1]),
        widen(header.pixdim[2]),
        widen(header.pixdim[3]),
    ]);
    spacing
        .validate()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| map_nifti_err(path, e))?;
    // logical index [x, y, z, ...]; reversing the axes makes x vary fastest
    let data: Vec<f64> = arr.t().iter().copied().collect();
    if data.len() != voxel_count(dims) {
        return Err(Error::format(format!(
            "{}: payload has {} values for dims {dims:?}",
            path.display(),
            data.len()
        )));
    }
    Ok(RawNifti {
        data,
        dims,
        spacing,
        orientation: Orientation::from_header(&header),
    })
}

fn header_for(spacing: Spacing, orientation: &Orientation) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0; 8];
    h.pixdim[1] = spacing.0[0] as f32;
    h.pixdim[2] = spacing.0[1] as f32;
    h.pixdim[3] = spacing.0[2] as f32;
    // NIFTI_UNITS_MM
    h.xyzt_units = 2;
    orientation.apply(&mut h);
    h
}

fn check_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    Ok(())
}

macro_rules! write_payload {
    ($path:expr, $dims:expr, $data:expr, $header:expr) => {{
        let path: &Path = $path;
        check_parent(path)?;
        let dims: Dims = $dims;
        let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]).f(), $data)
            .map_err(|e| Error::shape(e.to_string()))?;
        nifti::writer::WriterOptions::new(path)
            .reference_header($header)
            .write_nifti(&arr)
            .map_err(|e| map_nifti_err(path, e))
    }};
}

/// Load a 3D scalar NIfTI-1 image (`.nii` or `.nii.gz`), widening to floating point.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageVolume<T>> {
    let path = path.as_ref();
    let raw = read_nifti(path)?;
    let data: Vec<T> = raw.data.iter().map(|&v| T::lit(v)).collect();
    ImageVolume::with_orientation(data, raw.dims, raw.spacing, raw.orientation)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Write a volume with a float32 payload.
pub fn save_volume<T: Scalar>(volume: &ImageVolume<T>, path: impl AsRef<Path>) -> Result<()> {
    let header = header_for(volume.spacing, &volume.orientation);
    let data: Vec<f32> = volume.data.iter().map(|v| v.as_f64() as f32).collect();
    write_payload!(path.as_ref(), volume.dims, data, &header)
}

/// Load a binary mask; any value other than 0 or 1 is a format error.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let raw = read_nifti(path)?;
    let mut data = Vec::with_capacity(raw.data.len());
    for (i, &v) in raw.data.iter().enumerate() {
        if v == 0.0 {
            data.push(0);
        } else if v == 1.0 {
            data.push(1);
        } else {
            let [x, y, z] = coords_of(raw.dims, i);
            return Err(Error::format(format!(
                "{}: mask value {v} at ({x}, {y}, {z}) is not 0 or 1",
                path.display()
            )));
        }
    }
    LabelMask::with_orientation(data, raw.dims, raw.spacing, raw.orientation)
}

/// Write a mask with a uint8 payload.
pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let header = header_for(mask.spacing, &mask.orientation);
    write_payload!(path.as_ref(), mask.dims, mask.data.clone(), &header)
}
