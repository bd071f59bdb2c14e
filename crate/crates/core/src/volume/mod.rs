//! Dense 3D scalar volumes, per-patient channel bundles, and the voxel
//! sample table built from them.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

mod features;
pub mod io;

pub use features::{assemble, extract_features, extract_features_with, extract_unlabeled, NeighborhoodOrder, SampleTable};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be strictly positive, got {spacing:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::dims("volume payload", expected, data.len()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Value at a possibly out-of-range coordinate, clamping each axis into
    /// the grid (replicate padding).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, z: isize) -> f32 {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.get(c(x, self.dims[0]), c(y, self.dims[1]), c(z, self.dims[2]))
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// One patient's co-registered channels: `d` MR volumes, the CT target and
/// a binary region-of-interest mask.
#[derive(Debug, Clone)]
pub struct PatientDataset {
    pub patient_id: String,
    mr_channels: Vec<Volume>,
    ct: Volume,
    mask: Volume,
}

impl PatientDataset {
    pub fn new(patient_id: impl Into<String>, mr_channels: Vec<Volume>, ct: Volume, mask: Volume) -> Result<Self> {
        if mr_channels.is_empty() {
            return Err(Error::EmptyInput("patient has no MR channels"));
        }
        check_geometry(&mr_channels, &mask)?;
        if !ct.same_geometry(&mask) {
            return Err(geometry_error("CT volume", &mask, &ct));
        }
        check_binary_mask(&mask)?;
        Ok(Self {
            patient_id: patient_id.into(),
            mr_channels,
            ct,
            mask,
        })
    }

    pub fn mr_channels(&self) -> &[Volume] {
        &self.mr_channels
    }

    pub fn ct(&self) -> &Volume {
        &self.ct
    }

    pub fn mask(&self) -> &Volume {
        &self.mask
    }

    /// Number of MR channels `d`.
    pub fn n_channels(&self) -> usize {
        self.mr_channels.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

/// Checks that every MR channel shares the mask's dims and spacing.
pub(crate) fn check_geometry(channels: &[Volume], mask: &Volume) -> Result<()> {
    for (c, v) in channels.iter().enumerate() {
        if !v.same_geometry(mask) {
            return Err(geometry_error(&format!("MR channel {c}"), mask, v));
        }
    }
    Ok(())
}

fn geometry_error(what: &str, reference: &Volume, found: &Volume) -> Error {
    Error::dims(
        what.to_string(),
        format!("{:?} @ {:?}", reference.dims(), reference.spacing()),
        format!("{:?} @ {:?}", found.dims(), found.spacing()),
    )
}

pub(crate) fn check_binary_mask(mask: &Volume) -> Result<()> {
    match mask.data().iter().position(|&m| m != 0.0 && m != 1.0) {
        Some(index) => Err(Error::NonBinaryMask {
            value: mask.data()[index],
            index,
        }),
        None => Ok(()),
    }
}
