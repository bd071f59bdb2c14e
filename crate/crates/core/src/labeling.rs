//! First-layer tissue labels from measured CT intensity.

use crate::error::{Error, Result};

/// Voxels at or below this CT intensity (HU) are non-bone.
pub const DEFAULT_BONE_THRESHOLD_HU: f64 = 100.0;

/// Number of tissue classes.
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TissueLabel(u8);

impl TissueLabel {
    pub const NON_BONE: TissueLabel = TissueLabel(0);
    pub const BONE: TissueLabel = TissueLabel(1);

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < N_CLASSES {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!("tissue label {value} not in 0..{N_CLASSES}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// `0` when `y <= threshold`, `1` otherwise.
pub fn label_tissue(y: f64, threshold: f64) -> Result<TissueLabel> {
    if !y.is_finite() {
        return Err(Error::NonFinite("CT intensity"));
    }
    Ok(if y <= threshold { TissueLabel::NON_BONE } else { TissueLabel::BONE })
}
