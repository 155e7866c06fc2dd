use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical field of view of a patch: `fov = size × mpp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    fov_microns: f64,
    patch_size_px: usize,
    resolution_mpp: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Field of view in microns of a `patch_size_px` patch at `resolution_mpp`.
pub fn fov_of(patch_size_px: usize, resolution_mpp: f64) -> Result<f64> {
    check_positive("patch size", patch_size_px as f64)?;
    check_positive("resolution", resolution_mpp)?;
    Ok(patch_size_px as f64 * resolution_mpp)
}

/// Pixel extent covering `fov_microns` at `mpp`, rounded to the nearest
/// pixel, with the signed remainder `fov/mpp − extent`.
pub fn pixel_extent_of(fov_microns: f64, mpp: f64) -> Result<(usize, f64)> {
    check_positive("field of view", fov_microns)?;
    check_positive("resolution", mpp)?;
    let exact = fov_microns / mpp;
    let px = exact.round();
    if px < 1.0 {
        return Err(Error::Parameter(format!(
            "field of view {fov_microns} µm is below one pixel at {mpp} mpp"
        )));
    }
    Ok((px as usize, exact - px))
}

impl PatchSpec {
    pub fn from_size(patch_size_px: usize, resolution_mpp: f64) -> Result<Self> {
        Ok(PatchSpec {
            fov_microns: fov_of(patch_size_px, resolution_mpp)?,
            patch_size_px,
            resolution_mpp,
        })
    }

    /// Spec with the given field of view rendered at `patch_size_px`; the
    /// resolution follows from the identity.
    pub fn from_fov(fov_microns: f64, patch_size_px: usize) -> Result<Self> {
        check_positive("field of view", fov_microns)?;
        check_positive("patch size", patch_size_px as f64)?;
        Ok(PatchSpec {
            fov_microns,
            patch_size_px,
            resolution_mpp: fov_microns / patch_size_px as f64,
        })
    }

    pub fn fov_microns(&self) -> f64 {
        self.fov_microns
    }

    pub fn patch_size_px(&self) -> usize {
        self.patch_size_px
    }

    pub fn resolution_mpp(&self) -> f64 {
        self.resolution_mpp
    }

    /// Crop extent in slide pixels for a slide rendered at `slide_mpp`.
    pub fn crop_extent(&self, slide_mpp: f64) -> Result<usize> {
        Ok(pixel_extent_of(self.fov_microns, slide_mpp)?.0)
    }
}

/// Named dataset presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "PKGH-toy-224")]
    Toy224,
    #[serde(rename = "PKGH-toy-336")]
    Toy336,
}

impl Preset {
    pub const TRAIN_PX: usize = 32;

    pub fn fov(self) -> f64 {
        match self {
            Preset::Toy224 => 224.0,
            Preset::Toy336 => 336.0,
        }
    }

    pub fn spec(self) -> PatchSpec {
        PatchSpec::from_fov(self.fov(), Self::TRAIN_PX).expect("preset")
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy224 => "PKGH-toy-224",
            Preset::Toy336 => "PKGH-toy-336",
        }
    }
}
