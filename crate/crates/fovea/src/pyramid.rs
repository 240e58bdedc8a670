//! Multi-scale image pyramids: one image resized to the low-res base plus a
//! ladder of strictly increasing high-res scales, each patchified on a
//! regular grid.

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub base: RasterImage,
    /// Resized copy at the low-res side (square).
    pub low_res: RasterImage,
    /// Resized copies at each scale side, strictly increasing.
    pub scales: Vec<RasterImage>,
    pub patch_side: usize,
}

impl ImagePyramid {
    /// Resize `base` to the low-res side and every scale side. Sides must be
    /// divisible by `patch_side` and strictly increasing.
    pub fn build(
        base: &RasterImage,
        low_res_side: usize,
        patch_side: usize,
        scale_sides: &[usize],
    ) -> Result<ImagePyramid> {
        validate_sides(low_res_side, patch_side, scale_sides)?;
        let low_res = base.resize_area(low_res_side, low_res_side);
        let scales = scale_sides
            .iter()
            .map(|&s| base.resize_area(s, s))
            .collect();
        Ok(ImagePyramid {
            base: base.clone(),
            low_res,
            scales,
            patch_side,
        })
    }

    /// Assemble a pyramid from pre-made levels. Used by tests that hold the
    /// low-res or aux input fixed while perturbing a single scale.
    pub fn from_levels(
        base: RasterImage,
        low_res: RasterImage,
        scales: Vec<RasterImage>,
        patch_side: usize,
    ) -> Result<ImagePyramid> {
        if low_res.width != low_res.height {
            return Err(Error::Dimension("low-res level must be square".into()));
        }
        let sides: Vec<usize> = scales.iter().map(|s| s.width).collect();
        for s in &scales {
            if s.width != s.height {
                return Err(Error::Dimension("scale levels must be square".into()));
            }
        }
        validate_sides(low_res.width, patch_side, &sides)?;
        Ok(ImagePyramid {
            base,
            low_res,
            scales,
            patch_side,
        })
    }

    pub fn low_grid(&self) -> usize {
        self.low_res.width / self.patch_side
    }

    /// Patch-grid side at each scale: scale side / patch side.
    pub fn scale_grids(&self) -> Vec<usize> {
        self.scales
            .iter()
            .map(|s| s.width / self.patch_side)
            .collect()
    }

    pub fn cells_per_scale(&self) -> Vec<usize> {
        self.scale_grids().iter().map(|g| g * g).collect()
    }

    /// Flattened pixels of every patch of the low-res level, row-major over
    /// the patch grid; each row is one patch in (y, x, channel) order.
    pub fn low_res_patches<T: Scalar>(&self) -> Tensor<T> {
        patchify(&self.low_res, self.patch_side, None)
    }

    /// Flattened pixels of selected patches (by grid index, ascending) at
    /// scale `scale_idx`.
    pub fn scale_patches<T: Scalar>(&self, scale_idx: usize, indices: &[usize]) -> Tensor<T> {
        patchify(&self.scales[scale_idx], self.patch_side, Some(indices))
    }
}

fn validate_sides(low_res_side: usize, patch_side: usize, scale_sides: &[usize]) -> Result<()> {
    if patch_side == 0 || low_res_side == 0 {
        return Err(Error::Dimension("zero patch or image side".into()));
    }
    if low_res_side % patch_side != 0 {
        return Err(Error::Dimension(format!(
            "low-res side {low_res_side} not divisible by patch side {patch_side}"
        )));
    }
    let mut prev = low_res_side;
    for &s in scale_sides {
        if s % patch_side != 0 {
            return Err(Error::Dimension(format!(
                "scale side {s} not divisible by patch side {patch_side}"
            )));
        }
        if s <= prev {
            return Err(Error::Dimension(format!(
                "scale sides must be strictly increasing: {s} after {prev}"
            )));
        }
        prev = s;
    }
    Ok(())
}

fn patchify<T: Scalar>(img: &RasterImage, patch_side: usize, indices: Option<&[usize]>) -> Tensor<T> {
    let grid = img.width / patch_side;
    let patch_dim = patch_side * patch_side * 3;
    let all: Vec<usize>;
    let idxs: &[usize] = match indices {
        Some(i) => i,
        None => {
            all = (0..grid * grid).collect();
            &all
        }
    };
    let mut data = Vec::with_capacity(idxs.len() * patch_dim);
    for &idx in idxs {
        let py = idx / grid;
        let px = idx % grid;
        for y in 0..patch_side {
            for x in 0..patch_side {
                let p = img.pixel(px * patch_side + x, py * patch_side + y);
                data.push(T::from_f64(f64::from(p[0])));
                data.push(T::from_f64(f64::from(p[1])));
                data.push(T::from_f64(f64::from(p[2])));
            }
        }
    }
    Tensor::new(vec![idxs.len(), patch_dim], data).expect("patchify shape consistent")
}
