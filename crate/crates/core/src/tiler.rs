//! Sliding-window decomposition of large scenes into fixed-size overlapping patches.
//!
//! Windows advance by `stride` and the last window on each axis is clamped to end exactly at the
//! image border, so a 29200 × 27620 image cut into 1024-px windows at stride 824 yields
//! 36 × 34 = 1224 patches. Images smaller than a patch produce a single zero-padded window.

use crate::error::{Error, Result};
use crate::geometry::GroundTruthBox;
use crate::metrics::Detection;
use crate::raster::GrayImage;
use crate::synth::AnnotatedScene;

/// Window origins along one axis.
pub fn plan_tiles(extent: usize, patch_size: usize, stride: usize) -> Result<Vec<usize>> {
    if patch_size == 0 {
        return Err(Error::validation("patch_size", "must be positive"));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::validation(
            "stride",
            format!("{stride} outside [1, {patch_size}]"),
        ));
    }
    if extent == 0 {
        return Err(Error::validation("extent", "must be positive"));
    }
    if extent <= patch_size {
        return Ok(vec![0]);
    }
    let last = extent - patch_size;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("0 is always present") != last {
        origins.push(last);
    }
    Ok(origins)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub patch_size: usize,
    pub stride: usize,
    pub origins_x: Vec<usize>,
    pub origins_y: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl TilePlan {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        Ok(TilePlan {
            patch_size,
            stride,
            origins_x: plan_tiles(width, patch_size, stride)?,
            origins_y: plan_tiles(height, patch_size, stride)?,
            width,
            height,
        })
    }

    pub fn for_scene(scene: &AnnotatedScene, patch_size: usize, stride: usize) -> Result<Self> {
        Self::new(scene.raster.width(), scene.raster.height(), patch_size, stride)
    }

    pub fn len(&self) -> usize {
        self.origins_x.len() * self.origins_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origins in row-major order (y outer, x inner).
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.origins_y
            .iter()
            .flat_map(move |&y| self.origins_x.iter().map(move |&x| (x, y)))
    }

    fn covers(&self, origin: usize, coord: f64) -> bool {
        origin as f64 <= coord && coord < (origin + self.patch_size) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub origin: (usize, usize),
    pub raster: GrayImage,
    /// Boxes whose centre lies in this patch, translated and clipped to patch coordinates.
    pub boxes: Vec<GroundTruthBox>,
    /// Index into the scene's box list for each entry of `boxes`.
    pub object_ids: Vec<usize>,
}

impl PatchSample {
    pub fn is_valid(&self) -> bool {
        !self.boxes.is_empty()
    }
}

pub fn crop_patches(scene: &AnnotatedScene, plan: &TilePlan) -> Result<Vec<PatchSample>> {
    if plan.width != scene.raster.width() || plan.height != scene.raster.height() {
        return Err(Error::validation(
            "plan",
            format!(
                "planned for {}x{}, scene is {}x{}",
                plan.width,
                plan.height,
                scene.raster.width(),
                scene.raster.height()
            ),
        ));
    }
    let p = plan.patch_size;
    Ok(plan
        .origins()
        .map(|(x0, y0)| {
            let raster = scene.raster.crop_padded(x0, y0, p, p);
            let mut boxes = Vec::new();
            let mut object_ids = Vec::new();
            for (id, b) in scene.boxes.iter().enumerate() {
                let (cx, cy) = b.center();
                if plan.covers(x0, cx) && plan.covers(y0, cy) {
                    let local = b.translated(-(x0 as i32), -(y0 as i32));
                    if let Some(c) = local.clipped(p, p) {
                        boxes.push(c);
                        object_ids.push(id);
                    }
                }
            }
            PatchSample {
                origin: (x0, y0),
                raster,
                boxes,
                object_ids,
            }
        })
        .collect())
}

/// Patch-to-scene coordinate mapping; score and class are unchanged.
pub fn to_global(det: &Detection, origin: (usize, usize)) -> Detection {
    Detection {
        bbox: det.bbox.translated(origin.0 as f64, origin.1 as f64),
        ..*det
    }
}
