//! Synthetic large scenes with sparse, clustered objects.
//!
//! Objects are bright filled shapes on a dark noisy background. Each class has its own
//! shape and intensity: even class ids are rectangles, odd ones ellipses, and intensity drops
//! with the class id. Cluster centres are uniform over the image; object centres are uniform
//! in a disk around their cluster centre. Boxes are emitted cluster by cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GroundTruthBox;
use crate::raster::GrayImage;

const BACKGROUND_LEVEL: f64 = 40.0;
const MIN_OBJECT_SIZE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 50;

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn new(min: usize, max: usize) -> Self {
        SizeRange { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_clusters: usize,
    pub objects_per_cluster: SizeRange,
    pub cluster_radius: f64,
    /// One side-length range per class.
    pub object_size: Vec<SizeRange>,
    pub num_classes: usize,
    pub background_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 512,
            height: 512,
            num_clusters: 2,
            objects_per_cluster: SizeRange::new(3, 6),
            cluster_radius: 32.0,
            object_size: vec![
                SizeRange::new(8, 16),
                SizeRange::new(10, 18),
                SizeRange::new(12, 22),
            ],
            num_classes: 3,
            background_noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.validate_for_patch(1)
    }

    /// Validation including the downstream requirement that scenes are at least one patch wide.
    pub fn validate_for_patch(&self, patch_size: usize) -> Result<()> {
        if self.width < patch_size.max(1) {
            return Err(Error::validation(
                "width",
                format!("{} smaller than patch size {patch_size}", self.width),
            ));
        }
        if self.height < patch_size.max(1) {
            return Err(Error::validation(
                "height",
                format!("{} smaller than patch size {patch_size}", self.height),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be at least 1"));
        }
        if self.object_size.len() != self.num_classes {
            return Err(Error::validation(
                "object_size",
                format!(
                    "{} ranges for {} classes",
                    self.object_size.len(),
                    self.num_classes
                ),
            ));
        }
        for r in &self.object_size {
            if r.min < MIN_OBJECT_SIZE {
                return Err(Error::validation(
                    "object_size",
                    format!("minimum {} below {MIN_OBJECT_SIZE} px", r.min),
                ));
            }
            if r.min > r.max {
                return Err(Error::validation("object_size", "empty range"));
            }
        }
        if self.objects_per_cluster.min > self.objects_per_cluster.max {
            return Err(Error::validation("objects_per_cluster", "empty range"));
        }
        if !(self.cluster_radius >= 0.0 && self.cluster_radius.is_finite()) {
            return Err(Error::validation("cluster_radius", "must be finite and >= 0"));
        }
        if !(self.background_noise_sigma >= 0.0 && self.background_noise_sigma.is_finite()) {
            return Err(Error::validation(
                "background_noise_sigma",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    pub raster: GrayImage,
    pub boxes: Vec<GroundTruthBox>,
}

impl AnnotatedScene {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !b.is_ordered() || !b.is_inside(self.raster.width(), self.raster.height()) {
                return Err(Error::validation("boxes", format!("{b:?} outside raster")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

pub fn class_shape(class_id: usize) -> Shape {
    if class_id.is_multiple_of(2) {
        Shape::Rectangle
    } else {
        Shape::Ellipse
    }
}

pub fn class_intensity(class_id: usize) -> f64 {
    (230.0 - 40.0 * class_id as f64).max(120.0)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<AnnotatedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut level = vec![BACKGROUND_LEVEL; w * h];
    let mut boxes: Vec<GroundTruthBox> = Vec::new();

    for _ in 0..spec.num_clusters {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let count = spec.objects_per_cluster.sample(&mut rng);
        for _ in 0..count {
            let class_id = rng.random_range(0..spec.num_classes);
            let ow = spec.object_size[class_id].sample(&mut rng) as f64;
            let oh = spec.object_size[class_id].sample(&mut rng) as f64;
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let rho = spec.cluster_radius * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                // the centre stays on the raster so the clipped shape keeps at least half its size
                let ox = (cx + rho * theta.cos()).clamp(0.0, w as f64 - 1.0);
                let oy = (cy + rho * theta.sin()).clamp(0.0, h as f64 - 1.0);
                let candidate = (ox, oy);
                let free = !boxes.iter().any(|b| overlaps(b, ox, oy, ow, oh));
                placed = Some(candidate);
                if free {
                    break;
                }
            }
            let (ox, oy) = placed.expect("at least one attempt");
            let b = draw_shape(&mut level, w, h, ox, oy, ow, oh, class_id);
            boxes.push(b);
        }
    }

    let noise = Normal::new(0.0, spec.background_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::validation("background_noise_sigma", e.to_string()))?;
    let pixels = level
        .iter()
        .map(|&base| {
            let v = if spec.background_noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(AnnotatedScene {
        raster: GrayImage::from_pixels(w, h, pixels)?,
        boxes,
    })
}

fn overlaps(b: &GroundTruthBox, cx: f64, cy: f64, w: f64, h: f64) -> bool {
    let (x0, x1) = (cx - w / 2.0, cx + w / 2.0);
    let (y0, y1) = (cy - h / 2.0, cy + h / 2.0);
    x0 < b.x_max as f64 && (b.x_min as f64) < x1 && y0 < b.y_max as f64 && (b.y_min as f64) < y1
}

/// Paints one object and returns the box tight to its painted (clipped) pixels.
#[allow(clippy::too_many_arguments)]
fn draw_shape(
    level: &mut [f64],
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class_id: usize,
) -> GroundTruthBox {
    let (rx, ry) = (w / 2.0, h / 2.0);
    let x_lo = (cx - rx).floor().max(0.0) as usize;
    let y_lo = (cy - ry).floor().max(0.0) as usize;
    let x_hi = ((cx + rx).ceil() as usize).min(width);
    let y_hi = ((cy + ry).ceil() as usize).min(height);
    let shape = class_shape(class_id);
    let intensity = class_intensity(class_id);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match shape {
                Shape::Rectangle => (px - cx).abs() <= rx && (py - cy).abs() <= ry,
                Shape::Ellipse => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
            };
            if inside {
                level[y * width + x] = intensity;
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    debug_assert!(bx0 < bx1 && by0 < by1, "shape centred on the raster paints its centre pixel");
    GroundTruthBox {
        x_min: bx0 as i32,
        y_min: by0 as i32,
        x_max: bx1 as i32,
        y_max: by1 as i32,
        class_id,
    }
}

/// `count` scenes with seeds `base.seed, base.seed + 1, …`.
pub fn generate_scenes(base: &SceneSpec, count: usize) -> Result<Vec<AnnotatedScene>> {
    (0..count)
        .map(|i| {
            generate_scene(&SceneSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}
