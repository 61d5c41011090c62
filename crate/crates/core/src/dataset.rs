//! On-disk dataset layout: one PGM raster and one JSON annotation per scene, plus a manifest.
//!
//! ```text
//! <dir>/manifest.json           [{"image": "scene_0000.pgm", "annotation": "scene_0000.json"}, …]
//! <dir>/scene_0000.pgm          P5, maxval 255
//! <dir>/scene_0000.json         {"width": W, "height": H, "boxes": [{"x_min": …, "class_id": …}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GroundTruthBox;
use crate::raster::GrayImage;
use crate::synth::AnnotatedScene;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
}

pub type Manifest = Vec<ManifestEntry>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GroundTruthBox>,
}

pub fn write_dataset(scenes: &[AnnotatedScene], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let image = format!("scene_{i:04}.pgm");
        let annotation = format!("scene_{i:04}.json");
        scene.raster.write_pgm(&dir.join(&image))?;
        let ann = Annotation {
            width: scene.raster.width(),
            height: scene.raster.height(),
            boxes: scene.boxes.clone(),
        };
        write_json(&dir.join(&annotation), &ann)?;
        manifest.push(ManifestEntry { image, annotation });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest
        .iter()
        .map(|entry| read_scene(&dir.join(&entry.image), &dir.join(&entry.annotation)))
        .collect()
}

pub fn read_scene(image: &Path, annotation: &Path) -> Result<AnnotatedScene> {
    let raster = GrayImage::read_pgm(image)?;
    let ann: Annotation = read_json(annotation)?;
    if ann.width != raster.width() || ann.height != raster.height() {
        return Err(Error::Format {
            kind: "annotation",
            path: annotation.to_path_buf(),
            reason: format!(
                "declares {}x{} but raster is {}x{}",
                ann.width,
                ann.height,
                raster.width(),
                raster.height()
            ),
        });
    }
    let scene = AnnotatedScene {
        raster,
        boxes: ann.boxes,
    };
    scene.validate().map_err(|e| Error::Format {
        kind: "annotation",
        path: annotation.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(scene)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(PathBuf::from(path), e))
}
