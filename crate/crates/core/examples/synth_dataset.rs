//! Generates a synthetic dataset on disk and reports how sparse it is.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir] [num_scenes]
//! ```

use std::path::PathBuf;

use gated_detect::dataset::{read_dataset, write_dataset};
use gated_detect::synth::{generate_scenes, SceneSpec};
use gated_detect::tiler::{crop_patches, TilePlan};

fn main() -> gated_detect::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gated-detect-synth"));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let spec = SceneSpec::default();
    let scenes = generate_scenes(&spec, n)?;
    write_dataset(&scenes, &out)?;
    assert_eq!(read_dataset(&out)?, scenes);

    let (mut patches, mut empty) = (0, 0);
    for s in &scenes {
        for p in crop_patches(s, &TilePlan::for_scene(s, 128, 104)?)? {
            patches += 1;
            empty += p.boxes.is_empty() as usize;
        }
    }
    let objects: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    println!("wrote {n} scenes ({objects} objects) to {}", out.display());
    println!(
        "{empty}/{patches} patches ({:.1}%) contain no object centre",
        100.0 * empty as f64 / patches as f64
    );

    for k in [1, 2, 4, 8] {
        let spec = SceneSpec { num_clusters: k, ..spec.clone() };
        let (mut t, mut e) = (0, 0);
        for s in generate_scenes(&spec, n)? {
            for p in crop_patches(&s, &TilePlan::for_scene(&s, 128, 104)?)? {
                t += 1;
                e += p.boxes.is_empty() as usize;
            }
        }
        println!("  {k} clusters per scene: {:.1}% empty", 100.0 * e as f64 / t as f64);
    }
    Ok(())
}
