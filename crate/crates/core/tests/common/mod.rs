//! Brute-force oracles and random instance generators shared by the integration tests.
//!
//! Each oracle is written from the definition, independently of the library code it checks.

#![allow(dead_code)]

use gated_detect::geometry::{BBox, GroundTruthBox};
use gated_detect::metrics::{Detection, PatchTruth};
use rand::Rng;

pub fn random_gt(rng: &mut impl Rng, extent: i32, classes: usize) -> GroundTruthBox {
    let w = rng.random_range(1..=extent.min(40));
    let h = rng.random_range(1..=extent.min(40));
    let x = rng.random_range(0..=extent - w);
    let y = rng.random_range(0..=extent - h);
    GroundTruthBox {
        x_min: x,
        y_min: y,
        x_max: x + w,
        y_max: y + h,
        class_id: rng.random_range(0..classes),
    }
}

/// Scores come from a coarse grid so ties are common.
pub fn random_detection(rng: &mut impl Rng, extent: f64, classes: usize) -> Detection {
    let w = rng.random_range(2.0..extent / 3.0);
    let h = rng.random_range(2.0..extent / 3.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    Detection {
        bbox: BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        },
        class_id: rng.random_range(0..classes),
        score: rng.random_range(1..=10) as f64 / 10.0,
    }
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Tests every (cell, box centre) pair for containment in the cell's half-open square.
pub fn center_oracle(boxes: &[GroundTruthBox], patch: usize, grid: usize) -> Vec<bool> {
    let g = patch as f64 / grid as f64;
    let mut out = vec![false; grid * grid];
    for row in 0..grid {
        for col in 0..grid {
            let (x0, y0) = (col as f64 * g, row as f64 * g);
            out[row * grid + col] = boxes.iter().any(|b| {
                let cx = (b.x_min + b.x_max) as f64 / 2.0;
                let cy = (b.y_min + b.y_max) as f64 / 2.0;
                x0 <= cx && cx < x0 + g && y0 <= cy && cy < y0 + g
            });
        }
    }
    out
}

/// IoF labels by counting covered unit pixels; requires an integer cell size.
pub fn iof_oracle(boxes: &[GroundTruthBox], patch: usize, grid: usize, hi: f64, lo: f64) -> (Vec<bool>, Vec<bool>) {
    assert_eq!(patch % grid, 0);
    let g = patch / grid;
    let mut target = vec![false; grid * grid];
    let mut ignore = vec![false; grid * grid];
    for row in 0..grid {
        for col in 0..grid {
            let mut best = 0.0f64;
            for b in boxes {
                let mut covered = 0usize;
                for py in row * g..(row + 1) * g {
                    for px in col * g..(col + 1) * g {
                        let (x, y) = (px as i32, py as i32);
                        if b.x_min <= x && x < b.x_max && b.y_min <= y && y < b.y_max {
                            covered += 1;
                        }
                    }
                }
                best = best.max(covered as f64 / (g * g) as f64);
            }
            let i = row * grid + col;
            if best >= hi {
                target[i] = true;
            } else if best >= lo {
                ignore[i] = true;
            }
        }
    }
    (target, ignore)
}

fn precedes(a: &Detection, b: &Detection) -> bool {
    (
        -a.score,
        a.bbox.x_min,
        a.bbox.y_min,
        a.class_id as f64,
        a.bbox.x_max,
        a.bbox.y_max,
    ) < (
        -b.score,
        b.bbox.x_min,
        b.bbox.y_min,
        b.class_id as f64,
        b.bbox.x_max,
        b.bbox.y_max,
    )
}

/// O(n²) suppression: a detection survives iff no earlier-ranked survivor of its class
/// overlaps it with IoU above the threshold.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    // insertion sort keeps the oracle free of library comparators
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && precedes(&order[j], &order[j - 1]) {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if !kept
            .iter()
            .any(|k| k.class_id == d.class_id && oracle_iou(&k.bbox, &d.bbox) > thr)
        {
            kept.push(d);
        }
    }
    kept
}

/// Per class: rank by score, match each detection to the best unmatched ground truth with
/// IoU ≥ `thr`, then AP = Σ over true positives of (1/#gt) · max precision at that rank or later.
pub fn map_oracle(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let class_gts: Vec<BBox> = gts.iter().filter(|g| g.class_id == c).map(|g| g.to_bbox()).collect();
        let mut ranked: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut matched = vec![false; class_gts.len()];
        let mut tp_flags = Vec::new();
        for d in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in class_gts.iter().enumerate() {
                let o = oracle_iou(&d.bbox, g);
                if !matched[i] && o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            if let Some((i, _)) = best {
                matched[i] = true;
            }
            tp_flags.push(best.is_some());
        }
        let mut precision = Vec::new();
        let mut tp = 0;
        for (k, &flag) in tp_flags.iter().enumerate() {
            tp += flag as usize;
            precision.push(tp as f64 / (k + 1) as f64);
        }
        let mut ap = 0.0;
        for (k, &flag) in tp_flags.iter().enumerate() {
            if flag {
                let best_later = precision[k..].iter().cloned().fold(0.0, f64::max);
                ap += best_later / class_gts.len() as f64;
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

/// `(filtered, correctly_filtered, objects_lost)` by recounting per object.
pub fn gate_oracle(patches: &[PatchTruth], total_objects: usize) -> (usize, usize, usize) {
    let filtered = patches.iter().filter(|p| !p.passed).count();
    let correct = patches.iter().filter(|p| !p.passed && p.object_ids.is_empty()).count();
    let mut lost = 0;
    for id in 0..total_objects {
        let containing: Vec<&PatchTruth> = patches.iter().filter(|p| p.object_ids.contains(&id)).collect();
        if !containing.is_empty() && containing.iter().all(|p| !p.passed) {
            lost += 1;
        }
    }
    (filtered, correct, lost)
}

/// Random patch truths where every object appears in one to three patches.
pub fn random_patch_truths(rng: &mut impl Rng) -> (Vec<PatchTruth>, usize) {
    let n_patches = rng.random_range(1..30);
    let n_objects = rng.random_range(0..40);
    let mut patches: Vec<PatchTruth> = (0..n_patches)
        .map(|_| PatchTruth {
            object_ids: Vec::new(),
            passed: rng.random_bool(0.5),
        })
        .collect();
    for id in 0..n_objects {
        for _ in 0..rng.random_range(1..=3) {
            let p = rng.random_range(0..n_patches);
            if !patches[p].object_ids.contains(&id) {
                patches[p].object_ids.push(id);
            }
        }
    }
    (patches, n_objects)
}

/// Mismatch counts of every oracle over `instances` random cases each.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<(&'static str, usize)> {
    use gated_detect::metrics::{gate_report, nms};
    use gated_detect::oan::{assign_center, assign_iof};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut bad = 0;
    for _ in 0..instances {
        let grid = [1, 2, 4, 8, 16][rng.random_range(0..5)];
        let patch = grid * rng.random_range(1..=16);
        let boxes: Vec<_> = (0..rng.random_range(0..8))
            .map(|_| random_gt(&mut rng, patch as i32, 3))
            .collect();
        if assign_center(&boxes, patch, grid).unwrap().target != center_oracle(&boxes, patch, grid) {
            bad += 1;
        }
    }
    out.push(("center assignment", bad));

    let mut bad = 0;
    for _ in 0..instances {
        let grid = [1, 2, 4, 8][rng.random_range(0..4)];
        let patch = grid * rng.random_range(2..=12);
        let boxes: Vec<_> = (0..rng.random_range(0..6))
            .map(|_| random_gt(&mut rng, patch as i32, 2))
            .collect();
        let l = assign_iof(&boxes, patch, grid, 0.5, 0.1).unwrap();
        if (l.target, l.ignore) != iof_oracle(&boxes, patch, grid, 0.5, 0.1) {
            bad += 1;
        }
    }
    out.push(("IoF assignment", bad));

    let mut bad = 0;
    for _ in 0..instances {
        let dets: Vec<_> = (0..rng.random_range(0..50))
            .map(|_| random_detection(&mut rng, 100.0, 3))
            .collect();
        let thr = rng.random_range(0.0..0.8);
        if nms(&dets, thr) != nms_oracle(&dets, thr) {
            bad += 1;
        }
    }
    out.push(("NMS", bad));

    let mut bad = 0;
    for _ in 0..instances {
        let gts: Vec<_> = (0..rng.random_range(0..6))
            .map(|_| random_gt(&mut rng, 60, 2))
            .collect();
        // detections near the ground truth so matches actually happen
        let dets: Vec<Detection> = (0..rng.random_range(0..=10))
            .map(|_| {
                let mut d = random_detection(&mut rng, 60.0, 2);
                d.score = rng.random_range(0.0..1.0);
                if let Some(g) = (!gts.is_empty()).then(|| gts[rng.random_range(0..gts.len())]) {
                    let j = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-3.0..3.0);
                    d.bbox = BBox {
                        x_min: g.x_min as f64 + j(&mut rng),
                        y_min: g.y_min as f64 + j(&mut rng),
                        x_max: g.x_max as f64 + j(&mut rng),
                        y_max: g.y_max as f64 + j(&mut rng),
                    };
                    if !(d.bbox.x_min < d.bbox.x_max && d.bbox.y_min < d.bbox.y_max) {
                        d.bbox.x_max = d.bbox.x_min + 1.0;
                        d.bbox.y_max = d.bbox.y_min + 1.0;
                    }
                    if rng.random_bool(0.7) {
                        d.class_id = g.class_id;
                    }
                }
                d
            })
            .collect();
        let got = gated_detect::metrics::average_precision(&dets, &gts, 0.5).map;
        if (got - map_oracle(&dets, &gts, 0.5)).abs() > 1e-12 {
            bad += 1;
        }
    }
    out.push(("average precision", bad));

    let mut bad = 0;
    for _ in 0..instances {
        let (patches, total) = random_patch_truths(&mut rng);
        let r = gate_report(&patches, total);
        let (filtered, correct, lost) = gate_oracle(&patches, total);
        let precision = if filtered == 0 { 1.0 } else { correct as f64 / filtered as f64 };
        let recall = if total == 0 { 1.0 } else { 1.0 - lost as f64 / total as f64 };
        if (r.filtered_patches, r.correctly_filtered, r.objects_lost) != (filtered, correct, lost)
            || r.precision != precision
            || r.recall != recall
        {
            bad += 1;
        }
    }
    out.push(("gate report", bad));
    out
}
