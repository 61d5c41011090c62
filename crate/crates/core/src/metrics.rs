//! Result assembly (translation + NMS) and evaluation: gate precision/recall, average precision
//! and sweep tables.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, GroundTruthBox};
use crate::tiler::to_global;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Ranking used by NMS and AP: score descending, then `x_min`, `y_min`, class, `x_max`, `y_max`
/// ascending. A total order, so results never depend on input order.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy class-wise non-maximum suppression: a detection is dropped when a higher-ranked kept
/// detection of the same class overlaps it with IoU strictly above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    let mut kept_by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for d in sorted {
        let same = kept_by_class.entry(d.class_id).or_default();
        if same
            .iter()
            .all(|&k| iou(&kept[k].bbox, &d.bbox) <= iou_threshold)
        {
            same.push(kept.len());
            kept.push(d);
        }
    }
    kept
}

/// Maps per-patch detections to scene coordinates, concatenates them and applies NMS.
pub fn merge_scene(per_patch: &[((usize, usize), Vec<Detection>)], iou_threshold: f64) -> Vec<Detection> {
    let all: Vec<Detection> = per_patch
        .iter()
        .flat_map(|(origin, dets)| dets.iter().map(move |d| to_global(d, *origin)))
        .collect();
    nms(&all, iou_threshold)
}

/// Ground truth of one patch for gate evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchTruth {
    /// Identifiers of the objects assigned to this patch, unique across the evaluated set.
    pub object_ids: Vec<usize>,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub filtered_patches: usize,
    pub correctly_filtered: usize,
    pub objects_lost: usize,
    pub total_objects: usize,
    pub total_patches: usize,
    pub precision: f64,
    pub recall: f64,
    pub skip_ratio: f64,
}

/// Gate precision = correctly filtered / filtered; recall = 1 − lost objects / objects, where an
/// object is lost only when every patch it was assigned to was filtered.
pub fn gate_report(patches: &[PatchTruth], total_objects: usize) -> GateReport {
    let filtered_patches = patches.iter().filter(|p| !p.passed).count();
    let correctly_filtered = patches
        .iter()
        .filter(|p| !p.passed && p.object_ids.is_empty())
        .count();
    let mut survives: HashMap<usize, bool> = HashMap::new();
    for p in patches {
        for &id in &p.object_ids {
            *survives.entry(id).or_insert(false) |= p.passed;
        }
    }
    let objects_lost = survives.values().filter(|&&s| !s).count();
    let total_patches = patches.len();
    GateReport {
        filtered_patches,
        correctly_filtered,
        objects_lost,
        total_objects,
        total_patches,
        precision: if filtered_patches == 0 {
            1.0
        } else {
            correctly_filtered as f64 / filtered_patches as f64
        },
        recall: if total_objects == 0 {
            1.0
        } else {
            1.0 - objects_lost as f64 / total_objects as f64
        },
        skip_ratio: if total_patches == 0 {
            0.0
        } else {
            filtered_patches as f64 / total_patches as f64
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub curve: Vec<PrCurvePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// Classes with at least one ground-truth box, ascending by id.
    pub per_class: Vec<ClassAp>,
    /// Mean of `per_class` APs in `[0, 1]`; 0 when there is no ground truth.
    pub map: f64,
}

/// Average precision for a single image.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], iou_match: f64) -> ApResult {
    evaluate_dataset(&[(dets.to_vec(), gts.to_vec())], iou_match)
}

/// Average precision pooled over images: detections are ranked jointly, each is greedily matched
/// to the best-overlapping still-unmatched ground truth of its class in its own image, and AP is
/// the area under the all-point interpolated precision/recall curve.
pub fn evaluate_dataset(images: &[(Vec<Detection>, Vec<GroundTruthBox>)], iou_match: f64) -> ApResult {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let per_class: Vec<ClassAp> = classes
        .into_iter()
        .map(|class_id| class_ap(images, class_id, iou_match))
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    ApResult { per_class, map }
}

fn class_ap(images: &[(Vec<Detection>, Vec<GroundTruthBox>)], class_id: usize, iou_match: f64) -> ClassAp {
    let gts: Vec<Vec<BBox>> = images
        .iter()
        .map(|(_, g)| {
            g.iter()
                .filter(|b| b.class_id == class_id)
                .map(GroundTruthBox::to_bbox)
                .collect()
        })
        .collect();
    let num_gt: usize = gts.iter().map(Vec::len).sum();

    let mut ranked: Vec<(usize, Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(img, (dets, _))| {
            dets.iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (img, *d))
        })
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(ib))
            .then(rank_order(a, b))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (img, det) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if matched[*img][j] {
                continue;
            }
            let o = iou(&det.bbox, g);
            if o >= iou_match && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                matched[*img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push(PrCurvePoint {
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    ClassAp {
        class_id,
        num_gt,
        ap: interpolated_area(&curve),
        curve,
    }
}

/// Area under the precision envelope (precision made monotone non-increasing in recall).
fn interpolated_area(curve: &[PrCurvePoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        area += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    area
}

/// One row of a threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub skip_ratio: f64,
    pub gate_precision: f64,
    pub gate_recall: f64,
    /// Mean AP in percentage points.
    #[serde(rename = "mAP")]
    pub map: f64,
    pub fps: f64,
}

pub const SWEEP_CSV_HEADER: &str = "threshold,skip_ratio,gate_precision,gate_recall,mAP,fps";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.4},{:.3}",
            r.threshold, r.skip_ratio, r.gate_precision, r.gate_recall, r.map, r.fps
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Serialised form of a detection in scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
    pub score: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        let r = |v: f64| (v * 1e4).round() / 1e4;
        DetectionRecord {
            x_min: r(d.bbox.x_min),
            y_min: r(d.bbox.y_min),
            x_max: r(d.bbox.x_max),
            y_max: r(d.bbox.y_max),
            class_id: d.class_id,
            score: (d.score * 1e6).round() / 1e6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            },
            class_id,
            score,
        }
    }

    fn gt(x0: i32, y0: i32, x1: i32, y1: i32, class_id: usize) -> GroundTruthBox {
        GroundTruthBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            class_id,
        }
    }

    #[test]
    fn nms_keeps_best_duplicate() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.8);
        let b = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        assert_eq!(nms(&[a, b], 0.1), vec![b]);
    }

    #[test]
    fn nms_is_class_wise_and_keeps_disjoint() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.8);
        let b = det(0.0, 0.0, 10.0, 10.0, 1, 0.9);
        let c = det(50.0, 50.0, 60.0, 60.0, 0, 0.7);
        assert_eq!(nms(&[a, b, c], 0.1).len(), 3);
    }

    #[test]
    fn merge_suppresses_cross_patch_duplicates() {
        let p0 = ((0, 0), vec![det(100.0, 100.0, 110.0, 110.0, 0, 0.9)]);
        let p1 = ((104, 0), vec![det(-4.0, 100.0, 6.0, 110.0, 0, 0.8)]);
        let merged = merge_scene(&[p0, p1], 0.1);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].score, 0.9);
    }

    #[test]
    fn gate_report_arithmetic() {
        // 100 filtered, 94 of them empty
        let mut patches: Vec<PatchTruth> = (0..94)
            .map(|_| PatchTruth {
                object_ids: vec![],
                passed: false,
            })
            .collect();
        patches.extend((0..6).map(|i| PatchTruth {
            object_ids: vec![i],
            passed: false,
        }));
        let r = gate_report(&patches, 200);
        assert!((r.precision - 0.94).abs() < 1e-12);
        assert_eq!(r.objects_lost, 6);
    }

    #[test]
    fn gate_report_nothing_filtered() {
        let patches = vec![
            PatchTruth {
                object_ids: vec![0],
                passed: true,
            },
            PatchTruth {
                object_ids: vec![],
                passed: true,
            },
        ];
        let r = gate_report(&patches, 1);
        assert_eq!((r.precision, r.recall, r.skip_ratio), (1.0, 1.0, 0.0));
    }

    #[test]
    fn object_in_a_passed_overlap_is_not_lost() {
        let patches = vec![
            PatchTruth {
                object_ids: vec![7],
                passed: false,
            },
            PatchTruth {
                object_ids: vec![7],
                passed: true,
            },
        ];
        let r = gate_report(&patches, 1);
        assert_eq!(r.objects_lost, 0);
        assert_eq!(r.precision, 0.0);
    }

    #[test]
    fn perfect_and_empty_ap() {
        let gts = vec![gt(0, 0, 10, 10, 0), gt(20, 20, 30, 30, 1)];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                bbox: g.to_bbox(),
                class_id: g.class_id,
                score: 1.0,
            })
            .collect();
        assert_eq!(average_precision(&dets, &gts, 0.5).map, 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5).map, 0.0);
        assert_eq!(average_precision(&dets, &[], 0.5).map, 0.0);
    }

    #[test]
    fn five_detections_three_gt() {
        // ranked: TP, FP, TP, FP, TP -> precision 1, 1/2, 2/3, 2/4, 3/5 at recall 1/3, 1/3, 2/3, 2/3, 1
        let gts = vec![gt(0, 0, 10, 10, 0), gt(20, 0, 30, 10, 0), gt(40, 0, 50, 10, 0)];
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0, 0.9),
            det(100.0, 0.0, 110.0, 10.0, 0, 0.8),
            det(20.0, 0.0, 30.0, 10.0, 0, 0.7),
            det(0.0, 0.0, 10.0, 10.0, 0, 0.6),
            det(40.0, 0.0, 50.0, 10.0, 0, 0.5),
        ];
        let want = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((average_precision(&dets, &gts, 0.5).map - want).abs() < 1e-12);
    }

    #[test]
    fn csv_header() {
        let csv = sweep_csv(&[SweepRow {
            threshold: 0.5,
            skip_ratio: 0.25,
            gate_precision: 1.0,
            gate_recall: 1.0,
            map: 50.0,
            fps: 10.0,
        }]);
        assert!(csv.starts_with("threshold,skip_ratio,gate_precision,gate_recall,mAP,fps\n0.5"));
    }
}
