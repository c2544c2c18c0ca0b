//! COCO-style box evaluation: IoU, greedy matching, 101-point
//! interpolated AP over IoU thresholds 0.50:0.05:0.95.
//!
//! Differences from the reference COCO tool: no area ranges, no
//! per-image detection cap unless `max_dets` is set, and crowd ground truth
//! is left out entirely. Score ties are broken by ascending `det_id`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::cocoio::{AnnotationSet, ClassPartition};
use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::types::{BBox, ClassId, Detection, ImageId};

pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Intersection over union of two `[x, y, w, h]` boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Detection ordering used everywhere: score descending, then `det_id`.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.det_id.cmp(&b.det_id))
}

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    /// Index into the input detection slice.
    pub det: usize,
    /// Matched ground truth, `None` for a false positive.
    pub gt: Option<usize>,
}

impl Match {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// Greedy one-to-one matching for one image and class.
///
/// Detections are visited in [`detection_order`]; each takes the unmatched
/// ground truth with the highest IoU at or above `iou_thr` (lowest index on
/// ties). Results come back in visiting order.
pub fn match_detections(dets: &[&Detection], gts: &[BBox], iou_thr: f64) -> Vec<Match> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(dets[i], dets[j]));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou(&dets[di].bbox, g);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            Match {
                det: di,
                gt: best.map(|(gi, _)| gi),
            }
        })
        .collect()
}

/// 101-point interpolated precision for a ranked TP/FP sequence.
///
/// Entry `r` is the best precision reached at any recall `>= r / 100`.
pub fn interpolated_precision(tp: &[bool], n_gt: usize) -> Vec<f64> {
    let mut out = vec![0.0; RECALL_POINTS];
    if n_gt == 0 || tp.is_empty() {
        return out;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        recall.push(ntp as f64 / n_gt as f64);
        precision.push(ntp as f64 / (ntp + nfp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    for (r, slot) in out.iter_mut().enumerate() {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            *slot = precision[idx];
        }
    }
    out
}

/// Mean of the 101 interpolated precisions. Zero when `n_gt` is zero.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    interpolated_precision(tp, n_gt).iter().sum::<f64>() / RECALL_POINTS as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalParams {
    /// Highest-scoring detections kept per image and class; unlimited when `None`.
    pub max_dets: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub name: String,
    pub n_gt: usize,
    /// Mean over IoU 0.50:0.95; `None` without ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Classes with ground truth that entered the mean.
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub class_id: ClassId,
    pub iou_threshold: f64,
    /// Interpolated precision at recall 0.00, 0.01, ..., 1.00.
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub classes: Vec<ClassAp>,
    pub overall: ApSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<ApSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel: Option<ApSummary>,
    pub pr_curves: Vec<PrCurve>,
}

impl ApReport {
    pub fn class(&self, id: ClassId) -> Option<&ClassAp> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// CSV `class_id,ap,ap50` over classes with ground truth.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,ap,ap50\n");
        for c in &self.classes {
            if let (Some(ap), Some(ap50)) = (c.ap, c.ap50) {
                out.push_str(&format!("{},{},{}\n", c.class_id, g17(ap), g17(ap50)));
            }
        }
        out
    }
}

fn summarize(classes: &[ClassAp], keep: impl Fn(ClassId) -> bool) -> Option<ApSummary> {
    let used: Vec<&ClassAp> = classes.iter().filter(|c| c.n_gt > 0 && keep(c.class_id)).collect();
    if used.is_empty() {
        return None;
    }
    let n = used.len() as f64;
    let mean = |f: fn(&ClassAp) -> Option<f64>| used.iter().filter_map(|c| f(c)).sum::<f64>() / n;
    Some(ApSummary {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        n_classes: used.len(),
    })
}

/// Evaluates `dets` against the non-crowd ground truth of `gt`.
///
/// Detections on unknown images or classes are ignored. Class means skip
/// classes without ground truth; with a partition, base and novel means are
/// reported too.
pub fn coco_map(
    dets: &[Detection],
    gt: &AnnotationSet,
    partition: Option<&ClassPartition>,
    params: &EvalParams,
) -> Result<ApReport> {
    let images: HashSet<&ImageId> = gt.images.iter().map(|i| &i.id).collect();
    let class_ids: BTreeSet<ClassId> = gt.categories.iter().map(|c| c.id).collect();

    let mut gt_boxes: HashMap<ClassId, BTreeMap<&ImageId, Vec<BBox>>> = HashMap::new();
    for a in gt.annotations.iter().filter(|a| !a.iscrowd) {
        gt_boxes
            .entry(a.category_id)
            .or_default()
            .entry(&a.image_id)
            .or_default()
            .push(a.bbox);
    }
    let mut det_groups: HashMap<ClassId, BTreeMap<&ImageId, Vec<&Detection>>> = HashMap::new();
    for d in dets {
        if images.contains(&d.image_id) && class_ids.contains(&d.class_id) {
            det_groups
                .entry(d.class_id)
                .or_default()
                .entry(&d.image_id)
                .or_default()
                .push(d);
        }
    }
    for per_image in det_groups.values_mut() {
        for group in per_image.values_mut() {
            group.sort_by(|a, b| detection_order(a, b));
            if let Some(m) = params.max_dets {
                group.truncate(m);
            }
        }
    }

    let thresholds = iou_thresholds();
    let n_gt = |c: ClassId| gt_boxes.get(&c).map_or(0, |m| m.values().map(Vec::len).sum::<usize>());
    let empty_gt = BTreeMap::new();
    let empty_det = BTreeMap::new();

    let jobs: Vec<(ClassId, usize)> = gt
        .categories
        .iter()
        .filter(|c| n_gt(c.id) > 0)
        .flat_map(|c| (0..thresholds.len()).map(move |t| (c.id, t)))
        .collect();
    let curves: Vec<PrCurve> = jobs
        .par_iter()
        .map(|&(class, t)| {
            let gts = gt_boxes.get(&class).unwrap_or(&empty_gt);
            let per_image = det_groups.get(&class).unwrap_or(&empty_det);
            let mut ranked: Vec<(&Detection, bool)> = Vec::new();
            for (image, group) in per_image {
                let boxes = gts.get(image).map(Vec::as_slice).unwrap_or(&[]);
                for m in match_detections(group, boxes, thresholds[t]) {
                    ranked.push((group[m.det], m.is_tp()));
                }
            }
            ranked.sort_by(|a, b| detection_order(a.0, b.0));
            let tp: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            PrCurve {
                class_id: class,
                iou_threshold: thresholds[t],
                precision: interpolated_precision(&tp, n_gt(class)),
            }
        })
        .collect();

    let mut ap_at: HashMap<ClassId, Vec<f64>> = HashMap::new();
    for c in &curves {
        ap_at
            .entry(c.class_id)
            .or_default()
            .push(c.precision.iter().sum::<f64>() / RECALL_POINTS as f64);
    }
    let classes: Vec<ClassAp> = gt
        .categories
        .iter()
        .map(|c| {
            let aps = ap_at.get(&c.id);
            ClassAp {
                class_id: c.id,
                name: c.name.clone(),
                n_gt: n_gt(c.id),
                ap: aps.map(|v| v.iter().sum::<f64>() / v.len() as f64),
                ap50: aps.map(|v| v[0]),
                ap75: aps.map(|v| v[5]),
            }
        })
        .collect();

    let overall = summarize(&classes, |_| true).ok_or(Error::NoGroundTruth)?;
    let (base, novel) = match partition {
        Some(p) => (
            summarize(&classes, |c| p.base.contains(&c)),
            summarize(&classes, |c| p.novel.contains(&c)),
        ),
        None => (None, None),
    };
    Ok(ApReport {
        classes,
        overall,
        base,
        novel,
        pr_curves: curves,
    })
}

/// Per-class and summary differences `b - a` between two reports on the
/// same ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDelta {
    pub rows: Vec<DeltaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    /// Class id, or `mean`, `base`, `novel` for summary rows.
    pub label: String,
    pub ap_a: f64,
    pub ap_b: f64,
    pub delta_ap: f64,
    pub ap50_a: f64,
    pub ap50_b: f64,
    pub delta_ap50: f64,
}

impl DeltaRow {
    fn new(label: String, (ap_a, ap50_a): (f64, f64), (ap_b, ap50_b): (f64, f64)) -> Self {
        DeltaRow {
            label,
            ap_a,
            ap_b,
            delta_ap: ap_b - ap_a,
            ap50_a,
            ap50_b,
            delta_ap50: ap50_b - ap50_a,
        }
    }
}

pub fn compare_reports(a: &ApReport, b: &ApReport) -> Result<ReportDelta> {
    let mut rows = Vec::new();
    for ca in &a.classes {
        let cb = b
            .class(ca.class_id)
            .ok_or_else(|| Error::ShapeMismatch(format!("class {} missing from second report", ca.class_id)))?;
        if let (Some(ap_a), Some(ap50_a), Some(ap_b), Some(ap50_b)) = (ca.ap, ca.ap50, cb.ap, cb.ap50) {
            rows.push(DeltaRow::new(ca.class_id.to_string(), (ap_a, ap50_a), (ap_b, ap50_b)));
        }
    }
    rows.push(DeltaRow::new(
        "mean".into(),
        (a.overall.ap, a.overall.ap50),
        (b.overall.ap, b.overall.ap50),
    ));
    for (label, sa, sb) in [("base", &a.base, &b.base), ("novel", &a.novel, &b.novel)] {
        if let (Some(sa), Some(sb)) = (sa, sb) {
            rows.push(DeltaRow::new(label.into(), (sa.ap, sa.ap50), (sb.ap, sb.ap50)));
        }
    }
    Ok(ReportDelta { rows })
}

impl ReportDelta {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,ap_a,ap_b,delta_ap,ap50_a,ap50_b,delta_ap50\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                g17(r.ap_a),
                g17(r.ap_b),
                g17(r.delta_ap),
                g17(r.ap50_a),
                g17(r.ap50_b),
                g17(r.delta_ap50)
            ));
        }
        out
    }
}
