//! Brute-force evaluator, random scene generator and t-quantile table
//! shared by the tests.

#![allow(dead_code, clippy::excessive_precision)]

use std::collections::BTreeMap;

use rand::Rng;
use riscore::cocoio::{Annotation, AnnotationSet, Category, ImageInfo};
use riscore::types::{BBox, ClassId, Detection, ImageId};

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    if a1 <= b0 || b1 <= a0 {
        0.0
    } else {
        a1.min(b1) - a0.max(b0)
    }
}

pub fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x, a.x + a.w, b.x, b.x + b.w) * overlap(a.y, a.y + a.h, b.y, b.y + b.h);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// TP flags in ranking order for one class at one threshold.
pub fn brute_flags(dets: &[&Detection], gts: &[(ImageId, BBox)], thr: f64) -> Vec<bool> {
    let mut ranked: Vec<&Detection> = dets.to_vec();
    ranked.sort_by(|a, b| {
        if a.score != b.score {
            b.score.partial_cmp(&a.score).unwrap()
        } else {
            a.det_id.cmp(&b.det_id)
        }
    });
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for d in ranked {
        let mut pick: Option<usize> = None;
        let mut pick_iou = 0.0;
        for (gi, (img, g)) in gts.iter().enumerate() {
            if used[gi] || *img != d.image_id {
                continue;
            }
            let v = brute_iou(&d.bbox, g);
            if v < thr {
                continue;
            }
            if pick.is_none() || v > pick_iou {
                pick = Some(gi);
                pick_iou = v;
            }
        }
        if let Some(gi) = pick {
            used[gi] = true;
        }
        flags.push(pick.is_some());
    }
    flags
}

/// Interpolated precision straight from the definition.
pub fn brute_ap(flags: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub struct BruteReport {
    /// class -> (AP@[.5:.95], AP50, AP75)
    pub classes: BTreeMap<ClassId, (f64, f64, f64)>,
    pub mean: (f64, f64, f64),
}

pub fn brute_evaluate(dets: &[Detection], gt: &AnnotationSet) -> Option<BruteReport> {
    let mut classes = BTreeMap::new();
    for cat in &gt.categories {
        let gts: Vec<(ImageId, BBox)> = gt
            .annotations
            .iter()
            .filter(|a| a.category_id == cat.id && !a.iscrowd)
            .map(|a| (a.image_id.clone(), a.bbox))
            .collect();
        if gts.is_empty() {
            continue;
        }
        let mine: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.class_id == cat.id && gt.images.iter().any(|i| i.id == d.image_id))
            .collect();
        let aps: Vec<f64> = (0..10)
            .map(|i| brute_ap(&brute_flags(&mine, &gts, 0.5 + 0.05 * i as f64), gts.len()))
            .collect();
        classes.insert(cat.id, (aps.iter().sum::<f64>() / 10.0, aps[0], aps[5]));
    }
    if classes.is_empty() {
        return None;
    }
    let n = classes.len() as f64;
    let mean = classes.values().fold((0.0, 0.0, 0.0), |acc, v| {
        (acc.0 + v.0 / n, acc.1 + v.1 / n, acc.2 + v.2 / n)
    });
    Some(BruteReport { classes, mean })
}

/// A random scene: up to 4 images, at most `max_classes` classes and 10
/// ground-truth boxes per image, on an integer grid so overlaps and exact
/// ties are common. Scores come from a small set to force ties.
pub fn random_scene<R: Rng>(rng: &mut R, max_classes: usize) -> (AnnotationSet, Vec<Detection>) {
    let n_classes = rng.gen_range(1..=max_classes);
    let n_images = rng.gen_range(1..=4);
    let mut set = AnnotationSet {
        categories: (1..=n_classes as ClassId)
            .map(|id| Category {
                id,
                name: format!("c{id}"),
                supercategory: None,
                split: None,
            })
            .collect(),
        ..AnnotationSet::default()
    };
    let mut dets = Vec::new();
    let rand_box = |rng: &mut R| {
        let x = rng.gen_range(0..16) as f64;
        let y = rng.gen_range(0..16) as f64;
        BBox::new(x, y, rng.gen_range(1..8) as f64, rng.gen_range(1..8) as f64)
    };
    for img in 1..=n_images {
        let image_id = ImageId::from_int(img);
        set.images.push(ImageInfo {
            id: image_id.clone(),
            width: 24,
            height: 24,
            file_name: None,
        });
        for _ in 0..rng.gen_range(0..=10) {
            let class = rng.gen_range(1..=n_classes as ClassId);
            let b = rand_box(rng);
            set.annotations.push(Annotation {
                id: set.annotations.len() as u64 + 1,
                image_id: image_id.clone(),
                category_id: class,
                bbox: b,
                iscrowd: false,
                area: None,
            });
            for _ in 0..rng.gen_range(0..=2) {
                let jb = BBox::new(
                    b.x + rng.gen_range(-1..=1) as f64,
                    b.y + rng.gen_range(-1..=1) as f64,
                    (b.w + rng.gen_range(-1..=1) as f64).max(1.0),
                    (b.h + rng.gen_range(-1..=1) as f64).max(1.0),
                );
                let c = if rng.gen_bool(0.8) {
                    class
                } else {
                    rng.gen_range(1..=n_classes as ClassId)
                };
                let score = rng.gen_range(1..=10) as f64 / 10.0;
                dets.push(Detection::new(
                    image_id.clone(),
                    format!("d{}", dets.len()),
                    c,
                    jb,
                    score,
                ));
            }
        }
        for _ in 0..rng.gen_range(0..=3) {
            let c = rng.gen_range(1..=n_classes as ClassId);
            let score = rng.gen_range(1..=10) as f64 / 10.0;
            let b = rand_box(rng);
            dets.push(Detection::new(
                image_id.clone(),
                format!("d{}", dets.len()),
                c,
                b,
                score,
            ));
        }
    }
    (set, dets)
}

/// Two-sided 95% Student-t quantiles for 1..=30 degrees of freedom,
/// evaluated with 40-digit arithmetic.
pub const T975: [f64; 30] = [
    12.706204736174704646,
    4.3026527297494638523,
    3.1824463052837095927,
    2.7764451051977943578,
    2.5705818356363155147,
    2.4469118511449699711,
    2.3646242515927853417,
    2.3060041352041666833,
    2.2621571627982055426,
    2.2281388519862747484,
    2.2009851600916398679,
    2.1788128296672288663,
    2.1603686564627925015,
    2.1447866879178038287,
    2.1314495455597756821,
    2.1199052992212546745,
    2.1098155778333170859,
    2.1009220402410384881,
    2.0930240544083097692,
    2.0859634472658648427,
    2.0796138447276803951,
    2.0738730679040261658,
    2.0686576104190486515,
    2.0638985616280258492,
    2.0595385527532977489,
    2.0555294386428732135,
    2.0518305164802855562,
    2.0484071417952451599,
    2.0452296421327042982,
    2.0422724563012383100,
];

/// Mean and 95% interval from the table.
pub fn t_interval(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = T975[values.len() - 2] * (var / n).sqrt();
    (mean, mean - half, mean + half)
}
