//! Fusion-weight sweeps: re-score at each weight and evaluate.

use rayon::prelude::*;
use serde::Serialize;

use crate::cocoio::{AnnotationSet, ClassPartition};
use crate::error::{Error, Result};
use crate::eval::{coco_map, ApReport, EvalParams};
use crate::fmt::g17;
use crate::rescore::{FusionParams, PreparedRescore};
use crate::types::Detection;

/// `n` evenly spaced weights from 0 to 1.
pub fn unit_grid(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::param("grid", "needs at least one point")),
        1 => Ok(vec![1.0]),
        _ => Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub c: f64,
    pub nap: f64,
    pub nap50: f64,
}

/// Re-scores and evaluates once per weight in `grid`.
///
/// Rows report novel-class AP when the partition has novel classes with
/// ground truth, and AP over all classes otherwise.
pub fn sweep_c(
    prepared: &PreparedRescore,
    base: &FusionParams,
    gt: &AnnotationSet,
    partition: Option<&ClassPartition>,
    grid: &[f64],
    params: &EvalParams,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::param("grid", "needs at least one point"));
    }
    grid.par_iter()
        .map(|&c| {
            let report = evaluate_at(prepared, &base.with_c(c)?, gt, partition, params)?;
            let s = report.novel.as_ref().unwrap_or(&report.overall);
            Ok(SweepRow {
                c,
                nap: s.ap,
                nap50: s.ap50,
            })
        })
        .collect()
}

/// Fuses at `fusion` and evaluates the result.
pub fn evaluate_at(
    prepared: &PreparedRescore,
    fusion: &FusionParams,
    gt: &AnnotationSet,
    partition: Option<&ClassPartition>,
    params: &EvalParams,
) -> Result<ApReport> {
    let out = prepared.apply(fusion)?;
    let dets: Vec<Detection> = out.detections.into_iter().map(|r| r.detection).collect();
    coco_map(&dets, gt, partition, params)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("c,nap,nap50\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", g17(r.c), g17(r.nap), g17(r.nap50)));
    }
    out
}
