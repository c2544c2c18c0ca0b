//! COCO results files: a JSON array of detections.
//!
//! Besides the standard `image_id`, `category_id`, `bbox` and `score`, a
//! record may carry `score_vector` and `det_id`. Records without a `det_id`
//! are keyed by their zero-based position in the array. Unknown fields are
//! kept and written back unchanged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rescore::RescoreOutput;
use crate::types::{BBox, ClassId, Detection, ImageId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawRecord {
    image_id: ImageId,
    category_id: ClassId,
    bbox: BBox,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    det_id: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_raw: Option<f64>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// One record of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub detection: Detection,
    pub score_raw: Option<f64>,
    det_id_field: Option<Value>,
    extra: Map<String, Value>,
}

impl ResultRecord {
    pub fn new(detection: Detection) -> Self {
        let det_id_field = Some(Value::String(detection.det_id.clone()));
        ResultRecord {
            detection,
            score_raw: None,
            det_id_field,
            extra: Map::new(),
        }
    }

    fn from_raw(raw: RawRecord, position: usize) -> Result<Self> {
        let det_id = match &raw.det_id {
            None => position.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(Error::InvalidDetection {
                    det_id: position.to_string(),
                    reason: format!("det_id must be a string or number, got {other}"),
                })
            }
        };
        let detection = Detection {
            image_id: raw.image_id,
            det_id,
            class_id: raw.category_id,
            bbox: raw.bbox,
            score: raw.score,
            score_vector: raw.score_vector,
        };
        Ok(ResultRecord {
            detection,
            score_raw: raw.score_raw,
            det_id_field: raw.det_id,
            extra: raw.extra,
        })
    }

    fn to_raw(&self) -> RawRecord {
        let d = &self.detection;
        RawRecord {
            image_id: d.image_id.clone(),
            category_id: d.class_id,
            bbox: d.bbox,
            score: d.score,
            score_vector: d.score_vector.clone(),
            det_id: self.det_id_field.clone(),
            score_raw: self.score_raw,
            extra: self.extra.clone(),
        }
    }
}

/// Parses a results array.
pub fn results_from_json_str(text: &str, context: &str) -> Result<Vec<ResultRecord>> {
    let raw: Vec<RawRecord> = serde_json::from_str(text).map_err(|source| Error::Parse {
        context: context.to_string(),
        source,
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| ResultRecord::from_raw(r, i))
        .collect()
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    results_from_json_str(&text, &path.display().to_string())
}

pub fn results_to_json(records: &[ResultRecord]) -> String {
    let raw: Vec<RawRecord> = records.iter().map(ResultRecord::to_raw).collect();
    serde_json::to_string_pretty(&raw).expect("results serialize")
}

pub fn write_results(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = results_to_json(records);
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn detections(records: &[ResultRecord]) -> Vec<Detection> {
    records.iter().map(|r| r.detection.clone()).collect()
}

/// Copies re-scored values into the records they came from, recording the
/// pre-fusion score in `score_raw`. `output` must be in record order.
pub fn apply_rescore(records: &[ResultRecord], output: &RescoreOutput) -> Result<Vec<ResultRecord>> {
    if records.len() != output.detections.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} records but {} re-scored detections",
            records.len(),
            output.detections.len()
        )));
    }
    records
        .iter()
        .zip(&output.detections)
        .map(|(rec, out)| {
            if rec.detection.det_id != out.detection.det_id {
                return Err(Error::ShapeMismatch(format!(
                    "record {} paired with detection {}",
                    rec.detection.det_id, out.detection.det_id
                )));
            }
            let mut r = rec.clone();
            r.detection = out.detection.clone();
            r.score_raw = Some(out.score_raw);
            Ok(r)
        })
        .collect()
}
