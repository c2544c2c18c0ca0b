//! Shared domain types: boxes, identifiers and detections.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// COCO category id.
pub type ClassId = u64;

/// Axis-aligned box in COCO `[x, y, w, h]` pixel layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when the box has finite coordinates and strictly positive extent.
    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Image identifier.
///
/// COCO files usually carry integer ids, but some exporters write strings.
/// The id compares by its textual form and serializes back in the form it
/// was read.
#[derive(Clone)]
pub struct ImageId {
    text: String,
    numeric: bool,
}

impl ImageId {
    pub fn from_int(id: u64) -> Self {
        ImageId {
            text: id.to_string(),
            numeric: true,
        }
    }

    pub fn from_text(id: impl Into<String>) -> Self {
        ImageId {
            text: id.into(),
            numeric: false,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl PartialEq for ImageId {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for ImageId {}

impl std::hash::Hash for ImageId {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl PartialOrd for ImageId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ImageId {
    // Numeric ids first, in numeric order; then everything else by text.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        match (self.text.parse::<u64>(), other.text.parse::<u64>()) {
            (Ok(a), Ok(b)) => a.cmp(&b).then_with(|| self.text.cmp(&other.text)),
            (Ok(_), Err(_)) => Ordering::Less,
            (Err(_), Ok(_)) => Ordering::Greater,
            (Err(_), Err(_)) => self.text.cmp(&other.text),
        }
    }
}

impl fmt::Debug for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.text)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for ImageId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.text.parse::<u64>() {
            Ok(n) if self.numeric => serializer.serialize_u64(n),
            _ => serializer.serialize_str(&self.text),
        }
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct IdVisitor;

        impl Visitor<'_> for IdVisitor {
            type Value = ImageId;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or a string image id")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ImageId, E> {
                Ok(ImageId::from_int(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ImageId, E> {
                u64::try_from(v)
                    .map(ImageId::from_int)
                    .map_err(|_| E::custom(format!("negative image id {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<ImageId, E> {
                Ok(ImageId::from_text(v))
            }
        }

        deserializer.deserialize_any(IdVisitor)
    }
}

/// One detector output.
///
/// `score_vector`, when present, is indexed by the position of each class in
/// the active [`ClassMap`](crate::rescore::ClassMap), not by raw class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub det_id: String,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
    pub score_vector: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(image_id: ImageId, det_id: impl Into<String>, class_id: ClassId, bbox: BBox, score: f64) -> Self {
        Detection {
            image_id,
            det_id: det_id.into(),
            class_id,
            bbox,
            score,
            score_vector: None,
        }
    }

    pub fn with_score_vector(mut self, v: Vec<f64>) -> Self {
        self.score_vector = Some(v);
        self
    }
}
