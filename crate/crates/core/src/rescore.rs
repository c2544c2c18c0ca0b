//! Score fusion between detector class scores and embedding similarity.
//!
//! The fused score is `c * s_detector + (1 - c) * s_similarity`. With
//! `skip_base` set, base classes keep their detector score untouched.
//! Re-scoring only changes scores; labels, boxes and ids pass through.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::embedding::{l2_normalize, similarity_scores, EmbeddingMatrix, ScoreMatrix, SimilarityParams};
use crate::error::{Error, Result};
use crate::types::{ClassId, Detection};

/// Default detector weight.
pub const DEFAULT_FUSION_WEIGHT: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    c: f64,
    skip_base: bool,
    base_class_ids: BTreeSet<ClassId>,
}

impl FusionParams {
    /// Plain fusion with detector weight `c`.
    pub fn new(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::param("c", format!("must lie in [0, 1], got {c}")));
        }
        Ok(FusionParams {
            c,
            skip_base: false,
            base_class_ids: BTreeSet::new(),
        })
    }

    /// Fusion that leaves `base_class_ids` at their detector score.
    pub fn skipping_base(c: f64, base_class_ids: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let mut p = Self::new(c)?;
        p.base_class_ids = base_class_ids.into_iter().collect();
        if p.base_class_ids.is_empty() {
            return Err(Error::param(
                "base_class_ids",
                "must be non-empty when skipping base classes",
            ));
        }
        p.skip_base = true;
        Ok(p)
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn skip_base(&self) -> bool {
        self.skip_base
    }

    pub fn base_class_ids(&self) -> &BTreeSet<ClassId> {
        &self.base_class_ids
    }

    /// Returns a copy with a different detector weight.
    pub fn with_c(&self, c: f64) -> Result<Self> {
        let mut p = Self::new(c)?;
        p.skip_base = self.skip_base;
        p.base_class_ids = self.base_class_ids.clone();
        Ok(p)
    }

    fn skips(&self, class: ClassId) -> bool {
        self.skip_base && self.base_class_ids.contains(&class)
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            c: DEFAULT_FUSION_WEIGHT,
            skip_base: false,
            base_class_ids: BTreeSet::new(),
        }
    }
}

/// Fuses a single detector score with a similarity score for `class`.
///
/// The result is clamped to the closed interval spanned by the two inputs,
/// so rounding can never push it outside; at `c = 1` and `c = 0` the
/// corresponding input is returned exactly.
pub fn fuse_value(detector: f64, similarity: f64, class: ClassId, params: &FusionParams) -> f64 {
    if params.skips(class) {
        return detector;
    }
    let c = params.c;
    let v = c * detector + (1.0 - c) * similarity;
    v.clamp(detector.min(similarity), detector.max(similarity))
}

/// Elementwise fusion of two score matrices with identical shape and
/// column labels.
pub fn fuse_scores(detector: &ScoreMatrix, similarity: &ScoreMatrix, params: &FusionParams) -> Result<ScoreMatrix> {
    if detector.n_items() != similarity.n_items() || detector.class_ids() != similarity.class_ids() {
        return Err(Error::ShapeMismatch(format!(
            "detector scores are {}x{}, similarity scores are {}x{}",
            detector.n_items(),
            detector.n_classes(),
            similarity.n_items(),
            similarity.n_classes()
        )));
    }
    let classes = detector.class_ids();
    let k = classes.len();
    let values = detector
        .values()
        .iter()
        .zip(similarity.values())
        .enumerate()
        .map(|(i, (&f, &m))| fuse_value(f, m, classes[i % k], params))
        .collect();
    ScoreMatrix::with_class_ids(detector.n_items(), classes.to_vec(), values)
}

/// Ordered mapping between class names and class ids.
///
/// The order defines score-vector positions and similarity columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    entries: Vec<(ClassId, String)>,
    by_id: HashMap<ClassId, usize>,
    by_name: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(entries: Vec<(ClassId, String)>) -> Result<Self> {
        let mut by_id = HashMap::new();
        let mut by_name = HashMap::new();
        for (i, (id, name)) in entries.iter().enumerate() {
            if by_id.insert(*id, i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "class",
                    id: id.to_string(),
                });
            }
            if by_name.insert(name.clone(), i).is_some() {
                return Err(Error::DuplicateKey(name.clone()));
            }
        }
        Ok(ClassMap {
            entries,
            by_id,
            by_name,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, n)| n.as_str())
    }

    pub fn entries(&self) -> &[(ClassId, String)] {
        &self.entries
    }

    pub fn position_of_id(&self, id: ClassId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn id_of_name(&self, name: &str) -> Option<ClassId> {
        self.by_name.get(name).map(|&i| self.entries[i].0)
    }
}

/// A detection after re-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RescoredDetection {
    pub detection: Detection,
    /// Score before fusion.
    pub score_raw: f64,
    /// False when the detection had no embedding and passed through.
    pub fused: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoreOutput {
    pub detections: Vec<RescoredDetection>,
    pub rescored: usize,
    pub passed_through: usize,
}

/// Validated inputs with similarity scores computed once, ready to be
/// fused at any weight.
#[derive(Debug, Clone)]
pub struct PreparedRescore {
    detections: Vec<Detection>,
    /// Row in `similarity` for each detection, `None` when it has no embedding.
    rows: Vec<Option<usize>>,
    similarity: ScoreMatrix,
    class_ids: Vec<ClassId>,
    class_pos: HashMap<ClassId, usize>,
}

impl PreparedRescore {
    pub fn new(
        detections: &[Detection],
        det_embs: &EmbeddingMatrix,
        text_embs: &EmbeddingMatrix,
        class_map: &ClassMap,
        sim: &SimilarityParams,
    ) -> Result<Self> {
        for key in text_embs.index() {
            if class_map.id_of_name(key).is_none() {
                return Err(Error::UnknownClassKey(key.clone()));
            }
        }
        let names: Vec<&str> = class_map.names().collect();
        for &name in &names {
            if text_embs.position(name).is_none() {
                return Err(Error::MissingClassText(name.to_string()));
            }
        }
        if det_embs.dim() != text_embs.dim() {
            return Err(Error::EmbeddingDimMismatch {
                detections: det_embs.dim(),
                text: text_embs.dim(),
            });
        }

        let k = class_map.len();
        let mut seen = HashSet::with_capacity(detections.len());
        for d in detections {
            if !seen.insert(d.det_id.as_str()) {
                return Err(Error::DuplicateDetection(d.det_id.clone()));
            }
            validate_detection(d, class_map, k)?;
        }

        let mut rows = Vec::with_capacity(detections.len());
        let mut keys = Vec::new();
        for d in detections {
            if det_embs.position(&d.det_id).is_some() {
                rows.push(Some(keys.len()));
                keys.push(d.det_id.as_str());
            } else {
                rows.push(None);
            }
        }

        let text = l2_normalize(&text_embs.select(&names)?)?;
        let image = l2_normalize(&det_embs.select(&keys)?)?;
        let class_ids = class_map.ids();
        let similarity = similarity_scores(&image, &text, sim)?.relabel(class_ids.clone())?;
        let class_pos = class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        Ok(PreparedRescore {
            detections: detections.to_vec(),
            rows,
            similarity,
            class_ids,
            class_pos,
        })
    }

    /// Similarity scores for the detections that have embeddings, in
    /// detection order.
    pub fn similarity(&self) -> &ScoreMatrix {
        &self.similarity
    }

    pub fn apply(&self, fusion: &FusionParams) -> Result<RescoreOutput> {
        // Vector-carrying detections are fused as one matrix.
        let mut vec_items = Vec::new();
        let mut det_rows = Vec::new();
        let mut sim_rows = Vec::new();
        for (i, (d, row)) in self.detections.iter().zip(&self.rows).enumerate() {
            if let (Some(v), Some(r)) = (&d.score_vector, row) {
                vec_items.push(i);
                det_rows.push(v.clone());
                sim_rows.push(self.similarity.row(*r).to_vec());
            }
        }
        let fused_vectors = fuse_scores(
            &ScoreMatrix::from_rows(&det_rows, self.class_ids.clone())?,
            &ScoreMatrix::from_rows(&sim_rows, self.class_ids.clone())?,
            fusion,
        )?;
        let mut fused_row_of = HashMap::with_capacity(vec_items.len());
        for (j, &i) in vec_items.iter().enumerate() {
            fused_row_of.insert(i, j);
        }

        let mut out = Vec::with_capacity(self.detections.len());
        let mut rescored = 0;
        for (i, (d, row)) in self.detections.iter().zip(&self.rows).enumerate() {
            let col = self.class_pos[&d.class_id];
            let mut det = d.clone();
            let fused = match row {
                None => false,
                Some(r) => {
                    if let Some(&j) = fused_row_of.get(&i) {
                        let v = fused_vectors.row(j).to_vec();
                        det.score = v[col];
                        det.score_vector = Some(v);
                    } else {
                        det.score = fuse_value(d.score, self.similarity.get(*r, col), d.class_id, fusion);
                    }
                    rescored += 1;
                    true
                }
            };
            out.push(RescoredDetection {
                detection: det,
                score_raw: d.score,
                fused,
            });
        }
        let passed_through = out.len() - rescored;
        Ok(RescoreOutput {
            detections: out,
            rescored,
            passed_through,
        })
    }
}

fn validate_detection(d: &Detection, class_map: &ClassMap, k: usize) -> Result<()> {
    if class_map.position_of_id(d.class_id).is_none() {
        return Err(Error::UnknownClassId(d.class_id));
    }
    if !(0.0..=1.0).contains(&d.score) {
        return Err(Error::InvalidScore {
            context: format!("detection {}", d.det_id),
            value: d.score,
        });
    }
    if !d.bbox.is_valid() {
        return Err(Error::InvalidDetection {
            det_id: d.det_id.clone(),
            reason: "box must have positive width and height".into(),
        });
    }
    if let Some(v) = &d.score_vector {
        if v.len() != k {
            return Err(Error::ScoreVectorLength {
                det_id: d.det_id.clone(),
                expected: k,
                found: v.len(),
            });
        }
        if let Some(&bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidScore {
                context: format!("score vector of detection {}", d.det_id),
                value: bad,
            });
        }
    }
    Ok(())
}

/// Re-scores detections against class text embeddings.
///
/// Detections whose `det_id` has no row in `det_embs` pass through
/// unchanged and are counted in [`RescoreOutput::passed_through`].
pub fn rescore_detections(
    detections: &[Detection],
    det_embs: &EmbeddingMatrix,
    text_embs: &EmbeddingMatrix,
    class_map: &ClassMap,
    sim: &SimilarityParams,
    fusion: &FusionParams,
) -> Result<RescoreOutput> {
    PreparedRescore::new(detections, det_embs, text_embs, class_map, sim)?.apply(fusion)
}
