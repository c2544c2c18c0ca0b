//! Deterministic synthetic data: annotations, detector output with label
//! confusion, and embeddings whose similarity points at the true class.
//!
//! Objects sit in distinct cells of a 4x3 grid so ground-truth boxes never
//! overlap. Each object yields detections for the two top classes of its
//! score vector. With probability `confusion` the detector's top class is
//! wrong; the crop embedding is always near the true class's text
//! embedding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cocoio::{Annotation, AnnotationSet, Category, ClassSplit, ImageInfo};
use crate::embedding::{l2_normalize, save_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;
use crate::rescore::ClassMap;
use crate::results::{write_results, ResultRecord};
use crate::types::{BBox, ClassId, Detection, ImageId};

const IMAGE_W: u32 = 640;
const IMAGE_H: u32 = 480;
const CELLS_X: usize = 4;
const CELLS_Y: usize = 3;
const CELL: f64 = 160.0;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const RESULTS_FILE: &str = "results.json";
pub const DETECTION_EMBEDDINGS_FILE: &str = "detections.remb";
pub const TEXT_EMBEDDINGS_FILE: &str = "classes.remb";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub classes: usize,
    /// The first `base_classes` classes are base, the rest novel.
    pub base_classes: usize,
    pub max_objects: usize,
    pub max_false_positives: usize,
    pub dim: usize,
    /// Probability that the detector's top class is wrong.
    pub confusion: f64,
    /// Probability that a detection has no embedding.
    pub drop_embedding: f64,
    /// Relative noise added to crop embeddings.
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 40,
            classes: 8,
            base_classes: 5,
            max_objects: 6,
            max_false_positives: 2,
            dim: 32,
            confusion: 0.3,
            drop_embedding: 0.03,
            embedding_noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.base_classes >= self.classes {
            return Err(Error::param(
                "classes",
                "need two or more classes and at least one novel class",
            ));
        }
        if self.max_objects == 0 || self.max_objects + self.max_false_positives > CELLS_X * CELLS_Y {
            return Err(Error::param(
                "max_objects",
                "objects and false positives must fit the 4x3 grid",
            ));
        }
        if self.dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        for (name, p) in [("confusion", self.confusion), ("drop_embedding", self.drop_embedding)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Configurations of the fixtures shipped under `fixtures/`, by directory name.
pub fn bundled_configs() -> Vec<(&'static str, SynthConfig)> {
    vec![
        ("synth", SynthConfig::default()),
        (
            "eval20",
            SynthConfig {
                images: 20,
                classes: 5,
                base_classes: 3,
                seed: 20,
                ..SynthConfig::default()
            },
        ),
    ]
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub gt: AnnotationSet,
    pub detections: Vec<Detection>,
    pub det_embs: EmbeddingMatrix,
    pub text_embs: EmbeddingMatrix,
    pub class_map: ClassMap,
}

pub fn class_name(i: usize) -> String {
    format!("class{i:02}")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn box_in_cell(rng: &mut ChaCha8Rng, cell: usize) -> BBox {
    let cx = (cell % CELLS_X) as f64 * CELL;
    let cy = (cell / CELLS_X) as f64 * CELL;
    let w = rng.gen_range(40.0..120.0);
    let h = rng.gen_range(40.0..120.0);
    let x = cx + rng.gen_range(10.0..(CELL - 10.0 - w).max(10.5));
    let y = cy + rng.gen_range(10.0..(CELL - 10.0 - h).max(10.5));
    BBox::new(round2(x), round2(y), round2(w), round2(h))
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = rng.gen_range(0.0..0.2);
    let dx = rng.gen_range(-s..=s) * b.w;
    let dy = rng.gen_range(-s..=s) * b.h;
    let sw = 1.0 + rng.gen_range(-s..=s);
    let sh = 1.0 + rng.gen_range(-s..=s);
    BBox::new(round2(b.x + dx), round2(b.y + dy), round2(b.w * sw), round2(b.h * sh))
}

/// Score vector peaking at `top`, with `second` as runner-up.
fn score_vector(rng: &mut ChaCha8Rng, k: usize, top: usize, second: usize, peak: f64) -> Vec<f64> {
    let runner = rng.gen_range(0.4..0.9) * peak.min(1.0 - peak);
    let rest = 1.0 - peak - runner;
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    w[top] = 0.0;
    w[second] = 0.0;
    let total: f64 = w.iter().sum();
    let mut v: Vec<f64> = w
        .iter()
        .map(|x| if total > 0.0 { rest * x / total } else { 0.0 })
        .collect();
    v[top] = peak;
    v[second] = runner + if total > 0.0 { 0.0 } else { rest };
    v
}

fn top_two(v: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    (idx[0], idx[1])
}

#[derive(Default)]
struct Emitted {
    detections: Vec<Detection>,
    rows: Vec<Vec<f32>>,
    keys: Vec<String>,
}

impl Emitted {
    fn next_id(&self) -> String {
        format!("d{:05}", self.detections.len())
    }

    fn push(&mut self, rng: &mut ChaCha8Rng, drop: f64, det: Detection, emb: &[f64]) {
        if rng.gen::<f64>() >= drop {
            self.keys.push(det.det_id.clone());
            self.rows.push(to_f32(emb));
        }
        self.detections.push(det);
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.classes;
    let class_ids: Vec<ClassId> = (1..=k as ClassId).collect();
    let categories: Vec<Category> = (0..k)
        .map(|i| Category {
            id: class_ids[i],
            name: class_name(i),
            supercategory: None,
            split: Some(if i < cfg.base_classes {
                ClassSplit::Base
            } else {
                ClassSplit::Novel
            }),
        })
        .collect();
    let text_vecs: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(&mut rng, cfg.dim)).collect();

    let mut images = Vec::with_capacity(cfg.images);
    let mut annotations = Vec::new();
    let mut out = Emitted::default();

    for img in 0..cfg.images {
        let image_id = ImageId::from_int(img as u64 + 1);
        images.push(ImageInfo {
            id: image_id.clone(),
            width: IMAGE_W,
            height: IMAGE_H,
            file_name: Some(format!("{:06}.jpg", img + 1)),
        });
        let mut cells: Vec<usize> = (0..CELLS_X * CELLS_Y).collect();
        cells.shuffle(&mut rng);
        let n_obj = rng.gen_range(1..=cfg.max_objects);
        let n_fp = rng.gen_range(0..=cfg.max_false_positives);

        for &cell in &cells[..n_obj] {
            let cls = rng.gen_range(0..k);
            let gt_box = box_in_cell(&mut rng, cell);
            annotations.push(Annotation {
                id: annotations.len() as u64 + 1,
                image_id: image_id.clone(),
                category_id: class_ids[cls],
                bbox: gt_box,
                iscrowd: false,
                area: None,
            });

            let confused = rng.gen::<f64>() < cfg.confusion;
            let other = (cls + rng.gen_range(1..k)) % k;
            let (top, second) = if confused { (other, cls) } else { (cls, other) };
            let peak = rng.gen_range(0.35..0.95);
            let vector = score_vector(&mut rng, k, top, second, peak);
            let det_box = jitter(&mut rng, &gt_box);
            let noise = unit_vector(&mut rng, cfg.dim);
            let emb: Vec<f64> = text_vecs[cls]
                .iter()
                .zip(&noise)
                .map(|(t, n)| t + cfg.embedding_noise * n)
                .collect();
            let (a, b) = top_two(&vector);
            for c in [a, b] {
                let det = Detection::new(image_id.clone(), out.next_id(), class_ids[c], det_box, vector[c])
                    .with_score_vector(vector.clone());
                out.push(&mut rng, cfg.drop_embedding, det, &emb);
            }
        }
        for &cell in &cells[n_obj..n_obj + n_fp] {
            let top = rng.gen_range(0..k);
            let second = (top + rng.gen_range(1..k)) % k;
            let peak = rng.gen_range(0.2..0.6);
            let vector = score_vector(&mut rng, k, top, second, peak);
            let det = Detection::new(
                image_id.clone(),
                out.next_id(),
                class_ids[top],
                box_in_cell(&mut rng, cell),
                vector[top],
            )
            .with_score_vector(vector);
            let emb = unit_vector(&mut rng, cfg.dim);
            out.push(&mut rng, cfg.drop_embedding, det, &emb);
        }
    }

    let gt = AnnotationSet {
        images,
        categories,
        annotations,
    };
    gt.validate()?;
    let det_embs = l2_normalize(&EmbeddingMatrix::from_rows(cfg.dim, &out.rows, out.keys)?)?;
    let names: Vec<String> = (0..k).map(class_name).collect();
    let text_rows: Vec<Vec<f32>> = text_vecs.iter().map(|v| to_f32(v)).collect();
    let text_embs = l2_normalize(&EmbeddingMatrix::from_rows(cfg.dim, &text_rows, names.clone())?)?;
    let class_map = ClassMap::new(class_ids.into_iter().zip(names).collect())?;
    Ok(SynthData {
        gt,
        detections: out.detections,
        det_embs,
        text_embs,
        class_map,
    })
}

impl SynthData {
    /// Writes annotations, results and both embedding files into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let gt_path = dir.join(ANNOTATIONS_FILE);
        fs::write(&gt_path, self.gt.to_json() + "\n").map_err(|e| Error::io(&gt_path, e))?;
        let records: Vec<ResultRecord> = self.detections.iter().cloned().map(ResultRecord::new).collect();
        write_results(&records, dir.join(RESULTS_FILE))?;
        save_embeddings(&self.det_embs, dir.join(DETECTION_EMBEDDINGS_FILE))?;
        save_embeddings(&self.text_embs, dir.join(TEXT_EMBEDDINGS_FILE))
    }

    /// Class prompts in class-map order.
    pub fn prompts(&self, template: &PromptTemplate) -> Result<Vec<String>> {
        self.class_map.names().map(|n| template.render(n)).collect()
    }
}
