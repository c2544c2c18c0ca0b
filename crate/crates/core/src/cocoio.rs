//! COCO annotation files, k-shot subset sampling and missing-annotation
//! statistics.
//!
//! A k-shot subset keeps only the sampled annotations of the images it
//! selects. Every other object in those images loses its label and is
//! counted as a missing annotation. Crowd annotations take part in neither
//! sampling nor missing counts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fmt::{csv_field, g17};
use crate::types::{BBox, ClassId, ImageId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

/// Base/novel role of a category, read from the optional `"split"` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: ClassId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<ClassSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: ImageId,
    pub category_id: ClassId,
    pub bbox: BBox,
    #[serde(default, deserialize_with = "crowd_from_json", serialize_with = "crowd_to_json")]
    pub iscrowd: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

fn crowd_from_json<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(i64),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Bool(b) => b,
        Flag::Int(i) => i != 0,
    })
}

fn crowd_to_json<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

/// Base/novel class partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassPartition {
    pub base: BTreeSet<ClassId>,
    pub novel: BTreeSet<ClassId>,
}

/// A validated COCO detection annotation file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    #[serde(default)]
    pub images: Vec<ImageInfo>,
    #[serde(default)]
    pub categories: Vec<Category>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let set: AnnotationSet = serde_json::from_str(text).map_err(|source| Error::Parse {
            context: context.to_string(),
            source,
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut images = HashSet::with_capacity(self.images.len());
        for img in &self.images {
            if !images.insert(&img.id) {
                return Err(Error::DuplicateId {
                    kind: "image",
                    id: img.id.to_string(),
                });
            }
        }
        let mut cats = HashSet::with_capacity(self.categories.len());
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::DuplicateId {
                    kind: "category",
                    id: c.id.to_string(),
                });
            }
        }
        let mut anns = HashSet::with_capacity(self.annotations.len());
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(Error::DuplicateId {
                    kind: "annotation",
                    id: a.id.to_string(),
                });
            }
            if !images.contains(&a.image_id) {
                return Err(Error::DanglingReference {
                    ann_id: a.id,
                    kind: "image",
                    id: a.image_id.to_string(),
                });
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::DanglingReference {
                    ann_id: a.id,
                    kind: "category",
                    id: a.category_id.to_string(),
                });
            }
            if !a.bbox.is_valid() {
                return Err(Error::InvalidBox(a.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation sets serialize")
    }

    pub fn category(&self, id: ClassId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Partition from the categories' `split` fields; `None` when no
    /// category carries one.
    pub fn partition(&self) -> Option<ClassPartition> {
        let mut p = ClassPartition::default();
        for c in &self.categories {
            match c.split {
                Some(ClassSplit::Base) => {
                    p.base.insert(c.id);
                }
                Some(ClassSplit::Novel) => {
                    p.novel.insert(c.id);
                }
                None => {}
            }
        }
        if p.base.is_empty() && p.novel.is_empty() {
            None
        } else {
            Some(p)
        }
    }

    /// Non-crowd annotation count per image.
    pub fn counts_per_image(&self) -> BTreeMap<ImageId, usize> {
        let mut m: BTreeMap<ImageId, usize> = self.images.iter().map(|i| (i.id.clone(), 0)).collect();
        for a in self.annotations.iter().filter(|a| !a.iscrowd) {
            *m.entry(a.image_id.clone()).or_default() += 1;
        }
        m
    }
}

/// Reads and validates a COCO annotation file. Unknown fields are ignored.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationSet::from_json_str(&text, &path.display().to_string())
}

/// A sampled k-shot subset and the annotations drawn for each class.
#[derive(Debug, Clone, PartialEq)]
pub struct KShotSeed {
    pub k: usize,
    pub rng_seed: u64,
    pub subset: AnnotationSet,
    pub provenance: BTreeMap<ClassId, Vec<u64>>,
}

#[derive(Serialize)]
struct SeedInfo<'a> {
    k: usize,
    rng_seed: u64,
    classes: Vec<&'a ClassId>,
}

#[derive(Serialize)]
struct SeedFile<'a> {
    info: SeedInfo<'a>,
    images: &'a [ImageInfo],
    categories: &'a [Category],
    annotations: &'a [Annotation],
    provenance: BTreeMap<String, &'a Vec<u64>>,
}

impl KShotSeed {
    /// COCO JSON with an extra top-level `provenance` object mapping class
    /// ids to sampled annotation ids.
    pub fn to_json(&self) -> String {
        let file = SeedFile {
            info: SeedInfo {
                k: self.k,
                rng_seed: self.rng_seed,
                classes: self.provenance.keys().collect(),
            },
            images: &self.subset.images,
            categories: &self.subset.categories,
            annotations: &self.subset.annotations,
            provenance: self.provenance.iter().map(|(c, ids)| (c.to_string(), ids)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("seeds serialize")
    }

    /// Sampled instance count per class.
    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        self.provenance.iter().map(|(&c, ids)| (c, ids.len())).collect()
    }
}

/// Samples a k-shot subset of `full` for `classes`.
///
/// For each class in turn, the images holding that class are shuffled and
/// whole images are added until at least `k` of its instances are drawn.
/// Only those instances are kept. Deterministic for a given `rng_seed`.
pub fn sample_kshot(full: &AnnotationSet, k: usize, classes: &[ClassId], rng_seed: u64) -> Result<KShotSeed> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    let mut order = Vec::new();
    for &c in classes {
        if full.category(c).is_none() {
            return Err(Error::UnknownClassId(c));
        }
        if !order.contains(&c) {
            order.push(c);
        }
    }

    let image_pos: HashMap<&ImageId, usize> = full.images.iter().enumerate().map(|(i, img)| (&img.id, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen_images = BTreeSet::new();
    let mut chosen_anns = BTreeSet::new();
    let mut provenance = BTreeMap::new();

    for &class in &order {
        // Image position -> annotation positions of this class, in file order.
        let mut per_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (ai, a) in full.annotations.iter().enumerate() {
            if a.category_id == class && !a.iscrowd {
                per_image.entry(image_pos[&a.image_id]).or_default().push(ai);
            }
        }
        let available: usize = per_image.values().map(Vec::len).sum();
        if available < k {
            return Err(Error::InsufficientInstances {
                class_id: class,
                available,
                k,
            });
        }
        let mut candidates: Vec<(usize, Vec<usize>)> = per_image.into_iter().collect();
        candidates.shuffle(&mut rng);

        let mut drawn = Vec::new();
        for (img, anns) in candidates {
            if drawn.len() >= k {
                break;
            }
            chosen_images.insert(img);
            drawn.extend(anns);
        }
        chosen_anns.extend(drawn.iter().copied());
        let mut ids: Vec<u64> = drawn.iter().map(|&ai| full.annotations[ai].id).collect();
        ids.sort_unstable();
        provenance.insert(class, ids);
    }

    let subset = AnnotationSet {
        images: chosen_images.iter().map(|&i| full.images[i].clone()).collect(),
        categories: full.categories.clone(),
        annotations: chosen_anns.iter().map(|&i| full.annotations[i].clone()).collect(),
    };
    Ok(KShotSeed {
        k,
        rng_seed,
        subset,
        provenance,
    })
}

/// Annotation bookkeeping for one image of a subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTally {
    pub image_id: ImageId,
    pub full: usize,
    pub kept: usize,
    pub missing: usize,
}

/// Missing-annotation counts for one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingStats {
    /// Every category of the full set, including zero counts.
    pub per_class: BTreeMap<ClassId, usize>,
    pub per_image: Vec<ImageTally>,
    class_names: BTreeMap<ClassId, String>,
}

impl MissingStats {
    pub fn total(&self) -> usize {
        self.per_class.values().sum()
    }

    /// CSV `class_id,class_name,missing_count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,class_name,missing_count\n");
        for (c, n) in &self.per_class {
            let name = self.class_names.get(c).map(String::as_str).unwrap_or("");
            out.push_str(&format!("{c},{},{n}\n", csv_field(name)));
        }
        out
    }
}

/// Counts, for every image in `subset`, the non-crowd annotations of
/// `full` on that image that the subset dropped.
pub fn missing_annotation_stats(full: &AnnotationSet, subset: &AnnotationSet) -> Result<MissingStats> {
    let full_images: HashSet<&ImageId> = full.images.iter().map(|i| &i.id).collect();
    for img in &subset.images {
        if !full_images.contains(&img.id) {
            return Err(Error::SubsetNotContained(format!(
                "image {} is not in the full set",
                img.id
            )));
        }
    }
    let full_anns: HashMap<u64, &Annotation> = full.annotations.iter().map(|a| (a.id, a)).collect();
    let mut kept_ids = HashSet::with_capacity(subset.annotations.len());
    for a in &subset.annotations {
        match full_anns.get(&a.id) {
            Some(f) if f.image_id == a.image_id && f.category_id == a.category_id => {
                kept_ids.insert(a.id);
            }
            _ => {
                return Err(Error::SubsetNotContained(format!(
                    "annotation {} does not match the full set",
                    a.id
                )))
            }
        }
    }

    let mut by_image: HashMap<&ImageId, Vec<&Annotation>> = HashMap::new();
    for a in full.annotations.iter().filter(|a| !a.iscrowd) {
        by_image.entry(&a.image_id).or_default().push(a);
    }

    let mut per_class: BTreeMap<ClassId, usize> = full.categories.iter().map(|c| (c.id, 0)).collect();
    let mut per_image = Vec::with_capacity(subset.images.len());
    for img in &subset.images {
        let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
        let mut kept = 0;
        let mut missing = 0;
        for a in anns {
            if kept_ids.contains(&a.id) {
                kept += 1;
            } else {
                missing += 1;
                *per_class.entry(a.category_id).or_default() += 1;
            }
        }
        per_image.push(ImageTally {
            image_id: img.id.clone(),
            full: anns.len(),
            kept,
            missing,
        });
    }
    Ok(MissingStats {
        per_class,
        per_image,
        class_names: full.categories.iter().map(|c| (c.id, c.name.clone())).collect(),
    })
}

/// Mean with a two-sided 95% Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `mean +- t(0.975, n-1) * s / sqrt(n)` with the sample standard deviation.
pub fn aggregate_ci(values: &[f64]) -> Result<ConfidenceInterval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::param("values", format!("non-finite sample {bad}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / nf.sqrt();
    Ok(ConfidenceInterval {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAggregate {
    pub class_id: ClassId,
    pub ci: ConfidenceInterval,
}

/// Per-class missing counts aggregated across seeds.
pub fn aggregate_missing(seeds: &[MissingStats]) -> Result<Vec<ClassAggregate>> {
    if seeds.len() < 2 {
        return Err(Error::TooFewSamples(seeds.len()));
    }
    let classes: Vec<ClassId> = seeds[0].per_class.keys().copied().collect();
    for s in &seeds[1..] {
        if !s.per_class.keys().copied().eq(classes.iter().copied()) {
            return Err(Error::ShapeMismatch(
                "seeds were computed over different class sets".into(),
            ));
        }
    }
    classes
        .into_iter()
        .map(|c| {
            let values: Vec<f64> = seeds.iter().map(|s| s.per_class[&c] as f64).collect();
            Ok(ClassAggregate {
                class_id: c,
                ci: aggregate_ci(&values)?,
            })
        })
        .collect()
}

/// CSV `class_id,mean,ci_low,ci_high`.
pub fn aggregates_to_csv(rows: &[ClassAggregate]) -> String {
    let mut out = String::from("class_id,mean,ci_low,ci_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.class_id,
            g17(r.ci.mean),
            g17(r.ci.ci_low),
            g17(r.ci.ci_high)
        ));
    }
    out
}
