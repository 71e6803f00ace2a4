//! Record types shared by the file formats and in-memory datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{GraphSpec, Hypothesis, HypothesisStore};

/// One annotated object: the holistic box plus optional part boxes keyed
/// by node name (`null` when the part is not annotated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: String,
    pub bbox: BBox,
    #[serde(default)]
    pub parts: BTreeMap<String, Option<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    /// Negative images contain no object of interest.
    #[serde(default, alias = "negatives")]
    pub negative: bool,
    #[serde(default)]
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub image_id: String,
    pub node: usize,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl HypothesisRecord {
    pub fn to_hypothesis(&self) -> Hypothesis {
        Hypothesis {
            id: self.id,
            node: self.node,
            bbox: self.bbox,
            raw_score: self.score,
        }
    }
}

/// A final detection as written to detection files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: String,
    pub pattern_mask: u32,
    /// Hypothesis id per switched-on node, keyed by node name.
    pub assignment: BTreeMap<String, u64>,
    pub score: f64,
    /// Object box: the holistic hypothesis box or a regressed box.
    pub bbox: BBox,
    /// Boxes of the switched-on nodes, keyed by node name.
    #[serde(default)]
    pub part_boxes: BTreeMap<String, BBox>,
}

/// Ground-truth boxes of one object in node order; entry 0 is the holistic
/// box and must be present.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub boxes: Vec<Option<BBox>>,
}

impl GroundTruthObject {
    pub fn holistic(&self) -> Result<BBox> {
        self.boxes
            .first()
            .copied()
            .flatten()
            .ok_or_else(|| Error::MalformedAnnotation("object without holistic box".into()))
    }

    pub fn from_annotation(spec: &GraphSpec, obj: &ObjectAnnotation) -> Result<Self> {
        let mut boxes = vec![None; spec.num_nodes()];
        boxes[0] = Some(obj.bbox);
        for (name, b) in &obj.parts {
            let node = spec
                .node_index(name)
                .ok_or_else(|| Error::MalformedAnnotation(format!("unknown part name {name:?}")))?;
            if node == 0 {
                return Err(Error::MalformedAnnotation(format!(
                    "part {name:?} names the holistic node"
                )));
            }
            boxes[node] = *b;
        }
        Ok(GroundTruthObject { boxes })
    }
}

/// Everything the trainer needs about one image.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub image_id: String,
    pub negative: bool,
    pub objects: Vec<GroundTruthObject>,
    pub hypotheses: HypothesisStore,
}

/// Groups hypothesis records by image id, validating each against the
/// graph size.
pub fn group_hypotheses(num_nodes: usize, records: &[HypothesisRecord]) -> Result<BTreeMap<String, HypothesisStore>> {
    let mut out: BTreeMap<String, HypothesisStore> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id.clone())
            .or_insert_with(|| HypothesisStore::empty(num_nodes))
            .push(r.to_hypothesis())?;
    }
    Ok(out)
}

/// Joins annotations with hypotheses. Objects whose class differs from
/// `class` (when given) are ignored; images without hypotheses get empty
/// stores.
pub fn training_images(
    spec: &GraphSpec,
    annotations: &[ImageAnnotation],
    hypotheses: &[HypothesisRecord],
    class: Option<&str>,
) -> Result<Vec<TrainingImage>> {
    let mut grouped = group_hypotheses(spec.num_nodes(), hypotheses)?;
    annotations
        .iter()
        .map(|a| {
            let objects = a
                .objects
                .iter()
                .filter(|o| class.is_none_or(|c| c == o.class))
                .map(|o| GroundTruthObject::from_annotation(spec, o))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingImage {
                image_id: a.image_id.clone(),
                negative: a.negative,
                objects,
                hypotheses: grouped
                    .remove(&a.image_id)
                    .unwrap_or_else(|| HypothesisStore::empty(spec.num_nodes())),
            })
        })
        .collect()
}
