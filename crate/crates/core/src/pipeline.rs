//! Trained model bundle and per-image detection: prune, search, suppress,
//! then generate object boxes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DetectionRecord;
use crate::error::Result;
use crate::geometry::BBox;
use crate::inference::{detect, prune_hypotheses, DetectConfig, PruneConfig};
use crate::model::{Configuration, GraphSpec, HypothesisStore, ModelParams};
use crate::postprocess::{generate_box, part_nms, BoxRegressor};

/// Everything needed to run detection, as stored in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    #[serde(flatten)]
    pub params: ModelParams,
    pub prune: PruneConfig,
    /// Keyed by pattern mask.
    #[serde(default)]
    pub box_regressors: BTreeMap<u32, BoxRegressor>,
    pub class_name: String,
    #[serde(default)]
    pub allowed_patterns: Option<Vec<u32>>,
}

/// A final detection with resolved boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub configuration: Configuration,
    pub score: f64,
    pub bbox: BBox,
    /// Box of each switched-on node, `None` for off nodes.
    pub part_boxes: Vec<Option<BBox>>,
}

impl TrainedModel {
    pub fn spec(&self) -> &GraphSpec {
        &self.params.graph
    }

    /// Detection settings with the model's pattern restriction applied.
    pub fn detect_config(&self, score_threshold: f64, max_raw_detections: usize) -> DetectConfig {
        DetectConfig {
            score_threshold,
            max_raw_detections,
            allowed_patterns: self.allowed_patterns.clone(),
        }
    }

    /// Runs the full per-image pipeline on unpruned candidates.
    pub fn detect_image(&self, candidates: &HypothesisStore, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let spec = self.spec();
        let hyps = prune_hypotheses(candidates, &self.prune);
        let raw = detect(&hyps, &self.params, spec, cfg)?;
        part_nms(raw)
            .into_iter()
            .map(|d| {
                let bbox = generate_box(&self.box_regressors, &d.configuration, &hyps)?;
                let part_boxes = (0..spec.num_nodes())
                    .map(|n| match d.configuration.hypothesis_id(n) {
                        Some(id) => hyps.resolve(n, id).map(|h| Some(h.bbox)),
                        None => Ok(None),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Detection {
                    configuration: d.configuration,
                    score: d.score,
                    bbox,
                    part_boxes,
                })
            })
            .collect()
    }

    pub fn to_record(&self, image_id: &str, d: &Detection) -> DetectionRecord {
        let spec = self.spec();
        DetectionRecord {
            image_id: image_id.to_string(),
            class: self.class_name.clone(),
            pattern_mask: d.configuration.pattern().mask(),
            assignment: d
                .configuration
                .assigned()
                .map(|(n, id)| (spec.node_name(n).to_string(), id))
                .collect(),
            score: d.score,
            bbox: d.bbox,
            part_boxes: d
                .part_boxes
                .iter()
                .enumerate()
                .filter_map(|(n, b)| b.map(|b| (spec.node_name(n).to_string(), b)))
                .collect(),
        }
    }

    /// Detects on every image (in parallel) and returns records in
    /// canonical order: by image id, then by detection rank.
    pub fn detect_all(
        &self,
        images: &BTreeMap<String, HypothesisStore>,
        cfg: &DetectConfig,
    ) -> Result<Vec<DetectionRecord>> {
        let per_image: Vec<Vec<DetectionRecord>> = images
            .par_iter()
            .map(|(id, store)| {
                Ok(self
                    .detect_image(store, cfg)?
                    .iter()
                    .map(|d| self.to_record(id, d))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per_image.into_iter().flatten().collect())
    }
}
