//! Seeded scene generator and the brute-force MAP oracle.
//!
//! Scenes are drawn with ChaCha8 seeded from `SynthConfig::seed`; the draw
//! order is part of the generator version ([`GENERATOR_VERSION`]) and must
//! not change without bumping it. Each object gets a holistic box and parts
//! at canonical relative offsets perturbed by deformation noise. Parts may
//! be occluded (no annotation, no hypothesis) and objects below the low-res
//! area threshold only emit holistic hypotheses. Every surviving true box
//! spawns one jittered true-positive hypothesis whose score drops with its
//! jitter (and, for the holistic node, with the object's deformation).
//! Decoys (unannotated objects with scrambled parts and true-positive-like
//! scores) and distractors with background scores are scattered over every
//! image.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{HypothesisRecord, ImageAnnotation, ObjectAnnotation, TrainingImage};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::inference::{ranking_order, ScoredConfiguration};
use crate::model::{
    score_configuration, Configuration, DetectabilityPattern, GraphSpec, Hypothesis, HypothesisStore, ModelParams,
};

pub const GENERATOR_VERSION: &str = "partswitch-synth/1 chacha8";

/// Upper bound on the configurations [`brute_force_best`] will visit.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Images containing objects.
    pub images: usize,
    /// Images containing only distractors.
    pub negative_images: usize,
    /// Inclusive bounds on objects per positive image.
    pub objects_per_image: [usize; 2],
    /// Image width and height.
    pub image_size: [f64; 2],
    /// Bounds of the square root of object area, sampled log-uniformly.
    pub object_side: [f64; 2],
    /// Bounds of object width / height, sampled log-uniformly.
    pub aspect_range: [f64; 2],
    /// Std of part center displacement, relative to object size.
    pub part_offset_sigma: f64,
    /// Std of part log-extent perturbation.
    pub part_scale_sigma: f64,
    /// Probability a part is occluded.
    pub occlusion_rate: f64,
    /// Objects with smaller area emit only holistic hypotheses.
    pub lowres_area_threshold: f64,
    /// Std of true-positive box jitter (relative offset and log-extent),
    /// truncated at two standard deviations.
    pub hypothesis_jitter: f64,
    pub score_noise_sigma: f64,
    /// True-positive score before penalties.
    pub tp_score: f64,
    /// Score lost per unit of mean absolute relative jitter.
    pub jitter_penalty: f64,
    /// Holistic score lost per unit of RMS part displacement.
    pub deformation_penalty: f64,
    /// Inclusive bounds on decoys per image (positive and negative). A
    /// decoy is an unannotated object whose holistic and part hypotheses
    /// score like true positives but whose parts are scrambled.
    pub decoys_per_image: [usize; 2],
    pub distractors_per_node: usize,
    pub distractor_score: f64,
    pub distractor_score_sigma: f64,
    pub class_name: String,
    pub node_names: Vec<String>,
    /// Parameters used to score the true configurations in the truth
    /// record; unary weights of one when absent.
    pub planted_params: Option<ModelParams>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            images: 120,
            negative_images: 60,
            objects_per_image: [1, 3],
            image_size: [640.0, 480.0],
            object_side: [24.0, 240.0],
            aspect_range: [0.75, 1.333],
            part_offset_sigma: 0.05,
            part_scale_sigma: 0.05,
            occlusion_rate: 0.0,
            lowres_area_threshold: 0.0,
            hypothesis_jitter: 0.04,
            score_noise_sigma: 0.15,
            tp_score: 1.0,
            jitter_penalty: 4.0,
            deformation_penalty: 4.0,
            decoys_per_image: [0, 2],
            distractors_per_node: 4,
            distractor_score: 0.0,
            distractor_score_sigma: 0.5,
            class_name: "animal".into(),
            node_names: GraphSpec::animal().node_names().to_vec(),
            planted_params: None,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> Result<GraphSpec> {
        GraphSpec::new(self.node_names.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let sigmas = [
            ("part_offset_sigma", self.part_offset_sigma),
            ("part_scale_sigma", self.part_scale_sigma),
            ("hypothesis_jitter", self.hypothesis_jitter),
            ("score_noise_sigma", self.score_noise_sigma),
            ("distractor_score_sigma", self.distractor_score_sigma),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidConfig("occlusion_rate must lie in [0, 1]".into()));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.object_side) || !ordered(self.aspect_range) {
            return Err(Error::InvalidConfig(
                "object_side and aspect_range need 0 < lo <= hi".into(),
            ));
        }
        if !(self.image_size[0] > 0.0 && self.image_size[1] > 0.0) {
            return Err(Error::InvalidConfig("image_size must be positive".into()));
        }
        if self.objects_per_image[0] > self.objects_per_image[1] || self.decoys_per_image[0] > self.decoys_per_image[1]
        {
            return Err(Error::InvalidConfig(
                "objects_per_image or decoys_per_image bounds are reversed".into(),
            ));
        }
        if let Some(p) = &self.planted_params {
            p.check(&spec)?;
        }
        Ok(())
    }
}

/// Ground truth about one generated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub image_id: String,
    pub object: usize,
    /// Nodes that received a true-positive hypothesis.
    pub planted_mask: u32,
    /// Planted parameters evaluated on the true configuration.
    pub planted_score: Option<f64>,
    /// Hypothesis id of each node's true positive, keyed by node name.
    pub true_hypotheses: BTreeMap<String, u64>,
    pub lowres: bool,
    pub occluded: Vec<String>,
    /// RMS relative displacement of the parts.
    pub deformation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub generator: String,
    pub seed: u64,
    pub class_name: String,
    pub planted_params: ModelParams,
    pub objects: Vec<PlantedObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: GraphSpec,
    pub annotations: Vec<ImageAnnotation>,
    pub hypotheses: Vec<HypothesisRecord>,
    pub truth: TruthRecord,
}

impl SynthDataset {
    pub fn training_images(&self) -> Result<Vec<TrainingImage>> {
        crate::data::training_images(&self.spec, &self.annotations, &self.hypotheses, None)
    }

    /// Hypothesis stores of every image, including images with none.
    pub fn hypothesis_stores(&self) -> Result<BTreeMap<String, HypothesisStore>> {
        let k = self.spec.num_nodes();
        let mut stores = crate::data::group_hypotheses(k, &self.hypotheses)?;
        for a in &self.annotations {
            stores
                .entry(a.image_id.clone())
                .or_insert_with(|| HypothesisStore::empty(k));
        }
        Ok(stores)
    }
}

/// Canonical part box in the object's unit frame: `(cx, cy, w, h)`.
fn canonical_layout(num_parts: usize) -> Vec<(f64, f64, f64, f64)> {
    if num_parts == 3 {
        // head upper left, torso middle, legs below
        return vec![
            (0.20, 0.20, 0.40, 0.40),
            (0.575, 0.475, 0.75, 0.45),
            (0.60, 0.825, 0.70, 0.35),
        ];
    }
    let p = num_parts as f64;
    (0..num_parts)
        .map(|i| (0.5, (i as f64 + 0.5) / p, 0.6, 1.0 / p))
        .collect()
}

struct Draw {
    rng: ChaCha8Rng,
}

impl Draw {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn truncated(&mut self, sigma: f64) -> f64 {
        (self.normal() * sigma).clamp(-2.0 * sigma, 2.0 * sigma)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    fn log_uniform(&mut self, r: [f64; 2]) -> f64 {
        self.uniform(r[0].ln(), r[1].ln()).exp()
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }
}

struct PendingHyp {
    node: usize,
    bbox: BBox,
    score: f64,
    /// (object index, node) of the true box this hypothesis jitters.
    truth: Option<(usize, usize)>,
}

fn jittered(d: &mut Draw, b: &BBox, sigma: f64) -> (BBox, f64) {
    let (cx, cy) = b.center();
    let ox = d.truncated(sigma);
    let oy = d.truncated(sigma);
    let lw = d.truncated(sigma);
    let lh = d.truncated(sigma);
    let jb = BBox::from_center(
        cx + ox * b.width(),
        cy + oy * b.height(),
        b.width() * lw.exp(),
        b.height() * lh.exp(),
    );
    (jb, (ox.abs() + oy.abs() + lw.abs() + lh.abs()) / 4.0)
}

/// Generates a dataset; identical configs give identical output.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let k = spec.num_nodes();
    let layout = canonical_layout(k - 1);
    let planted = cfg
        .planted_params
        .clone()
        .unwrap_or_else(|| ModelParams::unary_only(&spec, 1.0));
    let mut d = Draw {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    // Id shuffles run on their own stream: their draw count depends on how
    // many hypotheses survive occlusion and low-res, which must not shift
    // the geometry of later images.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let [img_w, img_h] = cfg.image_size;

    let mut annotations = Vec::new();
    let mut hypotheses = Vec::new();
    let mut planted_objects = Vec::new();

    let image_ids = (0..cfg.images)
        .map(|i| (format!("pos_{i:05}"), false))
        .chain((0..cfg.negative_images).map(|i| (format!("neg_{i:05}"), true)));

    for (image_id, negative) in image_ids {
        let n_objects = if negative {
            0
        } else {
            d.rng.random_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1])
        };
        let mut objects = Vec::new();
        let mut pending: Vec<PendingHyp> = Vec::new();
        let mut meta = Vec::new();

        for obj_idx in 0..n_objects {
            let side = d.log_uniform(cfg.object_side);
            let aspect = d.log_uniform(cfg.aspect_range);
            let w = (side * aspect.sqrt()).min(img_w);
            let h = (side / aspect.sqrt()).min(img_h);
            let x1 = d.uniform(0.0, img_w - w);
            let y1 = d.uniform(0.0, img_h - h);
            let holistic = BBox::from_corners(x1, y1, x1 + w, y1 + h);

            let mut part_boxes = Vec::with_capacity(k - 1);
            let mut displacement = 0.0;
            for &(cx, cy, rw, rh) in &layout {
                let dx = d.normal() * cfg.part_offset_sigma;
                let dy = d.normal() * cfg.part_offset_sigma;
                let sx = d.normal() * cfg.part_scale_sigma;
                let sy = d.normal() * cfg.part_scale_sigma;
                displacement += dx * dx + dy * dy;
                part_boxes.push(BBox::from_center(
                    x1 + (cx + dx) * w,
                    y1 + (cy + dy) * h,
                    rw * w * sx.exp(),
                    rh * h * sy.exp(),
                ));
            }
            let deformation = if layout.is_empty() {
                0.0
            } else {
                (displacement / layout.len() as f64).sqrt()
            };
            let occluded: Vec<bool> = (0..layout.len()).map(|_| d.bernoulli(cfg.occlusion_rate)).collect();
            let lowres = holistic.area() < cfg.lowres_area_threshold;

            // true positives
            let (hb, hj) = jittered(&mut d, &holistic, cfg.hypothesis_jitter);
            let noise = d.normal() * cfg.score_noise_sigma;
            pending.push(PendingHyp {
                node: 0,
                bbox: hb,
                score: cfg.tp_score - cfg.jitter_penalty * hj - cfg.deformation_penalty * deformation + noise,
                truth: Some((obj_idx, 0)),
            });
            let mut mask = 1u32;
            for (p, pb) in part_boxes.iter().enumerate() {
                // drawn even when discarded so that the regimes share geometry
                let (jb, j) = jittered(&mut d, pb, cfg.hypothesis_jitter);
                let noise = d.normal() * cfg.score_noise_sigma;
                if occluded[p] || lowres {
                    continue;
                }
                pending.push(PendingHyp {
                    node: p + 1,
                    bbox: jb,
                    score: cfg.tp_score - cfg.jitter_penalty * j + noise,
                    truth: Some((obj_idx, p + 1)),
                });
                mask |= 1 << (p + 1);
            }

            objects.push(ObjectAnnotation {
                class: cfg.class_name.clone(),
                bbox: holistic,
                parts: spec.node_names()[1..]
                    .iter()
                    .enumerate()
                    .map(|(p, name)| (name.clone(), (!occluded[p]).then_some(part_boxes[p])))
                    .collect(),
            });
            meta.push((mask, lowres, occluded, deformation));
        }

        let n_decoys = d.rng.random_range(cfg.decoys_per_image[0]..=cfg.decoys_per_image[1]);
        for _ in 0..n_decoys {
            let side = d.log_uniform(cfg.object_side);
            let aspect = d.log_uniform(cfg.aspect_range);
            let w = (side * aspect.sqrt()).min(img_w);
            let h = (side / aspect.sqrt()).min(img_h);
            let x1 = d.uniform(0.0, img_w - w);
            let y1 = d.uniform(0.0, img_h - h);
            let frame = BBox::from_corners(x1, y1, x1 + w, y1 + h);
            let lowres = frame.area() < cfg.lowres_area_threshold;
            let (hb, hj) = jittered(&mut d, &frame, cfg.hypothesis_jitter);
            let noise = d.normal() * cfg.score_noise_sigma;
            pending.push(PendingHyp {
                node: 0,
                bbox: hb,
                score: cfg.tp_score - cfg.jitter_penalty * hj + noise,
                truth: None,
            });
            for (p, &(_, _, rw, rh)) in layout.iter().enumerate() {
                // parts land anywhere in twice the frame with a random size
                let cx = x1 + d.uniform(-0.5, 1.5) * w;
                let cy = y1 + d.uniform(-0.5, 1.5) * h;
                let sx = d.log_uniform([0.5, 2.0]);
                let sy = d.log_uniform([0.5, 2.0]);
                let part = BBox::from_center(cx, cy, rw * w * sx, rh * h * sy);
                let (jb, j) = jittered(&mut d, &part, cfg.hypothesis_jitter);
                let noise = d.normal() * cfg.score_noise_sigma;
                if lowres {
                    continue;
                }
                pending.push(PendingHyp {
                    node: p + 1,
                    bbox: jb,
                    score: cfg.tp_score - cfg.jitter_penalty * j + noise,
                    truth: None,
                });
            }
        }

        for node in 0..k {
            let (rw, rh) = if node == 0 {
                (1.0, 1.0)
            } else {
                (layout[node - 1].2, layout[node - 1].3)
            };
            for _ in 0..cfg.distractors_per_node {
                let side = d.log_uniform(cfg.object_side);
                let aspect = d.log_uniform(cfg.aspect_range);
                let w = (side * aspect.sqrt() * rw).min(img_w);
                let h = (side / aspect.sqrt() * rh).min(img_h);
                let x1 = d.uniform(0.0, img_w - w);
                let y1 = d.uniform(0.0, img_h - h);
                let score = cfg.distractor_score + d.normal() * cfg.distractor_score_sigma;
                pending.push(PendingHyp {
                    node,
                    bbox: BBox::from_corners(x1, y1, x1 + w, y1 + h),
                    score,
                    truth: None,
                });
            }
        }

        pending.shuffle(&mut shuffle_rng);
        let mut true_ids: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); n_objects];
        for (id, h) in pending.iter().enumerate() {
            if let Some((o, n)) = h.truth {
                true_ids[o].insert(n, id as u64);
            }
        }
        let store = HypothesisStore::from_hypotheses(
            k,
            pending.iter().enumerate().map(|(id, h)| Hypothesis {
                id: id as u64,
                node: h.node,
                bbox: h.bbox,
                raw_score: h.score,
            }),
        )?;

        for (o, (mask, lowres, occluded, deformation)) in meta.into_iter().enumerate() {
            let pairs: Vec<(usize, u64)> = true_ids[o].iter().map(|(&n, &id)| (n, id)).collect();
            let config = Configuration::from_pairs(k, &pairs)?;
            debug_assert_eq!(config.pattern().mask(), mask);
            planted_objects.push(PlantedObject {
                image_id: image_id.clone(),
                object: o,
                planted_mask: mask,
                planted_score: score_configuration(&planted, &spec, &config, &store).ok(),
                true_hypotheses: true_ids[o]
                    .iter()
                    .map(|(&n, &id)| (spec.node_name(n).to_string(), id))
                    .collect(),
                lowres,
                occluded: occluded
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| **o)
                    .map(|(p, _)| spec.node_name(p + 1).to_string())
                    .collect(),
                deformation,
            });
        }

        hypotheses.extend(pending.iter().enumerate().map(|(id, h)| HypothesisRecord {
            image_id: image_id.clone(),
            node: h.node,
            id: id as u64,
            bbox: h.bbox,
            score: h.score,
        }));
        annotations.push(ImageAnnotation {
            image_id,
            negative,
            objects,
        });
    }

    Ok(SynthDataset {
        spec,
        annotations,
        hypotheses,
        truth: TruthRecord {
            generator: GENERATOR_VERSION.into(),
            seed: cfg.seed,
            class_name: cfg.class_name.clone(),
            planted_params: planted,
            objects: planted_objects,
        },
    })
}

/// Naive MAP search: scores every configuration of every pattern with
/// [`score_configuration`] and keeps the best under [`ranking_order`].
/// Configurations with degenerate pairwise geometry are skipped.
pub fn brute_force_best(
    hyps: &HypothesisStore,
    params: &ModelParams,
    spec: &GraphSpec,
) -> Result<Option<ScoredConfiguration>> {
    let count = hyps.configuration_count();
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let k = spec.num_nodes();
    let mut best: Option<ScoredConfiguration> = None;
    for mask in 1..=spec.num_patterns() as u32 {
        let pattern = DetectabilityPattern::new(mask, k)?;
        let on: Vec<usize> = pattern.on_nodes().collect();
        let lists: Vec<&[Hypothesis]> = on.iter().map(|&n| hyps.node(n)).collect();
        if lists.iter().any(|l| l.is_empty()) {
            continue;
        }
        let total: usize = lists.iter().map(|l| l.len()).product();
        for flat in 0..total {
            let mut rest = flat;
            let mut assignment = vec![None; k];
            for (p, &n) in on.iter().enumerate().rev() {
                let len = lists[p].len();
                assignment[n] = Some(lists[p][rest % len].id);
                rest /= len;
            }
            let cfg = Configuration::new(pattern, assignment)?;
            let score = match score_configuration(params, spec, &cfg, hyps) {
                Ok(s) => s,
                Err(Error::DegenerateGeometry(_)) => continue,
                Err(e) => return Err(e),
            };
            let cand = ScoredConfiguration {
                configuration: cfg,
                score,
            };
            let better = best
                .as_ref()
                .is_none_or(|b| ranking_order(&cand, b) == std::cmp::Ordering::Less);
            if better {
                best = Some(cand);
            }
        }
    }
    Ok(best)
}
