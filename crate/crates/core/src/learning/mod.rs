//! Switch-label assignment, hard-negative mining and the training loop.

mod solver;

pub use solver::{
    hinge, objective, solve_max_margin, ExampleSource, LabeledExample, MaxMarginSolver, Sign, SvmSolution,
};

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruthObject, TrainingImage};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::{
    calibrate_unary_thresholds, detect, prune_hypotheses, DetectConfig, PruneConfig, DEFAULT_MAX_HYPOTHESES,
    DEFAULT_PRUNE_NMS_IOU,
};
use crate::model::{
    feature_vector, Configuration, DetectabilityPattern, GraphSpec, HypothesisStore, ModelParams, DEFAULT_SIGMOID_SLOPE,
};
use crate::pipeline::TrainedModel;
use crate::postprocess::{fit_box_regressors, regression_samples};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Slack penalty.
    pub c: f64,
    /// Overlap a hypothesis needs with a ground-truth box to switch its node on.
    pub detect_iou: f64,
    pub mining_rounds: usize,
    pub negatives_per_image: usize,
    /// Absolute duality-gap tolerance of the solver.
    pub solver_tolerance: f64,
    pub solver_max_epochs: usize,
    pub seed: u64,
    pub sigmoid_slope: f64,
    /// Explicit pruning; when absent thresholds are calibrated on the
    /// positives so that `threshold_retain` of overlapping activations survive.
    pub prune: Option<PruneConfig>,
    pub threshold_retain: f64,
    pub nms_iou: f64,
    pub max_hypotheses: usize,
    /// Restricts both labelling and inference to these masks.
    pub allowed_patterns: Option<Vec<u32>>,
    pub class_name: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 1.0,
            detect_iou: 0.40,
            mining_rounds: 5,
            negatives_per_image: 10,
            solver_tolerance: 1e-3,
            solver_max_epochs: 200_000,
            seed: 0,
            sigmoid_slope: DEFAULT_SIGMOID_SLOPE,
            prune: None,
            threshold_retain: 0.95,
            nms_iou: DEFAULT_PRUNE_NMS_IOU,
            max_hypotheses: DEFAULT_MAX_HYPOTHESES,
            allowed_patterns: None,
            class_name: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig("C must be positive".into()));
        }
        if !(self.detect_iou > 0.0 && self.detect_iou < 1.0) {
            return Err(Error::InvalidConfig("detect_iou must lie in (0, 1)".into()));
        }
        if self.mining_rounds == 0 || self.negatives_per_image == 0 {
            return Err(Error::InvalidConfig(
                "mining_rounds and negatives_per_image must be positive".into(),
            ));
        }
        if self.solver_tolerance.is_nan() || self.solver_tolerance <= 0.0 {
            return Err(Error::InvalidConfig("solver_tolerance must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> MaxMarginSolver {
        MaxMarginSolver {
            max_epochs: self.solver_max_epochs,
            seed: self.seed,
            ..MaxMarginSolver::new(self.c, self.solver_tolerance)
        }
    }

    fn pattern_allowed(&self, mask: u32) -> bool {
        self.allowed_patterns.as_ref().is_none_or(|list| list.contains(&mask))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelOutcome {
    Labeled(Configuration),
    /// No node had a qualifying hypothesis.
    NoQualifyingNode,
    /// The labelled pattern is outside the allowed set.
    PatternNotAllowed(u32),
}

/// Decides which nodes of a ground-truth object are detectable.
///
/// Node `i` is on when the object has a box for it and one of the node's
/// (already pruned) hypotheses overlaps that box with IOU at least
/// `cfg.detect_iou`; the highest-scoring such hypothesis is assigned.
pub fn assign_switch_labels(gt: &GroundTruthObject, hyps: &HypothesisStore, cfg: &TrainConfig) -> Result<LabelOutcome> {
    gt.holistic()?;
    let k = hyps.num_nodes();
    if gt.boxes.len() != k {
        return Err(Error::MalformedAnnotation(format!(
            "object has {} node boxes, graph has {k}",
            gt.boxes.len()
        )));
    }
    let mut pairs = Vec::new();
    for (node, gt_box) in gt.boxes.iter().enumerate() {
        let Some(gt_box) = gt_box else { continue };
        let best = hyps
            .node(node)
            .iter()
            .filter(|h| iou(&h.bbox, gt_box) >= cfg.detect_iou)
            .min_by(|a, b| b.raw_score.total_cmp(&a.raw_score).then(a.id.cmp(&b.id)));
        if let Some(h) = best {
            pairs.push((node, h.id));
        }
    }
    if pairs.is_empty() {
        return Ok(LabelOutcome::NoQualifyingNode);
    }
    let cfg_out = Configuration::from_pairs(k, &pairs)?;
    let mask = cfg_out.pattern().mask();
    if !cfg.pattern_allowed(mask) {
        return Ok(LabelOutcome::PatternNotAllowed(mask));
    }
    Ok(LabelOutcome::Labeled(cfg_out))
}

/// A negative image ready for mining: id plus pruned hypotheses.
pub struct NegativeImage<'a> {
    pub image_id: &'a str,
    pub hypotheses: &'a HypothesisStore,
}

/// Runs inference on every negative image and turns each configuration
/// scoring above -1 into a negative example, keeping at most
/// `cfg.negatives_per_image` of the highest scoring per image.
pub fn mine_hard_negatives(
    params: &ModelParams,
    spec: &GraphSpec,
    negatives: &[NegativeImage<'_>],
    cfg: &TrainConfig,
) -> Result<Vec<LabeledExample>> {
    let dcfg = DetectConfig {
        score_threshold: -1.0,
        max_raw_detections: cfg.negatives_per_image,
        allowed_patterns: cfg.allowed_patterns.clone(),
    };
    let per_image: Vec<Vec<LabeledExample>> = negatives
        .par_iter()
        .map(|img| {
            detect(img.hypotheses, params, spec, &dcfg)?
                .into_iter()
                .filter(|d| d.score > -1.0)
                .map(|d| {
                    Ok(LabeledExample {
                        phi: feature_vector(spec, &d.configuration, img.hypotheses, params.sigmoid_slope)?,
                        sign: Sign::Negative,
                        source: Some(ExampleSource {
                            image_id: img.image_id.to_string(),
                            configuration: d.configuration,
                        }),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Counts from switch labelling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub objects: usize,
    pub labeled: usize,
    pub rejected_no_node: usize,
    pub rejected_pattern: usize,
    /// Labelled positives per pattern mask.
    pub patterns: BTreeMap<u32, usize>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub objective: f64,
    pub duality_gap: f64,
    pub epochs: usize,
    pub newton_steps: usize,
    pub converged: bool,
    pub examples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub new_negatives: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub rounds: Vec<RoundLog>,
    pub labels: LabelStats,
    /// The final example set (positives then mined negatives).
    pub examples: Vec<LabeledExample>,
    /// Parameters after each round, for diagnostics.
    pub round_params: Vec<Vec<f64>>,
}

fn example_key(e: &LabeledExample) -> Option<(String, Configuration)> {
    e.source.as_ref().map(|s| (s.image_id.clone(), s.configuration.clone()))
}

/// Full training procedure: prune, label positives, then alternate solving
/// and hard-negative mining. Positives keep their labels for all rounds.
pub fn train(spec: &GraphSpec, images: &[TrainingImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = spec.num_nodes();
    if let Some(list) = &cfg.allowed_patterns {
        for &m in list {
            DetectabilityPattern::new(m, k)?;
        }
    }

    let positives: Vec<&TrainingImage> = images
        .iter()
        .filter(|im| !im.negative && !im.objects.is_empty())
        .collect();

    let prune = match &cfg.prune {
        Some(p) => p.clone(),
        None => {
            let samples = positives.iter().map(|im| {
                let mut per_node: Vec<Vec<BBox>> = vec![Vec::new(); k];
                for obj in &im.objects {
                    for (n, b) in obj.boxes.iter().enumerate() {
                        if let Some(b) = b {
                            per_node[n].push(*b);
                        }
                    }
                }
                (&im.hypotheses, per_node)
            });
            PruneConfig {
                unary_threshold: calibrate_unary_thresholds(k, samples, cfg.detect_iou, cfg.threshold_retain),
                nms_iou: cfg.nms_iou,
                max_hypotheses: vec![cfg.max_hypotheses; k],
            }
        }
    };
    prune.validate(k)?;

    let pruned: Vec<HypothesisStore> = images
        .par_iter()
        .map(|im| prune_hypotheses(&im.hypotheses, &prune))
        .collect();

    let mut stats = LabelStats::default();
    let mut examples = Vec::new();
    for (im, hyps) in images.iter().zip(&pruned) {
        if im.negative {
            continue;
        }
        for obj in &im.objects {
            stats.objects += 1;
            match assign_switch_labels(obj, hyps, cfg)? {
                LabelOutcome::Labeled(c) => {
                    stats.labeled += 1;
                    *stats.patterns.entry(c.pattern().mask()).or_default() += 1;
                    examples.push(LabeledExample {
                        phi: feature_vector(spec, &c, hyps, cfg.sigmoid_slope)?,
                        sign: Sign::Positive,
                        source: Some(ExampleSource {
                            image_id: im.image_id.clone(),
                            configuration: c,
                        }),
                    });
                }
                LabelOutcome::NoQualifyingNode => stats.rejected_no_node += 1,
                LabelOutcome::PatternNotAllowed(_) => stats.rejected_pattern += 1,
            }
        }
    }
    if stats.labeled == 0 {
        return Err(Error::NoPositives { total: stats.objects });
    }
    let num_positives = examples.len();

    let negatives: Vec<NegativeImage<'_>> = images
        .iter()
        .zip(&pruned)
        .filter(|(im, _)| im.negative)
        .map(|(im, h)| NegativeImage {
            image_id: &im.image_id,
            hypotheses: h,
        })
        .collect();

    let mut bootstrap = ModelParams::unary_only(spec, 1.0);
    bootstrap.sigmoid_slope = cfg.sigmoid_slope;
    let mut seen: HashSet<(String, Configuration)> = HashSet::new();
    for e in mine_hard_negatives(&bootstrap, spec, &negatives, cfg)? {
        if let Some(key) = example_key(&e) {
            if seen.insert(key) {
                examples.push(e);
            }
        }
    }

    let solver = cfg.solver();
    let mut rounds = Vec::new();
    let mut round_params = Vec::new();
    let mut params = bootstrap;
    for round in 1..=cfg.mining_rounds {
        let sol = solver.solve(&examples)?;
        params = ModelParams::from_flat(spec, &sol.beta, cfg.sigmoid_slope)?;
        round_params.push(sol.beta.clone());
        let mut fresh = Vec::new();
        for e in mine_hard_negatives(&params, spec, &negatives, cfg)? {
            if let Some(key) = example_key(&e) {
                if seen.insert(key) {
                    fresh.push(e);
                }
            }
        }
        rounds.push(RoundLog {
            round,
            objective: sol.objective,
            duality_gap: sol.gap(),
            epochs: sol.epochs,
            newton_steps: sol.newton_steps,
            converged: sol.converged,
            examples: examples.len(),
            positives: num_positives,
            negatives: examples.len() - num_positives,
            new_negatives: fresh.len(),
        });
        if fresh.is_empty() {
            break;
        }
        if round < cfg.mining_rounds {
            examples.extend(fresh);
        }
    }

    let all_objects: Vec<GroundTruthObject> = positives.iter().flat_map(|im| im.objects.iter().cloned()).collect();
    let box_regressors = fit_box_regressors(&regression_samples(spec, &all_objects));

    Ok(TrainOutcome {
        model: TrainedModel {
            params,
            prune,
            box_regressors,
            class_name: cfg.class_name.clone().unwrap_or_else(|| "object".into()),
            allowed_patterns: cfg.allowed_patterns.clone(),
        },
        rounds,
        labels: stats,
        examples,
        round_params,
    })
}
