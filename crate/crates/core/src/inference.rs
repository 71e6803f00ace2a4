//! Hypothesis pruning and exact MAP search over all detectability patterns.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{
    edge_term, pairwise_features, unary_term, Configuration, DetectabilityPattern, GraphSpec, Hypothesis,
    HypothesisStore, ModelParams,
};

pub const DEFAULT_MAX_HYPOTHESES: usize = 15;
pub const DEFAULT_PRUNE_NMS_IOU: f64 = 0.5;
pub const DEFAULT_MAX_RAW_DETECTIONS: usize = 100;

/// Per-node candidate filtering applied before inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Candidates scoring below this are dropped; one entry per node.
    pub unary_threshold: Vec<f64>,
    pub nms_iou: f64,
    pub max_hypotheses: Vec<usize>,
}

impl PruneConfig {
    /// No score threshold, NMS at 0.5 and 15 hypotheses per node.
    pub fn permissive(num_nodes: usize) -> Self {
        PruneConfig {
            unary_threshold: vec![f64::MIN; num_nodes],
            nms_iou: DEFAULT_PRUNE_NMS_IOU,
            max_hypotheses: vec![DEFAULT_MAX_HYPOTHESES; num_nodes],
        }
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.unary_threshold.len() != num_nodes || self.max_hypotheses.len() != num_nodes {
            return Err(Error::InvalidConfig(format!(
                "prune config must list {num_nodes} thresholds and caps"
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::InvalidConfig("nms_iou must lie in (0, 1)".into()));
        }
        if self.max_hypotheses.contains(&0) {
            return Err(Error::InvalidConfig("max_hypotheses must be at least 1".into()));
        }
        if self.unary_threshold.iter().any(|t| t.is_nan()) {
            return Err(Error::InvalidConfig("unary threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Output control for [`detect`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Minimum score a configuration needs to be returned.
    pub score_threshold: f64,
    pub max_raw_detections: usize,
    /// Restricts the search to these masks; `None` searches every pattern.
    pub allowed_patterns: Option<Vec<u32>>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: f64::NEG_INFINITY,
            max_raw_detections: DEFAULT_MAX_RAW_DETECTIONS,
            allowed_patterns: None,
        }
    }
}

/// A configuration together with its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConfiguration {
    pub configuration: Configuration,
    pub score: f64,
}

/// Canonical ranking: descending score, then ascending pattern mask, then
/// ascending hypothesis ids in node order.
pub fn ranking_order(a: &ScoredConfiguration, b: &ScoredConfiguration) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.configuration.pattern().mask().cmp(&b.configuration.pattern().mask()))
        .then_with(|| a.configuration.ids().cmp(&b.configuration.ids()))
}

fn by_score_then_id(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.raw_score.total_cmp(&a.raw_score).then(a.id.cmp(&b.id))
}

/// Greedy NMS over boxes already sorted by preference; keeps indices whose
/// IOU with every kept box is at most `nms_iou`.
fn greedy_nms(boxes: &[BBox], nms_iou: f64, cap: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if kept.len() >= cap {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], b) <= nms_iou) {
            kept.push(i);
        }
    }
    kept
}

/// Thresholds, suppresses and truncates each node's hypotheses. Output
/// lists are ordered by descending raw score with ties broken by id.
pub fn prune_hypotheses(candidates: &HypothesisStore, cfg: &PruneConfig) -> HypothesisStore {
    let k = candidates.num_nodes();
    let mut out = HypothesisStore::empty(k);
    for node in 0..k {
        let threshold = cfg.unary_threshold.get(node).copied().unwrap_or(f64::NEG_INFINITY);
        let cap = cfg.max_hypotheses.get(node).copied().unwrap_or(DEFAULT_MAX_HYPOTHESES);
        let mut list: Vec<Hypothesis> = candidates
            .node(node)
            .iter()
            .filter(|h| h.raw_score >= threshold)
            .cloned()
            .collect();
        list.sort_by(by_score_then_id);
        let boxes: Vec<BBox> = list.iter().map(|h| h.bbox).collect();
        let kept = greedy_nms(&boxes, cfg.nms_iou, cap);
        let dst = out.node_mut(node);
        dst.extend(kept.into_iter().map(|i| list[i].clone()));
    }
    out
}

/// Per-node thresholds that keep at least `retain` of the activations
/// overlapping a ground-truth box of that node by `min_iou` or more.
///
/// `samples` yields, per image, the candidate store and the ground-truth
/// boxes of each node. Nodes without any overlapping activation get no
/// threshold (`f64::MIN`).
pub fn calibrate_unary_thresholds<'a>(
    num_nodes: usize,
    samples: impl IntoIterator<Item = (&'a HypothesisStore, Vec<Vec<BBox>>)>,
    min_iou: f64,
    retain: f64,
) -> Vec<f64> {
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); num_nodes];
    for (store, gt) in samples {
        for (node, node_scores) in scores.iter_mut().enumerate() {
            let Some(gt_boxes) = gt.get(node) else { continue };
            if node >= store.num_nodes() {
                continue;
            }
            for h in store.node(node) {
                if gt_boxes.iter().any(|g| iou(&h.bbox, g) >= min_iou) {
                    node_scores.push(h.raw_score);
                }
            }
        }
    }
    scores
        .into_iter()
        .map(|mut s| {
            if s.is_empty() {
                return f64::MIN;
            }
            s.sort_by(f64::total_cmp);
            let drop = ((1.0 - retain).max(0.0) * s.len() as f64).floor() as usize;
            s[drop.min(s.len() - 1)]
        })
        .collect()
}

struct Candidate {
    score: f64,
    mask: u32,
    ids: Vec<u64>,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.mask.cmp(&b.mask))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Exhaustive search over every allowed pattern and every assignment of
/// hypotheses to its on-nodes.
///
/// Weighted unary terms are computed once per hypothesis and edge terms
/// once per hypothesis pair, then shared by all patterns. Configurations
/// whose pairwise geometry is degenerate (zero-extent boxes) are skipped.
/// Returns configurations scoring at least `cfg.score_threshold`, best
/// first, at most `cfg.max_raw_detections` of them.
pub fn detect(
    hyps: &HypothesisStore,
    params: &ModelParams,
    spec: &GraphSpec,
    cfg: &DetectConfig,
) -> Result<Vec<ScoredConfiguration>> {
    params.check(spec)?;
    let k = spec.num_nodes();
    if hyps.num_nodes() != k {
        return Err(Error::InvalidConfiguration(format!(
            "hypothesis store has {} nodes, graph has {k}",
            hyps.num_nodes()
        )));
    }
    if cfg.max_raw_detections == 0 {
        return Err(Error::InvalidConfig("max_raw_detections must be at least 1".into()));
    }
    let slope = params.sigmoid_slope;

    let unary: Vec<Vec<f64>> = (0..k)
        .map(|n| {
            hyps.node(n)
                .iter()
                .map(|h| unary_term(params.unary_w[n], h.raw_score, slope))
                .collect()
        })
        .collect();

    // pair[e][a * n_j + b] for hypothesis a of node i and b of node j.
    let pair: Vec<Vec<Option<f64>>> = spec
        .edges()
        .enumerate()
        .map(|(e, (i, j))| {
            let w = &params.pairwise_w[e];
            let mut v = Vec::with_capacity(hyps.node(i).len() * hyps.node(j).len());
            for hi in hyps.node(i) {
                for hj in hyps.node(j) {
                    v.push(pairwise_features(&hi.bbox, &hj.bbox).ok().map(|psi| edge_term(w, &psi)));
                }
            }
            v
        })
        .collect();

    let masks: Vec<u32> = match &cfg.allowed_patterns {
        Some(list) => {
            let mut m: Vec<u32> = list
                .iter()
                .copied()
                .filter(|&m| DetectabilityPattern::new(m, k).is_ok())
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        }
        None => spec.patterns().map(|p| p.mask()).collect(),
    };

    let mut found: Vec<Candidate> = Vec::new();
    for mask in masks {
        let pattern = DetectabilityPattern::new(mask, k)?;
        let on: Vec<usize> = pattern.on_nodes().collect();
        if on.iter().any(|&n| hyps.node(n).is_empty()) {
            continue;
        }
        // (edge index, position of i in `on`, position of j in `on`, n_j)
        let mut on_edges = Vec::new();
        for (pi, &i) in on.iter().enumerate() {
            for (pj, &j) in on.iter().enumerate().skip(pi + 1) {
                on_edges.push((spec.edge_index(i, j), pi, pj, hyps.node(j).len()));
            }
        }
        let bias = params.bias(pattern);
        let sizes: Vec<usize> = on.iter().map(|&n| hyps.node(n).len()).collect();
        let mut idx = vec![0usize; on.len()];
        'assignments: loop {
            let mut total = 0.0;
            for (p, &n) in on.iter().enumerate() {
                total += unary[n][idx[p]];
            }
            let mut feasible = true;
            for &(e, pi, pj, nj) in &on_edges {
                match pair[e][idx[pi] * nj + idx[pj]] {
                    Some(v) => total += v,
                    None => {
                        feasible = false;
                        break;
                    }
                }
            }
            if feasible {
                total += bias;
                if total >= cfg.score_threshold {
                    found.push(Candidate {
                        score: total,
                        mask,
                        ids: on.iter().zip(&idx).map(|(&n, &a)| hyps.node(n)[a].id).collect(),
                    });
                }
            }
            // odometer, last on-node varies fastest
            let mut p = on.len();
            loop {
                if p == 0 {
                    break 'assignments;
                }
                p -= 1;
                idx[p] += 1;
                if idx[p] < sizes[p] {
                    break;
                }
                idx[p] = 0;
            }
        }
    }

    if found.len() > cfg.max_raw_detections {
        found.select_nth_unstable_by(cfg.max_raw_detections - 1, candidate_order);
        found.truncate(cfg.max_raw_detections);
    }
    found.sort_unstable_by(candidate_order);

    found
        .into_iter()
        .map(|c| {
            let pattern = DetectabilityPattern::new(c.mask, k)?;
            let mut assignment = vec![None; k];
            for (n, id) in pattern.on_nodes().zip(c.ids) {
                assignment[n] = Some(id);
            }
            Ok(ScoredConfiguration {
                configuration: Configuration::new(pattern, assignment)?,
                score: c.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::score_configuration;

    fn hyp(id: u64, node: usize, x: f64, score: f64) -> Hypothesis {
        Hypothesis {
            id,
            node,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            raw_score: score,
        }
    }

    #[test]
    fn prune_empty_and_threshold() {
        let empty = HypothesisStore::empty(3);
        let cfg = PruneConfig::permissive(3);
        assert!(prune_hypotheses(&empty, &cfg).is_empty());

        let store = HypothesisStore::from_hypotheses(1, vec![hyp(1, 0, 0.0, -2.0), hyp(2, 0, 50.0, -3.0)]).unwrap();
        let mut cfg = PruneConfig::permissive(1);
        cfg.unary_threshold[0] = -1.0;
        assert!(prune_hypotheses(&store, &cfg).is_empty());
    }

    #[test]
    fn prune_suppresses_overlap() {
        // boxes [0,10] and [1,11] over a 10-high strip: iou = 90/110 ~ 0.82
        let store = HypothesisStore::from_hypotheses(1, vec![hyp(1, 0, 1.0, 0.7), hyp(2, 0, 0.0, 0.9)]).unwrap();
        let out = prune_hypotheses(&store, &PruneConfig::permissive(1));
        assert_eq!(out.node(0).len(), 1);
        assert_eq!(out.node(0)[0].id, 2);
    }

    #[test]
    fn prune_orders_and_truncates() {
        let store = HypothesisStore::from_hypotheses(
            1,
            vec![
                hyp(5, 0, 0.0, 1.0),
                hyp(3, 0, 100.0, 1.0),
                hyp(4, 0, 200.0, 2.0),
                hyp(1, 0, 300.0, 0.5),
            ],
        )
        .unwrap();
        let mut cfg = PruneConfig::permissive(1);
        cfg.max_hypotheses[0] = 3;
        let ids: Vec<u64> = prune_hypotheses(&store, &cfg).node(0).iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![4, 3, 5]);
    }

    #[test]
    fn calibration_keeps_95_percent() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let hyps: Vec<Hypothesis> = (0..20)
            .map(|i| Hypothesis {
                id: i,
                node: 0,
                bbox: gt,
                raw_score: i as f64,
            })
            .collect();
        let store = HypothesisStore::from_hypotheses(1, hyps).unwrap();
        let t = calibrate_unary_thresholds(1, [(&store, vec![vec![gt]])], 0.4, 0.95);
        assert_eq!(t, vec![1.0]); // drops exactly one of 20
        let none = calibrate_unary_thresholds(2, [(&store, vec![vec![gt], vec![]])], 0.4, 0.95);
        assert_eq!(none[1], f64::MIN);
    }

    #[test]
    fn detect_counts_two_node_space() {
        let spec = GraphSpec::new(["a", "b"]).unwrap();
        let store = HypothesisStore::from_hypotheses(
            2,
            vec![
                hyp(1, 0, 0.0, 0.1),
                hyp(2, 0, 30.0, 0.2),
                hyp(3, 1, 5.0, 0.3),
                hyp(4, 1, 60.0, 0.4),
            ],
        )
        .unwrap();
        let params = ModelParams::unary_only(&spec, 1.0);
        let cfg = DetectConfig {
            max_raw_detections: 1000,
            ..DetectConfig::default()
        };
        let out = detect(&store, &params, &spec, &cfg).unwrap();
        assert_eq!(out.len(), 8);
        for w in out.windows(2) {
            assert_ne!(ranking_order(&w[0], &w[1]), Ordering::Greater);
        }
        for sc in &out {
            let direct = score_configuration(&params, &spec, &sc.configuration, &store).unwrap();
            assert_eq!(direct.to_bits(), sc.score.to_bits());
        }
    }

    #[test]
    fn detect_empty_and_errors() {
        let spec = GraphSpec::animal();
        let params = ModelParams::zeros(&spec);
        let out = detect(&HypothesisStore::empty(4), &params, &spec, &DetectConfig::default()).unwrap();
        assert!(out.is_empty());
        let wrong = ModelParams::zeros(&GraphSpec::new(["x"]).unwrap());
        assert!(detect(&HypothesisStore::empty(4), &wrong, &spec, &DetectConfig::default()).is_err());
    }

    #[test]
    fn detect_respects_pattern_restriction() {
        let spec = GraphSpec::new(["a", "b"]).unwrap();
        let store = HypothesisStore::from_hypotheses(2, vec![hyp(1, 0, 0.0, 0.1), hyp(3, 1, 5.0, 0.3)]).unwrap();
        let params = ModelParams::unary_only(&spec, 1.0);
        let cfg = DetectConfig {
            allowed_patterns: Some(vec![3]),
            ..DetectConfig::default()
        };
        let out = detect(&store, &params, &spec, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].configuration.pattern().mask(), 3);
    }

    #[test]
    fn ties_break_by_mask_then_ids() {
        let spec = GraphSpec::new(["a", "b"]).unwrap();
        // identical scores everywhere: zero weights
        let store =
            HypothesisStore::from_hypotheses(2, vec![hyp(7, 0, 0.0, 0.0), hyp(2, 0, 40.0, 0.0), hyp(3, 1, 5.0, 0.0)])
                .unwrap();
        let params = ModelParams::zeros(&spec);
        let out = detect(&store, &params, &spec, &DetectConfig::default()).unwrap();
        let keys: Vec<(u32, Vec<u64>)> = out
            .iter()
            .map(|s| (s.configuration.pattern().mask(), s.configuration.ids()))
            .collect();
        assert_eq!(
            keys,
            vec![
                (1, vec![2]),
                (1, vec![7]),
                (2, vec![3]),
                (3, vec![2, 3]),
                (3, vec![7, 3])
            ]
        );
    }
}
