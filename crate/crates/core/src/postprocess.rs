//! Object boxes for holistic-off detections and part-based non-maximum
//! suppression.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruthObject;
use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox};
use crate::inference::{ranking_order, ScoredConfiguration};
use crate::model::{Configuration, DetectabilityPattern, GraphSpec, HypothesisStore};

/// Singular values below this fraction of the largest count as zero.
const RANK_RTOL: f64 = 1e-9;

/// Affine map from the part corners `g(z)` (ascending node order, each as
/// `x1, y1, x2, y2`) plus a constant 1 to the object corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    pub pattern: u32,
    /// 4 rows (x1, y1, x2, y2) by `4n + 1` columns.
    pub weights: Vec<Vec<f64>>,
    pub trained_on: usize,
    /// When set the regressor predicts the union of the part boxes.
    pub fallback: bool,
}

impl BoxRegressor {
    pub fn fallback(pattern: DetectabilityPattern, trained_on: usize) -> Self {
        BoxRegressor {
            pattern: pattern.mask(),
            weights: Vec::new(),
            trained_on,
            fallback: true,
        }
    }

    /// Number of parts the pattern switches on.
    pub fn num_parts(&self) -> usize {
        self.pattern.count_ones() as usize
    }

    /// Predicts the object box from the boxes of the on-parts in node order.
    pub fn predict(&self, part_boxes: &[BBox]) -> Result<BBox> {
        if part_boxes.len() != self.num_parts() {
            return Err(Error::DimensionMismatch {
                expected: self.num_parts(),
                actual: part_boxes.len(),
            });
        }
        if self.fallback {
            return union_box(part_boxes);
        }
        let g = design_row(part_boxes);
        let out: Vec<f64> = self
            .weights
            .iter()
            .map(|row| row.iter().zip(&g).map(|(w, x)| w * x).sum())
            .collect();
        Ok(BBox::from_corners(out[0], out[1], out[2], out[3]))
    }
}

/// One training pair for box regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub pattern: DetectabilityPattern,
    /// Boxes of the pattern's on-parts, ascending node order.
    pub part_boxes: Vec<BBox>,
    pub target: BBox,
}

fn design_row(part_boxes: &[BBox]) -> Vec<f64> {
    let mut g: Vec<f64> = part_boxes.iter().flat_map(|b| b.corners()).collect();
    g.push(1.0);
    g
}

/// Samples from annotated objects: every holistic-off pattern whose parts
/// are all annotated on an object yields one sample mapping the annotated
/// part boxes to the annotated object box.
pub fn regression_samples(spec: &GraphSpec, objects: &[GroundTruthObject]) -> Vec<RegressionSample> {
    let mut out = Vec::new();
    for obj in objects {
        let Some(target) = obj.boxes.first().copied().flatten() else {
            continue;
        };
        for pattern in spec.patterns().filter(|p| !p.is_holistic_on()) {
            let boxes: Option<Vec<BBox>> = pattern
                .on_nodes()
                .map(|n| obj.boxes.get(n).copied().flatten())
                .collect();
            if let Some(part_boxes) = boxes {
                out.push(RegressionSample {
                    pattern,
                    part_boxes,
                    target,
                });
            }
        }
    }
    out
}

/// Least-squares regressor per holistic-off pattern. Patterns with fewer
/// than `4n + 1` linearly independent samples get a union-box fallback.
/// Samples for holistic-on patterns are ignored.
pub fn fit_box_regressors(samples: &[RegressionSample]) -> BTreeMap<u32, BoxRegressor> {
    let mut by_pattern: BTreeMap<u32, Vec<&RegressionSample>> = BTreeMap::new();
    for s in samples {
        if s.pattern.is_holistic_on() || s.part_boxes.len() != s.pattern.count_on() {
            continue;
        }
        by_pattern.entry(s.pattern.mask()).or_default().push(s);
    }
    by_pattern
        .into_iter()
        .map(|(mask, group)| {
            let pattern = group[0].pattern;
            (mask, fit_one(pattern, &group))
        })
        .collect()
}

fn fit_one(pattern: DetectabilityPattern, samples: &[&RegressionSample]) -> BoxRegressor {
    let cols = 4 * pattern.count_on() + 1;
    let rows = samples.len();
    if rows < cols {
        return BoxRegressor::fallback(pattern, rows);
    }
    let x = DMatrix::from_fn(rows, cols, |r, c| design_row(&samples[r].part_boxes)[c]);
    let y = DMatrix::from_fn(rows, 4, |r, c| samples[r].target.corners()[c]);
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * RANK_RTOL;
    if smax <= 0.0 || svd.rank(eps) < cols {
        return BoxRegressor::fallback(pattern, rows);
    }
    let Ok(beta) = svd.solve(&y, eps) else {
        return BoxRegressor::fallback(pattern, rows);
    };
    // beta is cols x 4; store it row-major per output corner
    let weights = (0..4).map(|k| (0..cols).map(|c| beta[(c, k)]).collect()).collect();
    BoxRegressor {
        pattern: pattern.mask(),
        weights,
        trained_on: rows,
        fallback: false,
    }
}

/// Object box of a configuration: the holistic hypothesis box when the
/// holistic node is on, otherwise the pattern's regressor prediction (or
/// the union of part boxes when no regressor exists).
pub fn generate_box(
    regressors: &BTreeMap<u32, BoxRegressor>,
    cfg: &Configuration,
    hyps: &HypothesisStore,
) -> Result<BBox> {
    let pattern = cfg.pattern();
    if let Some(id) = cfg.hypothesis_id(0) {
        return Ok(hyps.resolve(0, id)?.bbox);
    }
    let part_boxes = cfg
        .assigned()
        .map(|(n, id)| hyps.resolve(n, id).map(|h| h.bbox))
        .collect::<Result<Vec<_>>>()?;
    match regressors.get(&pattern.mask()) {
        Some(r) => r.predict(&part_boxes),
        None => union_box(&part_boxes),
    }
}

/// Greedy suppression by shared hypotheses: walking detections in ranking
/// order, a detection is kept only if none of its `(node, id)` hypotheses
/// is used by an already kept detection.
pub fn part_nms(mut detections: Vec<ScoredConfiguration>) -> Vec<ScoredConfiguration> {
    detections.sort_by(ranking_order);
    let mut used: HashSet<(usize, u64)> = HashSet::new();
    detections
        .into_iter()
        .filter(|d| {
            let refs: Vec<(usize, u64)> = d.configuration.assigned().collect();
            if refs.iter().any(|r| used.contains(r)) {
                return false;
            }
            used.extend(refs);
            true
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hypothesis;

    fn sc(score: f64, pairs: &[(usize, u64)]) -> ScoredConfiguration {
        ScoredConfiguration {
            configuration: Configuration::from_pairs(4, pairs).unwrap(),
            score,
        }
    }

    #[test]
    fn part_nms_hand_case() {
        let d1 = sc(0.9, &[(0, 1), (1, 2)]);
        let d2 = sc(0.8, &[(1, 2), (2, 3)]);
        let d3 = sc(0.7, &[(3, 4)]);
        let kept = part_nms(vec![d3.clone(), d2, d1.clone()]);
        assert_eq!(kept, vec![d1, d3]);
    }

    #[test]
    fn part_nms_disjoint_and_identical() {
        let a = sc(0.9, &[(0, 1)]);
        let b = sc(0.5, &[(1, 1)]); // same id, different node: not shared
        let c = sc(0.1, &[(2, 7), (3, 8)]);
        assert_eq!(part_nms(vec![a.clone(), b.clone(), c.clone()]), vec![a.clone(), b, c]);
        let low = sc(0.2, &[(0, 1)]);
        assert_eq!(part_nms(vec![low, a.clone()]), vec![a]);
    }

    fn pattern(mask: u32) -> DetectabilityPattern {
        DetectabilityPattern::new(mask, 4).unwrap()
    }

    #[test]
    fn fallback_below_sample_count() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let s = RegressionSample {
            pattern: pattern(0b0110),
            part_boxes: vec![b, b.translate(3.0, 3.0)],
            target: b,
        };
        let r = fit_box_regressors(&[s]);
        let reg = &r[&0b0110];
        assert!(reg.fallback);
        assert_eq!(reg.trained_on, 1);
        assert_eq!(
            reg.predict(&[b, b.translate(3.0, 3.0)]).unwrap(),
            BBox::new(0.0, 0.0, 7.0, 7.0).unwrap()
        );
    }

    #[test]
    fn rank_deficient_falls_back() {
        // 5 identical samples for a single-part pattern: rank 1 < 5 columns
        let b = BBox::new(1.0, 2.0, 5.0, 9.0).unwrap();
        let samples: Vec<_> = (0..8)
            .map(|_| RegressionSample {
                pattern: pattern(0b0010),
                part_boxes: vec![b],
                target: b,
            })
            .collect();
        assert!(fit_box_regressors(&samples)[&0b0010].fallback);
    }

    #[test]
    fn generate_box_cases() {
        let root = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let head = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let legs = BBox::new(2.0, 6.0, 9.0, 10.0).unwrap();
        let hyps = HypothesisStore::from_hypotheses(
            4,
            vec![
                Hypothesis {
                    id: 1,
                    node: 0,
                    bbox: root,
                    raw_score: 0.0,
                },
                Hypothesis {
                    id: 2,
                    node: 1,
                    bbox: head,
                    raw_score: 0.0,
                },
                Hypothesis {
                    id: 3,
                    node: 3,
                    bbox: legs,
                    raw_score: 0.0,
                },
            ],
        )
        .unwrap();
        let regs = BTreeMap::new();
        let on = Configuration::from_pairs(4, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(generate_box(&regs, &on, &hyps).unwrap(), root);
        let off = Configuration::from_pairs(4, &[(1, 2), (3, 3)]).unwrap();
        assert_eq!(
            generate_box(&regs, &off, &hyps).unwrap(),
            BBox::new(1.0, 1.0, 9.0, 10.0).unwrap()
        );
    }

    #[test]
    fn predictions_are_reordered() {
        // weights that swap x1 and x2
        let reg = BoxRegressor {
            pattern: 0b0010,
            weights: vec![
                vec![0.0, 0.0, 1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0, 0.0],
            ],
            trained_on: 5,
            fallback: false,
        };
        let b = BBox::new(1.0, 2.0, 5.0, 9.0).unwrap();
        let p = reg.predict(&[b]).unwrap();
        assert!(p.is_valid());
        assert_eq!(p, b);
    }
}
