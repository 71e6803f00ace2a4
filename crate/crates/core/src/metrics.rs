//! Detection metrics: all-points interpolated AP, part localization
//! (POP / PCP), and the holistic-only rate per size class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DetectionRecord, ImageAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::GraphSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ap_iou: f64,
    /// A detection explains a ground-truth object for POP/PCP when its box
    /// overlaps the object box by more than this.
    pub pcp_object_iou: f64,
    /// A part is correctly localized above this overlap.
    pub pcp_part_iou: f64,
    /// Count ground-truth objects without an explaining detection as
    /// failures in the POP/PCP denominators instead of excluding them.
    pub include_unmatched: bool,
    /// Detections scoring below this are ignored by the size diagnostic.
    pub size_score_threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ap_iou: 0.5,
            pcp_object_iou: 0.5,
            pcp_part_iou: 0.4,
            include_unmatched: false,
            size_score_threshold: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ap_iou", self.ap_iou),
            ("pcp_object_iou", self.pcp_object_iou),
            ("pcp_part_iou", self.pcp_part_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One point of the precision/recall curve, after the detection at `score`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub curve: Vec<PrPoint>,
}

/// Detection reduced to what matching needs.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox<'a> {
    pub image_id: &'a str,
    pub score: f64,
    pub bbox: BBox,
}

impl<'a> From<&'a DetectionRecord> for ScoredBox<'a> {
    fn from(d: &'a DetectionRecord) -> Self {
        ScoredBox {
            image_id: &d.image_id,
            score: d.score,
            bbox: d.bbox,
        }
    }
}

/// Indices of `dets` in ranking order: descending score, then image id,
/// then input position.
fn rank(dets: &[ScoredBox<'_>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then_with(|| dets[a].image_id.cmp(dets[b].image_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching in ranking order. Each detection takes the unmatched
/// ground truth of its image with the highest IOU, if that IOU reaches
/// `iou_thresh`. Returns `(detection index, matched gt index)` in rank order.
pub fn greedy_match(
    dets: &[ScoredBox<'_>],
    gts: &BTreeMap<String, Vec<BBox>>,
    iou_thresh: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut taken: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    rank(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let (Some(boxes), Some(used)) = (gts.get(det.image_id), taken.get_mut(det.image_id)) else {
                return (d, None);
            };
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(g, _)| !used[*g])
                .map(|(g, b)| (g, iou(&det.bbox, b)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((g, v)) if v >= iou_thresh => {
                    used[g] = true;
                    (d, Some(g))
                }
                _ => (d, None),
            }
        })
        .collect()
}

/// VOC-style average precision with all-points interpolation: precision at
/// each recall level is replaced by the best precision at any higher
/// recall, and the area under that envelope is returned.
pub fn average_precision(dets: &[ScoredBox<'_>], gts: &BTreeMap<String, Vec<BBox>>, iou_thresh: f64) -> ApResult {
    let num_gt: usize = gts.values().map(Vec::len).sum();
    let matches = greedy_match(dets, gts, iou_thresh);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (d, m) in &matches {
        if m.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push(PrPoint {
            score: dets[*d].score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    let ap = if num_gt == 0 { 0.0 } else { interpolated_area(&curve) };
    ApResult {
        ap,
        num_gt,
        true_positives: tp,
        false_positives: fp,
        curve,
    }
}

fn interpolated_area(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    area
}

/// POP and PCP for one part, in percent. `None` when no object qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartLocalization {
    pub part: String,
    /// Objects entering both percentages.
    pub objects: usize,
    /// Objects whose detection switches the part on.
    pub estimated: usize,
    /// Objects whose detection localizes the part correctly.
    pub correct: usize,
    pub pop: Option<f64>,
    pub pcp: Option<f64>,
}

/// Ground-truth object boxes of one class, grouped by image.
pub fn ground_truth_boxes(annotations: &[ImageAnnotation], class: &str) -> BTreeMap<String, Vec<BBox>> {
    annotations
        .iter()
        .filter(|a| !a.negative)
        .map(|a| {
            (
                a.image_id.clone(),
                a.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect(),
            )
        })
        .collect()
}

/// Part localization. Each ground-truth object is explained by the
/// highest-ranked detection overlapping its box by more than
/// `pcp_object_iou`; objects without one are excluded unless
/// `include_unmatched` is set. For every part the denominator is the set
/// of such objects that annotate the part, so PCP never exceeds POP.
pub fn pcp_pop(
    dets: &[DetectionRecord],
    annotations: &[ImageAnnotation],
    spec: &GraphSpec,
    class: &str,
    cfg: &EvalConfig,
) -> Vec<PartLocalization> {
    let mut by_image: BTreeMap<&str, Vec<&DetectionRecord>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.class == class) {
        by_image.entry(d.image_id.as_str()).or_default().push(d);
    }
    let mut rows: Vec<PartLocalization> = spec.node_names()[1..]
        .iter()
        .map(|n| PartLocalization {
            part: n.clone(),
            objects: 0,
            estimated: 0,
            correct: 0,
            pop: None,
            pcp: None,
        })
        .collect();

    for ann in annotations.iter().filter(|a| !a.negative) {
        let candidates = by_image.get(ann.image_id.as_str());
        for obj in ann.objects.iter().filter(|o| o.class == class) {
            let best = candidates.and_then(|c| {
                c.iter()
                    .filter(|d| iou(&d.bbox, &obj.bbox) > cfg.pcp_object_iou)
                    .min_by(|a, b| b.score.total_cmp(&a.score).then(a.pattern_mask.cmp(&b.pattern_mask)))
            });
            if best.is_none() && !cfg.include_unmatched {
                continue;
            }
            for row in rows.iter_mut() {
                let Some(Some(gt_part)) = obj.parts.get(&row.part) else {
                    continue;
                };
                row.objects += 1;
                if let Some(part_box) = best.and_then(|d| d.part_boxes.get(&row.part)) {
                    row.estimated += 1;
                    if iou(part_box, gt_part) > cfg.pcp_part_iou {
                        row.correct += 1;
                    }
                }
            }
        }
    }
    for row in &mut rows {
        if row.objects > 0 {
            row.pop = Some(100.0 * row.estimated as f64 / row.objects as f64);
            row.pcp = Some(100.0 * row.correct as f64 / row.objects as f64);
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    XS,
    S,
    M,
    L,
    XL,
}

impl SizeClass {
    pub const ALL: [SizeClass; 5] = [SizeClass::XS, SizeClass::S, SizeClass::M, SizeClass::L, SizeClass::XL];
}

/// Percentile size classes: bottom 10% XS, next 20% S, next 40% M, next
/// 20% L, top 10% XL, with boundaries at `floor(fraction * N)`. Equal areas
/// keep their input order.
pub fn size_classes(areas: &[f64]) -> Vec<SizeClass> {
    let n = areas.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| areas[a].total_cmp(&areas[b]).then(a.cmp(&b)));
    let bound = |f: f64| (f * n as f64).floor() as usize;
    let (b_xs, b_s, b_m, b_l) = (bound(0.1), bound(0.3), bound(0.7), bound(0.9));
    let mut out = vec![SizeClass::M; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < b_xs {
            SizeClass::XS
        } else if rank < b_s {
            SizeClass::S
        } else if rank < b_m {
            SizeClass::M
        } else if rank < b_l {
            SizeClass::L
        } else {
            SizeClass::XL
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub instances: usize,
    pub recalled: usize,
    pub holistic_only: usize,
    /// Percentage of recalled instances detected with the holistic-only
    /// pattern; `None` when nothing in the class was recalled.
    pub rate: Option<f64>,
}

/// Detection with the pattern it was found with.
#[derive(Debug, Clone, Copy)]
pub struct PatternedBox<'a> {
    pub scored: ScoredBox<'a>,
    pub pattern_mask: u32,
}

/// Share of recalled instances per size class that were detected with the
/// holistic-only pattern. Size classes are assigned over all ground-truth
/// instances (images in id order, objects in file order); recall uses the
/// AP matching at `iou_thresh` over detections scoring at least
/// `score_threshold`.
pub fn holistic_only_rate_by_size(
    dets: &[PatternedBox<'_>],
    gts: &BTreeMap<String, Vec<BBox>>,
    score_threshold: f64,
    iou_thresh: f64,
) -> BTreeMap<SizeClass, SizeRow> {
    let kept: Vec<&PatternedBox<'_>> = dets.iter().filter(|d| d.scored.score >= score_threshold).collect();
    let scored: Vec<ScoredBox<'_>> = kept.iter().map(|d| d.scored).collect();
    let mut matched_mask: BTreeMap<(&str, usize), u32> = BTreeMap::new();
    for (d, g) in greedy_match(&scored, gts, iou_thresh) {
        if let Some(g) = g {
            matched_mask.insert((kept[d].scored.image_id, g), kept[d].pattern_mask);
        }
    }

    let instances: Vec<(&str, usize, f64)> = gts
        .iter()
        .flat_map(|(img, boxes)| boxes.iter().enumerate().map(move |(g, b)| (img.as_str(), g, b.area())))
        .collect();
    let areas: Vec<f64> = instances.iter().map(|i| i.2).collect();
    let classes = size_classes(&areas);

    let mut table: BTreeMap<SizeClass, SizeRow> = SizeClass::ALL
        .iter()
        .map(|&c| {
            (
                c,
                SizeRow {
                    instances: 0,
                    recalled: 0,
                    holistic_only: 0,
                    rate: None,
                },
            )
        })
        .collect();
    for ((img, g, _), class) in instances.iter().zip(classes) {
        let row = table.get_mut(&class).expect("all classes present");
        row.instances += 1;
        if let Some(&mask) = matched_mask.get(&(*img, *g)) {
            row.recalled += 1;
            if mask == 1 {
                row.holistic_only += 1;
            }
        }
    }
    for row in table.values_mut() {
        if row.recalled > 0 {
            row.rate = Some(100.0 * row.holistic_only as f64 / row.recalled as f64);
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub parts: Vec<PartLocalization>,
    pub size_table: BTreeMap<SizeClass, SizeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: EvalConfig,
    pub classes: BTreeMap<String, ClassSummary>,
}

/// Evaluates every class that appears in the annotations or detections.
/// Returns the summary and the PR curve per class.
pub fn evaluate(
    dets: &[DetectionRecord],
    annotations: &[ImageAnnotation],
    spec: &GraphSpec,
    cfg: &EvalConfig,
) -> Result<(EvalSummary, BTreeMap<String, Vec<PrPoint>>)> {
    cfg.validate()?;
    let mut class_names: Vec<&str> = annotations
        .iter()
        .flat_map(|a| a.objects.iter().map(|o| o.class.as_str()))
        .chain(dets.iter().map(|d| d.class.as_str()))
        .collect();
    class_names.sort_unstable();
    class_names.dedup();

    let mut classes = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for class in class_names {
        let gts = ground_truth_boxes(annotations, class);
        let class_dets: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class == class).collect();
        let scored: Vec<ScoredBox<'_>> = class_dets.iter().map(|d| ScoredBox::from(*d)).collect();
        let ap = average_precision(&scored, &gts, cfg.ap_iou);
        let patterned: Vec<PatternedBox<'_>> = class_dets
            .iter()
            .map(|d| PatternedBox {
                scored: ScoredBox::from(*d),
                pattern_mask: d.pattern_mask,
            })
            .collect();
        let size_table = holistic_only_rate_by_size(
            &patterned,
            &gts,
            cfg.size_score_threshold.unwrap_or(f64::NEG_INFINITY),
            cfg.ap_iou,
        );
        let owned: Vec<DetectionRecord> = class_dets.iter().map(|d| (*d).clone()).collect();
        classes.insert(
            class.to_string(),
            ClassSummary {
                ap: ap.ap,
                num_gt: ap.num_gt,
                num_detections: class_dets.len(),
                parts: pcp_pop(&owned, annotations, spec, class, cfg),
                size_table,
            },
        );
        curves.insert(class.to_string(), ap.curve);
    }
    Ok((
        EvalSummary {
            config: cfg.clone(),
            classes,
        },
        curves,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn gts(boxes: &[BBox]) -> BTreeMap<String, Vec<BBox>> {
        [("img".to_string(), boxes.to_vec())].into_iter().collect()
    }

    fn det(score: f64, bbox: BBox) -> ScoredBox<'static> {
        ScoredBox {
            image_id: "img",
            score,
            bbox,
        }
    }

    #[test]
    fn ap_perfect_and_empty() {
        let g = gts(&[bx(0.0), bx(100.0)]);
        let r = average_precision(&[det(0.1, bx(0.0)), det(0.9, bx(100.0))], &g, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(average_precision(&[], &g, 0.5).ap, 0.0);
        assert_eq!(average_precision(&[], &BTreeMap::new(), 0.5).ap, 0.0);
    }

    #[test]
    fn ap_hand_case() {
        let g = gts(&[bx(0.0), bx(100.0)]);
        let dets = [det(0.9, bx(0.0)), det(0.8, bx(300.0)), det(0.7, bx(100.0))];
        let r = average_precision(&dets, &g, 0.5);
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!((r.true_positives, r.false_positives), (2, 1));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = gts(&[bx(0.0)]);
        let r = average_precision(&[det(0.9, bx(0.0)), det(0.8, bx(1.0))], &g, 0.5);
        assert_eq!((r.true_positives, r.false_positives), (1, 1));
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn matching_prefers_highest_iou_unmatched() {
        let g = gts(&[bx(0.0), bx(4.0)]);
        // overlaps gt 1 more than gt 0
        let m = greedy_match(&[det(0.9, bx(3.0))], &g, 0.3);
        assert_eq!(m, vec![(0, Some(1))]);
    }

    #[test]
    fn size_class_split() {
        let areas: Vec<f64> = (1..=10).map(f64::from).collect();
        use SizeClass::*;
        assert_eq!(size_classes(&areas), vec![XS, S, S, M, M, M, M, L, L, XL]);
        assert_eq!(size_classes(&[5.0; 10]), vec![XS, S, S, M, M, M, M, L, L, XL]);
        assert!(size_classes(&[]).is_empty());
        let rev: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(size_classes(&rev)[0], XL);
    }

    #[test]
    fn holistic_only_rates() {
        let boxes: Vec<BBox> = (0..10)
            .map(|i| BBox::new(i as f64 * 100.0, 0.0, i as f64 * 100.0 + 1.0 + i as f64, 10.0).unwrap())
            .collect();
        let g = gts(&boxes);
        let dets: Vec<PatternedBox> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| PatternedBox {
                scored: det(1.0 - i as f64 * 0.01, *b),
                pattern_mask: if i == 0 { 1 } else { 3 },
            })
            .collect();
        let t = holistic_only_rate_by_size(&dets, &g, f64::NEG_INFINITY, 0.5);
        assert_eq!(t[&SizeClass::XS].rate, Some(100.0));
        assert_eq!(t[&SizeClass::XL].rate, Some(0.0));
        // nothing recalled above a high threshold
        let t = holistic_only_rate_by_size(&dets, &g, 2.0, 0.5);
        assert!(t.values().all(|r| r.rate.is_none()));
    }
}
