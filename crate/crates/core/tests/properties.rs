use std::collections::HashSet;

use partswitch::inference::{detect, prune_hypotheses, ranking_order, DetectConfig, PruneConfig};
use partswitch::metrics::{average_precision, greedy_match, size_classes, ScoredBox, SizeClass};
use partswitch::model::{score_configuration, GraphSpec, Hypothesis, HypothesisStore, ModelParams};
use partswitch::postprocess::part_nms;
use partswitch::synthetic::brute_force_best;
use partswitch::BBox;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..60.0f64, 1.0..60.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Node count, per-node (box, score) lists, and a flat parameter vector
/// sized for that graph.
type Instance = (usize, Vec<Vec<(BBox, f64)>>, Vec<f64>);

fn arb_instance() -> impl Strategy<Value = Instance> {
    (1usize..=4).prop_flat_map(|k| {
        (
            Just(k),
            prop::collection::vec(prop::collection::vec((arb_box(), -3.0..3.0f64), 0..=4), k),
            prop::collection::vec(
                -2.0..2.0f64,
                GraphSpec::new((0..k).map(|i| format!("n{i}"))).unwrap().dim(),
            ),
        )
    })
}

fn build(k: usize, lists: &[Vec<(BBox, f64)>], flat: &[f64]) -> (GraphSpec, HypothesisStore, ModelParams) {
    let spec = GraphSpec::new((0..k).map(|i| format!("n{i}"))).unwrap();
    let store = HypothesisStore::from_hypotheses(
        k,
        lists.iter().enumerate().flat_map(|(node, l)| {
            l.iter().enumerate().map(move |(i, &(bbox, raw_score))| Hypothesis {
                id: (node * 10 + i) as u64,
                node,
                bbox,
                raw_score,
            })
        }),
    )
    .unwrap();
    let params = ModelParams::from_flat(&spec, flat, 1.5).unwrap();
    (spec, store, params)
}

fn all_results() -> DetectConfig {
    DetectConfig {
        max_raw_detections: usize::MAX,
        ..DetectConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn detect_agrees_with_brute_force((k, lists, flat) in arb_instance()) {
        let (spec, store, params) = build(k, &lists, &flat);
        let fast = detect(&store, &params, &spec, &DetectConfig::default()).unwrap();
        let slow = brute_force_best(&store, &params, &spec).unwrap();
        prop_assert_eq!(fast.first().cloned(), slow);
    }

    #[test]
    fn cached_scores_equal_direct_scores((k, lists, flat) in arb_instance()) {
        let (spec, store, params) = build(k, &lists, &flat);
        let all = detect(&store, &params, &spec, &all_results()).unwrap();
        for d in &all {
            let direct = score_configuration(&params, &spec, &d.configuration, &store).unwrap();
            prop_assert_eq!(d.score.to_bits(), direct.to_bits());
        }
        for w in all.windows(2) {
            prop_assert!(ranking_order(&w[0], &w[1]).is_lt());
        }
    }

    #[test]
    fn detect_cap_keeps_the_best((k, lists, flat) in arb_instance(), cap in 1usize..6) {
        let (spec, store, params) = build(k, &lists, &flat);
        let all = detect(&store, &params, &spec, &all_results()).unwrap();
        let capped = detect(&store, &params, &spec, &DetectConfig { max_raw_detections: cap, ..DetectConfig::default() }).unwrap();
        prop_assert_eq!(&all[..all.len().min(cap)], &capped[..]);
    }

    #[test]
    fn part_nms_is_idempotent_and_disjoint((k, lists, flat) in arb_instance()) {
        let (spec, store, params) = build(k, &lists, &flat);
        let all = detect(&store, &params, &spec, &all_results()).unwrap();
        let kept = part_nms(all);
        let mut used = HashSet::new();
        for d in &kept {
            for pair in d.configuration.assigned() {
                prop_assert!(used.insert(pair));
            }
        }
        prop_assert_eq!(part_nms(kept.clone()), kept);
    }

    #[test]
    fn raising_prune_thresholds_shrinks_the_lists(
        (k, lists, _flat) in arb_instance(),
        lo in -3.0..3.0f64,
        bump in 0.0..2.0f64,
    ) {
        let (_, store, _) = build(k, &lists, &vec![0.0; GraphSpec::new((0..k).map(|i| format!("n{i}"))).unwrap().dim()]);
        let at = |t: f64| PruneConfig { unary_threshold: vec![t; k], nms_iou: 1.0, max_hypotheses: vec![usize::MAX; k] };
        let loose = prune_hypotheses(&store, &at(lo));
        let tight = prune_hypotheses(&store, &at(lo + bump));
        for n in 0..k {
            let ids: HashSet<u64> = loose.node(n).iter().map(|h| h.id).collect();
            prop_assert!(tight.node(n).iter().all(|h| ids.contains(&h.id)));
            prop_assert!(tight.node(n).iter().all(|h| h.raw_score >= lo + bump));
        }
    }

    #[test]
    fn size_classes_partition(areas in prop::collection::vec(0.0..1e4f64, 0..60)) {
        let n = areas.len();
        let classes = size_classes(&areas);
        prop_assert_eq!(classes.len(), n);
        let counts: Vec<usize> = SizeClass::ALL.iter().map(|c| classes.iter().filter(|x| *x == c).count()).collect();
        let bounds = [0.0, 0.1, 0.3, 0.7, 0.9, 1.0].map(|f: f64| (f * n as f64).floor() as usize);
        let want: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        let want: Vec<usize> = {
            let mut v = want;
            *v.last_mut().unwrap() += n - bounds[5];
            v
        };
        prop_assert_eq!(counts, want);
        // a larger area never lands in a smaller class
        for i in 0..n {
            for j in 0..n {
                if areas[i] < areas[j] {
                    prop_assert!(classes[i] <= classes[j]);
                }
            }
        }
    }

    #[test]
    fn matching_uses_each_gt_once(
        gts in prop::collection::vec(arb_box(), 0..6),
        dets in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..10),
    ) {
        let gt_map = [("im".to_string(), gts.clone())].into();
        let scored: Vec<ScoredBox<'_>> = dets.iter().map(|&(bbox, score)| ScoredBox { image_id: "im", score, bbox }).collect();
        let matches = greedy_match(&scored, &gt_map, 0.5);
        let mut seen = HashSet::new();
        for (_, g) in &matches {
            if let Some(g) = g {
                prop_assert!(seen.insert(*g));
            }
        }
        let ap = average_precision(&scored, &gt_map, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap.ap));
        prop_assert_eq!(ap.true_positives, seen.len());
    }
}
