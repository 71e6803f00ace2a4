use std::collections::BTreeMap;

use partswitch::inference::DetectConfig;
use partswitch::learning::{
    assign_switch_labels, objective, train, LabelOutcome, LabeledExample, MaxMarginSolver, Sign, TrainConfig,
};
use partswitch::model::{pairwise_features, SparseVector};
use partswitch::synthetic::{generate_dataset, SynthConfig};
use partswitch::{BBox, TrainedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        images: 30,
        negative_images: 15,
        class_name: "animal".into(),
        ..SynthConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        mining_rounds: 3,
        class_name: Some("animal".into()),
        ..TrainConfig::default()
    }
}

#[test]
fn labels_recover_planted_patterns() {
    let cfg = SynthConfig {
        seed: 5,
        images: 40,
        negative_images: 0,
        objects_per_image: [1, 1],
        occlusion_rate: 0.3,
        lowres_area_threshold: 4000.0,
        score_noise_sigma: 0.0,
        distractors_per_node: 0,
        decoys_per_image: [0, 0],
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let images = ds.training_images().unwrap();
    let planted: BTreeMap<&str, u32> = ds
        .truth
        .objects
        .iter()
        .map(|o| (o.image_id.as_str(), o.planted_mask))
        .collect();
    let mut distinct = std::collections::BTreeSet::new();
    for img in &images {
        let [gt] = img.objects.as_slice() else {
            panic!("one object per image")
        };
        let LabelOutcome::Labeled(c) = assign_switch_labels(gt, &img.hypotheses, &TrainConfig::default()).unwrap()
        else {
            panic!("{} not labelled", img.image_id)
        };
        let mask = c.pattern().mask();
        assert_eq!(mask, planted[img.image_id.as_str()], "{}", img.image_id);
        distinct.insert(mask);
    }
    assert!(distinct.len() > 2, "regimes produced only {distinct:?}");
}

#[test]
fn pairwise_features_ignore_scene_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let mut b = || {
            let (x, y) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            BBox::new(x, y, x + rng.random_range(1.0..40.0), y + rng.random_range(1.0..40.0)).unwrap()
        };
        let (a, c) = (b(), b());
        let s: f64 = rng.random_range(0.1..10.0);
        let (tx, ty): (f64, f64) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let map = |r: &BBox| BBox::new(s * r.x1 + tx, s * r.y1 + ty, s * r.x2 + tx, s * r.y2 + ty).unwrap();
        let f = pairwise_features(&a, &c).unwrap();
        let g = pairwise_features(&map(&a), &map(&c)).unwrap();
        for (u, v) in f.iter().zip(&g) {
            assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{f:?} vs {g:?}");
        }
    }
}

#[test]
fn training_and_detection_are_deterministic() {
    let ds = generate_dataset(&small(9)).unwrap();
    let images = ds.training_images().unwrap();
    let a = train(&ds.spec, &images, &quick_train()).unwrap();
    let b = train(&ds.spec, &images, &quick_train()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.rounds, b.rounds);

    let test = generate_dataset(&small(10)).unwrap();
    let stores = test.hypothesis_stores().unwrap();
    let dcfg = DetectConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| a.model.detect_all(&stores, &dcfg).unwrap())
    };
    let one = run(1);
    assert!(!one.is_empty());
    assert_eq!(one, run(4));
}

#[test]
fn model_survives_json() {
    let ds = generate_dataset(&small(12)).unwrap();
    let out = train(&ds.spec, &ds.training_images().unwrap(), &quick_train()).unwrap();
    let text = serde_json::to_string(&out.model).unwrap();
    let back: TrainedModel = serde_json::from_str(&text).unwrap();
    assert_eq!(back, out.model);
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
}

#[test]
fn later_rounds_fit_the_final_working_set_better() {
    let ds = generate_dataset(&small(14)).unwrap();
    let cfg = TrainConfig {
        solver_tolerance: 1e-6,
        ..quick_train()
    };
    let out = train(&ds.spec, &ds.training_images().unwrap(), &cfg).unwrap();
    assert!(out.rounds.len() >= 2);
    for w in out.rounds.windows(2) {
        // more constraints can only raise the optimum
        assert!(w[1].objective >= w[0].objective - 2.0 * cfg.solver_tolerance, "{w:?}");
    }
    let last = out.round_params.last().unwrap();
    let best = objective(&out.examples, last, cfg.c);
    for p in &out.round_params {
        assert!(best <= objective(&out.examples, p, cfg.c) + cfg.solver_tolerance);
    }
}

fn separable(seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::new();
    while out.len() < 120 {
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if m.abs() < 0.2 {
            continue;
        }
        let sign = if m > 0.0 { Sign::Positive } else { Sign::Negative };
        out.push(LabeledExample {
            phi: SparseVector::from_dense(&x),
            sign,
            source: None,
        });
    }
    out
}

#[test]
fn duplicated_examples_leave_the_hard_margin_solution_alone() {
    let base = separable(21);
    let mut doubled = base.clone();
    doubled.extend(base.iter().take(40).cloned());
    let solver = MaxMarginSolver::new(1000.0, 1e-8);
    let a = solver.solve(&base).unwrap();
    let b = solver.solve(&doubled).unwrap();
    assert!(a.converged && b.converged);
    let diff = a
        .beta
        .iter()
        .zip(&b.beta)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-3, "beta moved by {diff}");
    for e in &base {
        assert!(e.sign.value() * e.phi.dot(&b.beta) >= 1.0 - 1e-4);
    }
}

#[test]
fn newton_warm_start_matches_plain_coordinate_descent() {
    let ex = separable(22);
    let fast = MaxMarginSolver::new(1.0, 1e-9).solve(&ex).unwrap();
    let slow = MaxMarginSolver {
        newton_steps: 0,
        ..MaxMarginSolver::new(1.0, 1e-9)
    }
    .solve(&ex)
    .unwrap();
    assert!(fast.converged && slow.converged);
    assert!((fast.objective - slow.objective).abs() < 1e-8);
}
