use super::*;
use crate::model::{accuracy, Activation};
use crate::training::train;

fn linear(d: usize, c: usize) -> ModelSpec {
    ModelSpec::new(vec![d, c], Activation::Identity, Task::Classification).unwrap()
}

fn fit(spec: &ModelSpec, points: Vec<TestPoint>, steps: usize, seed: u64) -> Vec<f64> {
    let data = Dataset::new(points);
    let schedule = HyperSchedule::constant(steps, 0.1, 0.9, 0.0).unwrap();
    let plan = BatchPlan::shuffled(data.len(), 20, steps, seed).unwrap();
    train(spec, &data, &schedule, &plan, seed).unwrap().final_theta().to_vec()
}

fn config(scenario: serde_json::Value) -> ScenarioConfig {
    ScenarioConfig::from_value(serde_json::json!({
        "seed": 9,
        "model": { "layer_sizes": [2, 4, 3], "activation": "tanh", "task": "classification" },
        "data": { "d": 2, "classes": 3, "separation": 4.0, "n_train": 60, "n_test": 30 },
        "training": { "steps": 40, "batch_size": 8, "lr": 0.01, "momentum": 0.5, "weight_decay": 0.0 },
        "scenario": scenario,
    }))
    .unwrap()
}

#[test]
fn generator_is_deterministic_per_seed() {
    let a = gen_gaussian_classes(4, 50, 3, 3, 2.0).unwrap();
    assert_eq!(a, gen_gaussian_classes(4, 50, 3, 3, 2.0).unwrap());
    assert_ne!(a, gen_gaussian_classes(5, 50, 3, 3, 2.0).unwrap());
}

#[test]
fn generator_rejects_bad_sizes() {
    assert!(gen_gaussian_classes(0, 0, 2, 2, 1.0).is_err());
    assert!(gen_gaussian_classes(0, 5, 0, 2, 1.0).is_err());
    assert!(gen_gaussian_classes(0, 5, 2, 0, 1.0).is_err());
    assert!(gen_gaussian_classes(0, 5, 2, 2, -1.0).is_err());
    assert!(gen_gaussian_classes(0, 5, 1, 3, 1.0).is_err());
}

#[test]
fn class_means_sit_on_a_scaled_simplex() {
    let means = class_means(3, 3, 4.0).unwrap();
    for m in &means {
        assert!((m.iter().map(|x| x * x).sum::<f64>().sqrt() - 2.0).abs() < 1e-12);
    }
    let d01: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d12: f64 = means[1].iter().zip(&means[2]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((d01 - d12).abs() < 1e-12);
}

#[test]
fn zero_separation_is_chance_level() {
    let spec = linear(2, 3);
    let theta = fit(&spec, gen_gaussian_classes(1, 300, 2, 3, 0.0).unwrap(), 60, 1);
    let acc = accuracy(&spec, &theta, &gen_gaussian_classes(2, 2000, 2, 3, 0.0).unwrap()).unwrap();
    assert!((acc - 1.0 / 3.0).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn wide_separation_is_learned_in_fifty_steps() {
    let spec = linear(2, 2);
    let points = gen_gaussian_classes(3, 200, 2, 2, 6.0).unwrap();
    let theta = fit(&spec, points.clone(), 50, 3);
    let acc = accuracy(&spec, &theta, &points).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn identity_transform_keeps_points() {
    let pts = gen_gaussian_classes(6, 20, 3, 2, 1.0).unwrap();
    let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(apply_feature_transform(&pts, &FeatureTransform::Matrix(eye)).unwrap(), pts);
    assert_eq!(apply_feature_transform(&pts, &FeatureTransform::RotationDeg(0.0)).unwrap(), pts);
}

#[test]
fn rotations_invert_and_preserve_norms() {
    let pts = gen_gaussian_classes(7, 50, 4, 3, 3.0).unwrap();
    for t in [
        (FeatureTransform::RotationDeg(37.0), FeatureTransform::RotationDeg(-37.0)),
        (FeatureTransform::SubspaceRotationDeg(45.0), FeatureTransform::SubspaceRotationDeg(-45.0)),
    ] {
        let there = apply_feature_transform(&pts, &t.0).unwrap();
        let back = apply_feature_transform(&there, &t.1).unwrap();
        for ((p, q), r) in pts.iter().zip(&back).zip(&there) {
            assert_eq!(p.y, q.y);
            for (a, b) in p.x.iter().zip(&q.x) {
                assert!((a - b).abs() < 1e-12);
            }
            let n = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n(&p.x) - n(&r.x)).abs() < 1e-12);
        }
    }
}

#[test]
fn subspace_rotation_by_ninety_moves_half_the_features() {
    let p = vec![TestPoint::class(vec![1.0, 2.0, 0.0, 0.0], 0)];
    let r = apply_feature_transform(&p, &FeatureTransform::SubspaceRotationDeg(90.0)).unwrap();
    let want = [0.0, 0.0, 1.0, 2.0];
    for (a, b) in r[0].x.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn non_orthogonal_transform_is_rejected() {
    let pts = gen_gaussian_classes(6, 5, 2, 2, 1.0).unwrap();
    let m = FeatureTransform::Matrix(vec![vec![1.0, 0.1], vec![0.0, 1.0]]);
    assert!(apply_feature_transform(&pts, &m).is_err());
    let bad_shape = FeatureTransform::Matrix(vec![vec![1.0]]);
    assert!(apply_feature_transform(&pts, &bad_shape).is_err());
}

#[test]
fn shift_labels_is_cyclic() {
    let pts: Vec<TestPoint> = (0..3).map(|c| TestPoint::class(vec![0.0], c)).collect();
    let shifted = shift_labels(&pts, 1, 3).unwrap();
    let labels: Vec<_> = shifted.iter().map(|p| p.y.clone()).collect();
    assert_eq!(labels, vec![Target::Class(1), Target::Class(2), Target::Class(0)]);
}

#[test]
fn insert_point_replaces_one_batch() {
    let cfg = config(serde_json::json!({ "variant": "insert_point", "step": 30, "class": 2 }));
    let built = build_scenario(&cfg).unwrap();
    let st = &built.pipeline.stages[0];
    let n = st.dataset.len() - 1;
    assert_eq!(st.plan.batch(30), &[n]);
    assert_eq!(st.dataset.points()[n].y, Target::Class(2));
    assert!(st.dataset.points()[..n].iter().all(|p| p.y != Target::Class(2)));

    let reference = BatchPlan::shuffled(n, 8, 40, sub_seed(9, PLAN_TAG)).unwrap();
    for k in (0..40).filter(|&k| k != 30) {
        assert_eq!(st.plan.batch(k), reference.batch(k));
    }
    assert_eq!(built.units[0].steps.steps(), &[30]);
    assert!(built.test_set("inserted_class").unwrap().points.iter().all(|p| p.y == Target::Class(2)));
}

#[test]
fn insert_point_can_keep_its_class() {
    let cfg = config(serde_json::json!({ "variant": "insert_point", "step": 3, "class": 2, "exclude_class": false }));
    let built = build_scenario(&cfg).unwrap();
    assert_eq!(built.pipeline.stages[0].dataset.len(), 61);
}

#[test]
fn mislabel_shifts_exactly_the_range() {
    let cfg = config(serde_json::json!({ "variant": "mislabel_stage", "start": 30, "end": 35 }));
    let built = build_scenario(&cfg).unwrap();
    let st = &built.pipeline.stages[0];
    let clean = gen_gaussian_classes(sub_seed(9, TRAIN_TAG), 60, 2, 3, 4.0).unwrap();
    let reference = BatchPlan::shuffled(60, 8, 40, sub_seed(9, PLAN_TAG)).unwrap();
    for k in 0..40 {
        let got = st.dataset.select(st.plan.batch(k)).unwrap();
        let want: Vec<&TestPoint> = reference.batch(k).iter().map(|&i| &clean[i]).collect();
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.x, w.x);
            let (Target::Class(gc), Target::Class(wc)) = (&g.y, &w.y) else { panic!("class labels") };
            let expect = if (30..35).contains(&k) { (wc + 1) % 3 } else { *wc };
            assert_eq!(*gc, expect, "step {k}");
        }
    }
    assert_eq!(built.units[0].steps.steps(), &[30, 31, 32, 33, 34]);
}

#[test]
fn distribution_shift_builds_one_stage_per_angle() {
    let cfg = config(serde_json::json!({ "variant": "distribution_shift", "angles_deg": [0.0, 45.0, 90.0], "stage_steps": [10, 5, 5] }));
    let built = build_scenario(&cfg).unwrap();
    assert_eq!(built.pipeline.stage_ranges(), vec![0..10, 10..15, 15..20]);
    assert_eq!(built.units.len(), 3);
    assert!(built.units.iter().all(|u| u.protocol == SkipProtocol::StageSkip));
    assert_eq!(built.eval_set, "mixture");
    assert_eq!(built.test_set("mixture").unwrap().points.len(), 30);
    let bad = config(serde_json::json!({ "variant": "distribution_shift", "angles_deg": [0.0, 45.0], "stage_steps": [10] }));
    assert!(build_scenario(&bad).is_err());
}

#[test]
fn confound_follows_its_correlation() {
    let mut cfg = config(serde_json::json!({ "variant": "spurious_confound", "rho": [0.0, 0.95, 0.0] }));
    cfg.model = ModelSpec::new(vec![3, 4, 2], Activation::Tanh, Task::Classification).unwrap();
    cfg.data.classes = 2;
    cfg.data.n_train = 400;
    cfg.training.steps = 50;
    let built = build_scenario(&cfg).unwrap();
    let (data, _, plan) = built.pipeline.flatten();
    let ranges = built.pipeline.stage_ranges();
    let c2 = confound_label_correlation(&data, &plan.0[ranges[1].clone()]).unwrap();
    assert!((0.9..=1.0).contains(&c2), "stage 2 correlation {c2}");
    for r in [&ranges[0], &ranges[2]] {
        let c = confound_label_correlation(&data, &plan.0[r.clone()]).unwrap();
        assert!(c.abs() < 0.2, "unconfounded stage correlation {c}");
    }
    let probe = &built.test_set("confound").unwrap().points;
    assert!(probe.iter().all(|p| p.x[..2] == [0.0, 0.0]));
}

#[test]
fn confound_rejects_out_of_range_rho() {
    let pts = gen_gaussian_classes(1, 10, 2, 2, 1.0).unwrap();
    assert!(append_confound(&pts, 1.5, 0).is_err());
    let three = gen_gaussian_classes(1, 10, 2, 3, 1.0).unwrap();
    assert!(append_confound(&three, 0.5, 0).is_err());
}

#[test]
fn unknown_variant_lists_the_known_ones() {
    let err = ScenarioConfig::from_json(r#"{"scenario": {"variant": "backdoor"}}"#).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::UnknownScenario { .. }));
    for v in SCENARIO_VARIANTS {
        assert!(msg.contains(v), "{msg}");
    }
}

#[test]
fn inconsistent_configs_are_rejected() {
    let late = config(serde_json::json!({ "variant": "insert_point", "step": 40, "class": 0 }));
    assert!(build_scenario(&late).is_err());
    let empty = config(serde_json::json!({ "variant": "mislabel_stage", "start": 5, "end": 5 }));
    assert!(build_scenario(&empty).is_err());
    let nothing = config(serde_json::json!({ "variant": "optimizer_stage" }));
    assert!(build_scenario(&nothing).is_err());
    let mut wide = config(serde_json::json!({ "variant": "mislabel_stage", "start": 1, "end": 2 }));
    wide.model = ModelSpec::new(vec![3, 4, 3], Activation::Tanh, Task::Classification).unwrap();
    assert!(build_scenario(&wide).is_err());
}

#[test]
fn bundled_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    for name in ["insert_point", "mislabel_stage", "distribution_shift", "optimizer_lr", "optimizer_momentum", "spurious_confound"] {
        let cfg = ScenarioConfig::load(format!("{dir}/{name}.json")).unwrap();
        build_scenario(&cfg).unwrap();
    }
}

#[test]
fn reports_are_reproducible() {
    let cfg = config(serde_json::json!({ "variant": "mislabel_stage", "start": 10, "end": 13 }));
    let mut a = run_scenario(&cfg).unwrap();
    let mut b = run_scenario(&cfg).unwrap();
    a.runtime_seconds = 0.0;
    b.runtime_seconds = 0.0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for u in &a.units {
        assert!((-1.0..=1.0).contains(&u.pearson) && (-1.0..=1.0).contains(&u.spearman));
        assert_eq!(u.estimated.len(), u.oracle.len());
    }
}

#[test]
fn report_files_align() {
    let cfg = config(serde_json::json!({ "variant": "insert_point", "step": 5, "class": 1 }));
    let report = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let scores = std::fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    let oracle = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(scores.lines().count(), 31);
    assert_eq!(oracle.lines().count(), 31);
    let keys = |s: &str| s.lines().skip(1).map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(keys(&scores), keys(&oracle));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["scenario"], "insert_point");
}
