//! Objective terms and the sampled composite loss.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fcfd_core::bridges::{build_bridge_set, build_identity_bridge_set};
use fcfd_core::error::FcfdError;
use fcfd_core::graph::Graph;
use fcfd_core::losses::{
    app_loss, fd_distance, func_loss, func_prime_loss, kd_loss, total_loss, FuncMode, LossWeights,
};
use fcfd_core::nn::Layer;
use fcfd_core::params::ParamStore;
use fcfd_core::pathing::{MissingStatsPolicy, Mode, NormStore, PathKey, PathSpec};
use fcfd_core::staged::{build_reference_pair, Feat, Role, StagedModel};

const STRICT: MissingStatsPolicy = MissingStatsPolicy::Strict;

fn logits2(g: &mut Graph<f64>, rows: &[[f64; 2]]) -> fcfd_core::graph::NodeId {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    g.constant(ArrayD::from_shape_vec(IxDyn(&[rows.len(), 2]), flat).unwrap())
}

#[test]
fn kd_loss_matches_hand_values() {
    let mut g = Graph::new();
    let same_a = logits2(&mut g, &[[0.3, -1.2]]);
    let same_b = logits2(&mut g, &[[0.3, -1.2]]);
    for tau in [1.0, 2.0, 4.0] {
        let l = kd_loss(&mut g, same_a, same_b, tau).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    // softmax([1,0]) = (e/(1+e), 1/(1+e)); ratio is exactly e, so
    // KL = (p - q) * 1 = 0.4621171573.
    let t = logits2(&mut g, &[[1.0, 0.0]]);
    let s = logits2(&mut g, &[[0.0, 1.0]]);
    let l1 = kd_loss(&mut g, t, s, 1.0).unwrap();
    assert!((g.scalar(l1) - 0.46211715726000974).abs() < 1e-12);

    // tau = 2: p = sigmoid(0.5), KL = 0.5*(p - q), scaled by tau^2 = 4.
    let l2 = kd_loss(&mut g, t, s, 2.0).unwrap();
    let p = 1.0 / (1.0 + (-0.5f64).exp());
    let expected = 4.0 * 0.5 * (p - (1.0 - p));
    assert!((g.scalar(l2) - expected).abs() < 1e-12);
}

#[test]
fn kd_loss_rejects_non_finite_logits() {
    let mut g = Graph::new();
    let t = logits2(&mut g, &[[f64::NAN, 0.0]]);
    let s = logits2(&mut g, &[[0.0, 1.0]]);
    assert!(matches!(
        kd_loss(&mut g, t, s, 4.0),
        Err(FcfdError::NonFinite { .. })
    ));
}

fn feat(g: &mut Graph<f64>, vals: (f64, f64)) -> fcfd_core::graph::NodeId {
    g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![vals.0, vals.1]).unwrap())
}

#[test]
fn app_loss_values_and_errors() {
    let mut g = Graph::new();
    let base = feat(&mut g, (4.0, 4.0));
    let same = feat(&mut g, (4.0, 4.0));
    let a = app_loss(&mut g, base, same, 1).unwrap();
    assert_eq!(g.scalar(a), 0.0);

    // Both unit perturbations are equally distant in feature space.
    for cand in [(3.0, 4.0), (4.0, 3.0)] {
        let c = feat(&mut g, cand);
        let l = app_loss(&mut g, base, c, 1).unwrap();
        assert_eq!(g.scalar(l), 0.5);
    }

    let wrong = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 1, 1])));
    match app_loss(&mut g, base, wrong, 2) {
        Err(FcfdError::ShapeMismatch { context, .. }) => assert!(context.contains("k=2")),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn app_loss_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..48).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..48).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let oracle = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 48.0;
    let mut g = Graph::new();
    let an = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 4, 2, 3]), a).unwrap());
    let bn = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 4, 2, 3]), b).unwrap());
    let l = app_loss(&mut g, an, bn, 1).unwrap();
    assert!((g.scalar(l) - oracle).abs() < 1e-10);
}

#[test]
fn fd_distance_examples() {
    let mut g = Graph::new();
    let eq_a = logits2(&mut g, &[[2.0, -1.0]]);
    let eq_b = logits2(&mut g, &[[2.0, -1.0]]);
    let d0 = fd_distance(&mut g, eq_a, eq_b, true, 4.0);
    assert_eq!(g.scalar(d0), 0.0);

    // After a diag(1,10) stage, the two equal-appearance candidates separate
    // by a factor of 100.
    let base = feat(&mut g, (4.0, 40.0));
    let low = feat(&mut g, (3.0, 40.0));
    let high = feat(&mut g, (4.0, 30.0));
    let dl = fd_distance(&mut g, base, low, false, 4.0);
    let dh = fd_distance(&mut g, base, high, false, 4.0);
    assert_eq!(g.scalar(dl), 0.5);
    assert_eq!(g.scalar(dh), 50.0);
}

/// Two-stage scalar teacher: (5x^2-1, 2x+2) followed by diag(1, 10).
fn diag_teacher() -> StagedModel<f64> {
    let mut params = ParamStore::new();
    let w = params.add(
        "stage2.w",
        ArrayD::from_shape_vec(IxDyn(&[2, 2, 1, 1]), vec![1.0, 0.0, 0.0, 10.0]).unwrap(),
    );
    StagedModel {
        id: "diag-toy-t".to_string(),
        role: Role::Teacher,
        stages: vec![
            vec![Layer::ToyPolyFeature],
            vec![Layer::Conv2d {
                w,
                bias: None,
                stride: 1,
                pad: 0,
            }],
        ],
        classifier: vec![Layer::ToyPolyHead],
        params,
        norms: NormStore::new(),
        input_shape: (1, 1, 1),
        num_classes: 1,
        stage_output_shapes: vec![(2, 1, 1), (2, 1, 1)],
    }
}

#[test]
fn func_loss_separates_equal_appearance_candidates() {
    let mut teacher = diag_teacher();
    let mut g = Graph::new();
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![1.0]).unwrap();
    let (t_logits, t_feats) = teacher.forward_full(&mut g, &x, Mode::Train, &STRICT).unwrap();
    assert_eq!(
        g.value(t_feats[1].node).as_slice().unwrap(),
        &[4.0, 40.0],
        "pure teacher path through diag(1,10)"
    );

    let mut term_at = |cand: (f64, f64)| {
        let node = feat(&mut g, cand);
        let bridged = Feat {
            node,
            origin_stage: 1,
            origin_role: Role::Teacher,
            key: PathKey::from_tokens(["Ms1", "Bst1"]),
        };
        let terms = func_loss(
            &mut g,
            &mut teacher,
            &t_feats,
            t_logits,
            &bridged,
            1,
            FuncMode::Partial,
            4.0,
            Mode::Train,
            &STRICT,
        )
        .unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].0, 2);
        assert!(!terms[0].1);
        g.scalar(terms[0].2)
    };

    // The bridged feature equal to the teacher's gives zero.
    assert_eq!(term_at((4.0, 4.0)), 0.0);
    // Equal appearance loss, very different function loss.
    let low = term_at((3.0, 4.0));
    let high = term_at((4.0, 3.0));
    assert_eq!(low, 0.5);
    assert_eq!(high, 50.0);
    assert!(low < high);
}

#[test]
fn func_prime_is_kd_loss() {
    let mut g = Graph::new();
    let t = logits2(&mut g, &[[0.7, -0.3], [1.1, 0.2], [-0.5, 0.4]]);
    let h = logits2(&mut g, &[[0.1, 0.6], [-0.9, 0.3], [0.2, 0.2]]);
    let a = func_prime_loss(&mut g, t, h, 4.0).unwrap();
    let b = kd_loss(&mut g, t, h, 4.0).unwrap();
    assert_eq!(g.scalar(a), g.scalar(b));
    let zero = func_prime_loss(&mut g, t, t, 4.0).unwrap();
    assert_eq!(g.scalar(zero), 0.0);
}

fn batch(n: usize, seed: u64) -> (ArrayD<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ArrayD::from_shape_vec(
        IxDyn(&[n, 3, 32, 32]),
        (0..n * 3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..10)).collect();
    (x, y)
}

const ALL_PATHS: [PathSpec; 4] = [
    PathSpec { k: 2, delta: 0 },
    PathSpec { k: 2, delta: 1 },
    PathSpec { k: 3, delta: 0 },
    PathSpec { k: 3, delta: 1 },
];

#[test]
fn total_loss_term_counts_and_weighted_sum() {
    let (mut teacher, mut student) = build_reference_pair::<f64>("tiny-hetero-pair", 3).unwrap();
    teacher.params.frozen = true;
    let mut bridges = build_bridge_set(&teacher, &student, &[2, 3], 9).unwrap();
    let (x, y) = batch(4, 21);
    let weights = LossWeights::default();
    let mut g = Graph::new();
    let out = total_loss(
        &mut g,
        &mut teacher,
        &mut student,
        &mut bridges,
        &x,
        &y,
        &[2, 3],
        &ALL_PATHS,
        &weights,
        Mode::Train,
        &STRICT,
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(r.app.len(), 2);
    assert_eq!(r.func_prime.len(), 2);
    let func_ks: std::collections::BTreeSet<usize> = r.func.iter().map(|t| t.k).collect();
    assert_eq!(func_ks, [2, 3].into_iter().collect());
    // Full mode: k=2 contributes l=3,4 plus the head; k=3 contributes l=4
    // plus the head.
    assert_eq!(r.func.len(), 5);
    assert_eq!(r.func.iter().filter(|t| t.is_kl).count(), 2);
    assert!(r.task > 0.0 && r.kd >= 0.0);
    for t in &r.func {
        assert!(t.value >= 0.0);
    }
    let recomputed = r.weighted_sum(&weights);
    assert!(
        (recomputed - r.total).abs() <= 1e-6 * r.total.abs().max(1.0),
        "weighted sum {recomputed} vs total {}",
        r.total
    );

    // Frozen teacher receives exactly zero gradient; student and bridges do not.
    let grads = g.backward(out.total);
    teacher.params.zero_grads();
    student.params.zero_grads();
    bridges.params.zero_grads();
    teacher.params.accumulate(&g, &grads);
    student.params.accumulate(&g, &grads);
    bridges.params.accumulate(&g, &grads);
    assert!(teacher
        .params
        .entries()
        .iter()
        .all(|e| e.grad.iter().all(|&v| v == 0.0)));
    assert!(student
        .params
        .entries()
        .iter()
        .any(|e| e.grad.iter().any(|&v| v != 0.0)));
    assert!(bridges
        .params
        .entries()
        .iter()
        .any(|e| e.grad.iter().any(|&v| v != 0.0)));
}

#[test]
fn task_only_weights_reduce_to_cross_entropy() {
    let (mut teacher, mut student) = build_reference_pair::<f64>("tiny-hetero-pair", 3).unwrap();
    let mut bridges = build_bridge_set(&teacher, &student, &[2, 3], 9).unwrap();
    let (x, y) = batch(4, 22);
    let weights = LossWeights::task_only();
    let mut g = Graph::new();
    let out = total_loss(
        &mut g,
        &mut teacher,
        &mut student,
        &mut bridges,
        &x,
        &y,
        &[2, 3],
        &[],
        &weights,
        Mode::Train,
        &STRICT,
    )
    .unwrap();
    assert_eq!(out.report.total, out.report.task);
    assert_eq!(out.report.kd, 0.0);
    assert!(out.report.app.is_empty());

    // The same value as a direct cross-entropy on a fresh identical student.
    let (_, mut student2) = build_reference_pair::<f64>("tiny-hetero-pair", 3).unwrap();
    let mut g2 = Graph::new();
    let (logits, _) = student2.forward_full(&mut g2, &x, Mode::Train, &STRICT).unwrap();
    let ce = g2.softmax_cross_entropy(logits, &y);
    assert_eq!(g2.scalar(ce), out.report.task);
}

#[test]
fn self_distillation_fixed_point() {
    // Student identical to the teacher, pass-through bridges: every
    // distillation term vanishes before any update.
    let (teacher_a, _) = build_reference_pair::<f64>("tiny-resnet-pair", 5).unwrap();
    let (teacher_b, _) = build_reference_pair::<f64>("tiny-resnet-pair", 5).unwrap();
    let mut teacher = teacher_a;
    let mut student = teacher_b;
    teacher.params.frozen = true;
    let mut bridges = build_identity_bridge_set(&teacher, &student, &[2, 3]).unwrap();
    let (x, y) = batch(4, 23);
    let mut g = Graph::new();
    let out = total_loss(
        &mut g,
        &mut teacher,
        &mut student,
        &mut bridges,
        &x,
        &y,
        &[2, 3],
        &ALL_PATHS,
        &LossWeights::default(),
        Mode::Train,
        &STRICT,
    )
    .unwrap();
    let r = &out.report;
    assert!(r.kd.abs() < 1e-6);
    for &(_, v) in &r.app {
        assert!(v.abs() < 1e-6);
    }
    for t in &r.func {
        assert!(t.value.abs() < 1e-6, "func term {t:?}");
    }
    for &(_, v) in &r.func_prime {
        assert!(v.abs() < 1e-6);
    }
    assert!((r.total - r.task).abs() < 1e-6);
}

#[test]
fn cached_prefixes_match_naive_recomputation() {
    let (x, y) = batch(4, 31);
    let weights = LossWeights::default();

    let run = |sampled: &[PathSpec]| {
        let (mut teacher, mut student) =
            build_reference_pair::<f64>("tiny-hetero-pair", 3).unwrap();
        teacher.params.frozen = true;
        let mut bridges = build_bridge_set(&teacher, &student, &[2, 3], 9).unwrap();
        let mut g = Graph::new();
        total_loss(
            &mut g,
            &mut teacher,
            &mut student,
            &mut bridges,
            &x,
            &y,
            &[2, 3],
            sampled,
            &weights,
            Mode::Train,
            &STRICT,
        )
        .unwrap()
        .report
    };

    // The appearance terms and shared pure passes must be bitwise identical
    // whether or not the function paths are propagated alongside them.
    let with_paths = run(&ALL_PATHS);
    let without = run(&[]);
    assert_eq!(with_paths.task.to_bits(), without.task.to_bits());
    assert_eq!(with_paths.kd.to_bits(), without.kd.to_bits());
    for (a, b) in with_paths.app.iter().zip(&without.app) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}

#[test]
fn non_finite_term_is_named() {
    let (mut teacher, mut student) = build_reference_pair::<f64>("tiny-hetero-pair", 3).unwrap();
    teacher.params.frozen = true;
    let mut bridges = build_bridge_set(&teacher, &student, &[2, 3], 9).unwrap();
    // Poison one bridge weight.
    let first = bridges.params.entries_mut().first_mut().unwrap();
    first.value.as_slice_mut().unwrap()[0] = f64::NAN;
    let (x, y) = batch(2, 41);
    let mut g = Graph::new();
    let err = total_loss(
        &mut g,
        &mut teacher,
        &mut student,
        &mut bridges,
        &x,
        &y,
        &[2, 3],
        &ALL_PATHS,
        &LossWeights::default(),
        Mode::Train,
        &STRICT,
    )
    .err()
    .expect("poisoned bridge must surface");
    match err {
        FcfdError::NonFinite { term, .. } => assert!(!term.is_empty()),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn loss_weight_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let mut w = LossWeights::default();
    w.temperature = 0.0;
    assert!(w.validate().is_err());
    let mut w = LossWeights::default();
    w.w_app = -1.0;
    assert!(w.validate().is_err());
}
