//! Path sampling and provenance-keyed normalization statistics.

use std::collections::HashMap;

use ndarray::{Array1, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fcfd_core::graph::Graph;
use fcfd_core::pathing::{
    enumerate_candidates, routed_norm_forward, sample_paths, MissingStatsPolicy, Mode, PathKey,
    PathSpec, RoutedNormState, SamplerConfig,
};

#[test]
fn candidate_enumeration_order() {
    let cfg = SamplerConfig::new(vec![2, 3], 2, 0);
    let c = enumerate_candidates(&cfg).unwrap();
    assert_eq!(
        c,
        vec![
            PathSpec { k: 2, delta: 0 },
            PathSpec { k: 2, delta: 1 },
            PathSpec { k: 3, delta: 0 },
            PathSpec { k: 3, delta: 1 },
        ]
    );
    assert_eq!(cfg.k_min(), 2);
}

#[test]
fn sampling_is_deterministic_and_without_replacement() {
    let cfg = SamplerConfig::new(vec![2, 3], 2, 42);
    for iter in 0..50u64 {
        let a = sample_paths(&cfg, iter).unwrap();
        let b = sample_paths(&cfg, iter).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
    }
}

#[test]
fn sampler_rejects_bad_sizes() {
    assert!(SamplerConfig::new(vec![], 1, 0).validate().is_err());
    assert!(SamplerConfig::new(vec![2, 3], 0, 0).validate().is_err());
    assert!(SamplerConfig::new(vec![2, 3], 5, 0).validate().is_err());
    assert!(SamplerConfig::new(vec![2, 3], 4, 0).validate().is_ok());
}

#[test]
fn sampling_frequency_is_uniform() {
    let cfg = SamplerConfig::new(vec![2, 3], 2, 7);
    let mut counts: HashMap<PathSpec, usize> = HashMap::new();
    let iters = 10_000u64;
    for it in 0..iters {
        for p in sample_paths(&cfg, it).unwrap() {
            *counts.entry(p).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 4);
    for (&p, &c) in &counts {
        let freq = c as f64 / iters as f64;
        assert!(
            (freq - 0.5).abs() < 0.02,
            "candidate {p} frequency {freq} outside 0.5 +- 0.02"
        );
    }
}

#[test]
fn path_key_roundtrip_and_append_only() {
    let k = PathKey::from_tokens(["Ms1", "Ms2", "Bst2", "Mt3"]);
    assert_eq!(k.as_string(), "Ms1/Ms2/Bst2/Mt3");
    assert_eq!(PathKey::parse(&k.as_string()), k);
    let child = k.child("Ct");
    assert_eq!(k.tokens().len(), 4);
    assert_eq!(child.tokens().len(), 5);
    assert_eq!(&child.tokens()[..4], k.tokens());
}

#[test]
fn ema_update_matches_hand_computation() {
    // Batch [0, 2]: mean 1, biased var 1, unbiased var 2. With momentum 0.1
    // from the fresh (0, 1) state: mean 0.1, var 0.9 + 0.1*2 = 1.1.
    let mut state = RoutedNormState::<f64>::new("bn", 1, true);
    let key = PathKey::from_tokens(["Ms1"]);
    let mut g = Graph::new();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![0.0, 2.0]).unwrap());
    let gamma = g.constant(ArrayD::ones(IxDyn(&[1])));
    let beta = g.constant(ArrayD::zeros(IxDyn(&[1])));
    routed_norm_forward(
        &mut state,
        &mut g,
        x,
        gamma,
        beta,
        &key,
        Mode::Train,
        &MissingStatsPolicy::Strict,
        None,
    )
    .unwrap();
    let entry = &state.stats[&key];
    assert!((entry.running_mean[0] - 0.1).abs() < 1e-12);
    assert!((entry.running_var[0] - 1.1).abs() < 1e-12);
    assert_eq!(entry.update_count, 1);
}

#[test]
fn eval_missing_stats_policies() {
    let mut state = RoutedNormState::<f64>::new("bn", 1, true);
    let pure = PathKey::from_tokens(["Mt1"]);
    state.update(
        &pure,
        &Array1::from_vec(vec![0.5]),
        &Array1::from_vec(vec![2.0]),
    );
    let hybrid = PathKey::from_tokens(["Ms1", "Bst1"]);
    assert!(state
        .lookup(&hybrid, &MissingStatsPolicy::Strict, Some(&pure))
        .is_err());
    let e = state
        .lookup(&hybrid, &MissingStatsPolicy::FallbackToPure, Some(&pure))
        .unwrap();
    assert!((e.running_mean[0] - 0.05).abs() < 1e-12);
}

#[test]
fn non_routed_layer_collapses_keys() {
    let mut state = RoutedNormState::<f64>::new("bn", 1, false);
    state.update(
        &PathKey::from_tokens(["Ms1"]),
        &Array1::from_vec(vec![1.0]),
        &Array1::from_vec(vec![1.0]),
    );
    state.update(
        &PathKey::from_tokens(["Mt1"]),
        &Array1::from_vec(vec![1.0]),
        &Array1::from_vec(vec![1.0]),
    );
    assert_eq!(state.stats.len(), 1);
    let e = state
        .lookup(&PathKey::from_tokens(["anything"]), &MissingStatsPolicy::Strict, None)
        .unwrap();
    assert_eq!(e.update_count, 2);
}

fn random_batch(rng: &mut ChaCha8Rng, c: usize) -> ArrayD<f64> {
    let data: Vec<f64> = (0..4 * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    ArrayD::from_shape_vec(IxDyn(&[4, c, 1, 1]), data).unwrap()
}

/// Statistics isolation: replaying only the key-A updates from an interleaved
/// stream reproduces key A's statistics bit-exactly.
#[test]
fn statistics_isolation_replay_bit_exact() {
    let keys = [
        PathKey::from_tokens(["Mt1", "Mt2"]),
        PathKey::from_tokens(["Ms1", "Bst1", "Mt2"]),
        PathKey::from_tokens(["Ms1", "Ms2"]),
        PathKey::from_tokens(["Mt1", "Bts1", "Ms2"]),
    ];
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let c = 3;
        // Interleaved stream of (key index, batch).
        let stream: Vec<(usize, ArrayD<f64>)> = (0..20)
            .map(|_| (rng.gen_range(0..keys.len()), random_batch(&mut rng, c)))
            .collect();
        let run = |events: &[(usize, ArrayD<f64>)]| {
            let mut state = RoutedNormState::<f64>::new("bn", c, true);
            let mut g = Graph::new();
            let gamma = g.constant(ArrayD::ones(IxDyn(&[c])));
            let beta = g.constant(ArrayD::zeros(IxDyn(&[c])));
            for (ki, batch) in events {
                let x = g.constant(batch.clone());
                routed_norm_forward(
                    &mut state,
                    &mut g,
                    x,
                    gamma,
                    beta,
                    &keys[*ki],
                    Mode::Train,
                    &MissingStatsPolicy::Strict,
                    None,
                )
                .unwrap();
            }
            state
        };
        let interleaved = run(&stream);
        for target in 0..keys.len() {
            let only: Vec<(usize, ArrayD<f64>)> = stream
                .iter()
                .filter(|(ki, _)| *ki == target)
                .cloned()
                .collect();
            if only.is_empty() {
                assert!(!interleaved.stats.contains_key(&keys[target]));
                continue;
            }
            let isolated = run(&only);
            let a = &interleaved.stats[&keys[target]];
            let b = &isolated.stats[&keys[target]];
            assert_eq!(a.update_count, b.update_count);
            assert_eq!(
                a.running_mean.as_slice().unwrap(),
                b.running_mean.as_slice().unwrap(),
                "trial {trial}: running mean differs for key {target}"
            );
            assert_eq!(
                a.running_var.as_slice().unwrap(),
                b.running_var.as_slice().unwrap()
            );
        }
    }
}

/// Affine sharing: in train mode the normalized output depends only on the
/// batch and the shared affine pair, not on which key the batch is routed to.
#[test]
fn affine_shared_across_keys_in_train_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c = 2;
    let batch = random_batch(&mut rng, c);
    let mut outs = Vec::new();
    for key in [
        PathKey::from_tokens(["Mt1"]),
        PathKey::from_tokens(["Ms1", "Bst1"]),
    ] {
        let mut state = RoutedNormState::<f64>::new("bn", c, true);
        let mut g = Graph::new();
        let gamma = g.constant(ArrayD::from_shape_vec(IxDyn(&[c]), vec![1.5, 0.5]).unwrap());
        let beta = g.constant(ArrayD::from_shape_vec(IxDyn(&[c]), vec![0.2, -0.1]).unwrap());
        let x = g.constant(batch.clone());
        let y = routed_norm_forward(
            &mut state,
            &mut g,
            x,
            gamma,
            beta,
            &key,
            Mode::Train,
            &MissingStatsPolicy::Strict,
            None,
        )
        .unwrap();
        outs.push(g.value(y).clone());
    }
    assert_eq!(outs[0], outs[1]);
}

proptest! {
    /// Sampled paths are always a subset of the candidates, have the
    /// requested size, and contain no duplicates.
    #[test]
    fn sampled_paths_are_valid_subsets(
        seed in 0u64..1000,
        iter in 0u64..1000,
        npos in 1usize..5,
        take in 1usize..8,
    ) {
        let positions: Vec<usize> = (2..2 + npos).collect();
        let take = take.min(2 * npos);
        let cfg = SamplerConfig::new(positions, take, seed);
        let sample = sample_paths(&cfg, iter).unwrap();
        let all = enumerate_candidates(&cfg).unwrap();
        prop_assert_eq!(sample.len(), take);
        for p in &sample {
            prop_assert!(all.contains(p));
        }
        for i in 0..sample.len() {
            for j in (i + 1)..sample.len() {
                prop_assert_ne!(sample[i], sample[j]);
            }
        }
    }

    /// EMA updates keep variance entries positive for positive-variance input.
    #[test]
    fn running_variance_stays_positive(
        vals in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let mut state = RoutedNormState::<f64>::new("bn", 1, true);
        let key = PathKey::from_tokens(["Ms1"]);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        state.update(&key, &Array1::from_vec(vec![mean]), &Array1::from_vec(vec![var]));
        prop_assert!(state.stats[&key].running_var[0] > 0.0 || var == 0.0);
    }
}
