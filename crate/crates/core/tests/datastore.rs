mod common;

use chaos_forecast_core::container;
use chaos_forecast_core::datastore::{
    split_by_trajectory, window_starts, BundleMeta, NormMode, Normalizer, SplitSpec,
    TrajectoryBundle, STD_FLOOR,
};
use proptest::prelude::*;
use serde_json::json;

fn toy_bundle(s: usize, t: usize, n: usize) -> TrajectoryBundle {
    let data: Vec<f64> = (0..s * t * n).map(|i| (i as f64).sin() * 3.0 + i as f64 * 0.01).collect();
    let times: Vec<f64> = (0..t).map(|i| i as f64 * 0.5).collect();
    let meta = BundleMeta::new("toy", 42, json!({"s": s}));
    TrajectoryBundle::new(data, (s, t, n), times, None, meta).unwrap()
}

#[test]
fn roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.cfb");
    let start: Vec<f64> = (0..2 * 3).map(|i| i as f64 * 0.25).collect();
    let data: Vec<f64> = (0..2 * 4 * 3).map(|i| (i as f64 * 0.7).cos()).collect();
    let bundle = TrajectoryBundle::new(
        data,
        (2, 4, 3),
        vec![0.0, 0.1, 0.2, 0.3],
        Some(start),
        BundleMeta::new("toy", 7, json!({"dt": 0.1})),
    )
    .unwrap();
    bundle.write(&path).unwrap();
    let back = TrajectoryBundle::read(&path).unwrap();
    assert_eq!(bundle, back);

    // Writing again yields the same bytes.
    let path2 = dir.path().join("bundle2.cfb");
    back.write(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn file_size_is_header_plus_arrays_plus_crc() {
    let bundle = TrajectoryBundle::new(
        (0..6).map(|i| i as f64).collect(),
        (1, 2, 3),
        vec![0.0, 1.0],
        None,
        BundleMeta::new("toy", 0, json!({})),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.cfb");
    bundle.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    // magic + length prefix + json + 6 data values + 2 times + crc
    assert_eq!(bytes.len(), 4 + 4 + json_len + 6 * 8 + 2 * 8 + 4);
    assert_eq!(&bytes[..4], b"CFB1");
}

#[test]
fn corruption_and_truncation_are_detected() {
    let bundle = toy_bundle(2, 5, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.cfb");
    bundle.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Flip one payload byte.
    let mut corrupted = bytes.clone();
    corrupted[20] ^= 0xff;
    let err = container::decode(&corrupted).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    // Drop the tail.
    let err = container::decode(&bytes[..bytes.len() - 9]).unwrap_err().to_string();
    assert!(err.contains("checksum") || err.contains("truncated"), "{err}");

    // Wrong magic.
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let err = container::decode(&bad_magic).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn state_indexing_is_row_major() {
    let bundle = toy_bundle(3, 4, 2);
    let (_, t, n) = bundle.shape();
    let flat = bundle.data();
    assert_eq!(bundle.state(2, 1), &flat[(2 * t + 1) * n..(2 * t + 1) * n + n]);
    assert_eq!(bundle.trajectory(1).len(), t * n);
}

#[test]
fn split_sizes_follow_floor_rule() {
    let spec = SplitSpec::new(0.8, 0.1, 0.1, 3);
    let split = split_by_trajectory(10, &spec).unwrap();
    assert_eq!(split.train.len(), 8);
    assert_eq!(split.val.len(), 1);
    assert_eq!(split.test.len(), 1);

    // Same seed, same split; different seed, different assignment.
    let again = split_by_trajectory(10, &spec).unwrap();
    assert_eq!(split, again);
    let other = split_by_trajectory(10, &SplitSpec::new(0.8, 0.1, 0.1, 4)).unwrap();
    assert!(split.train != other.train || split.val != other.val);
}

#[test]
fn empty_requested_split_is_rejected() {
    let err = split_by_trajectory(8, &SplitSpec::new(0.8, 0.1, 0.1, 0)).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
    assert!(split_by_trajectory(4, &SplitSpec::new(0.0, 0.5, 0.5, 0)).is_err());
    assert!(split_by_trajectory(4, &SplitSpec::new(0.9, 0.9, 0.1, 0)).is_err());
}

#[test]
fn normalizer_global_and_per_variable() {
    let bundle = toy_bundle(4, 10, 3);
    let split = split_by_trajectory(4, &SplitSpec::new(0.5, 0.25, 0.25, 1)).unwrap();

    let norm = Normalizer::fit(NormMode::Global, &bundle, &split.train).unwrap();
    assert_eq!(norm.mean.len(), 1);
    let mut sum = 0.0;
    let mut count = 0.0;
    for &tr in &split.train {
        for &x in bundle.trajectory(tr) {
            sum += x;
            count += 1.0;
        }
    }
    assert!((norm.mean[0] - sum / count).abs() < 1e-12);

    let norm = Normalizer::fit(NormMode::PerVariable, &bundle, &split.train).unwrap();
    assert_eq!(norm.mean.len(), 3);
    // Forward then inverse is the identity.
    let mut state = bundle.state(0, 0).to_vec();
    let orig = state.clone();
    norm.normalize_state(&mut state).unwrap();
    norm.denormalize_state(&mut state).unwrap();
    assert!(common::max_abs_diff(&orig, &state) < 1e-12);
}

#[test]
fn normalizer_constant_data_hits_std_floor() {
    let data = vec![2.5; 2 * 4 * 3];
    let bundle = TrajectoryBundle::new(
        data,
        (2, 4, 3),
        vec![0.0, 1.0, 2.0, 3.0],
        None,
        BundleMeta::new("toy", 0, json!({})),
    )
    .unwrap();
    let norm = Normalizer::fit(NormMode::PerVariable, &bundle, &[0, 1]).unwrap();
    for s in &norm.std {
        assert_eq!(*s, STD_FLOOR);
    }
    let mut state = bundle.state(0, 0).to_vec();
    norm.normalize_state(&mut state).unwrap();
    for v in state {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn per_sample_normalizes_on_the_fly_and_rejects_inverse() {
    let norm = Normalizer::fit(NormMode::PerSample, &toy_bundle(1, 2, 4), &[0]).unwrap();
    let mut state = vec![1.0, 2.0, 3.0, 4.0];
    norm.normalize_state(&mut state).unwrap();
    let mean: f64 = state.iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!(norm.denormalize_state(&mut state).is_err());
}

#[test]
fn window_start_enumeration() {
    // t=10, l=3: valid starts satisfy t0 + 3 < 10.
    assert_eq!(window_starts(10, 3, 2).unwrap(), vec![0, 2, 4, 6]);
    assert_eq!(window_starts(10, 3, 1).unwrap(), (0..7).collect::<Vec<_>>());
    assert_eq!(window_starts(4, 4, 1).unwrap(), Vec::<usize>::new());
    assert_eq!(window_starts(5, 4, 10).unwrap(), vec![0]);
    assert!(window_starts(10, 0, 1).is_err());
    assert!(window_starts(10, 2, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_split_partitions_ensemble(s in 4usize..60, seed in 0u64..500) {
        let spec = SplitSpec::new(0.0, 0.25, 0.25, seed);
        let split = split_by_trajectory(s, &spec).unwrap();
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s).collect::<Vec<_>>());
        prop_assert_eq!(split.val.len(), s / 4);
        prop_assert_eq!(split.test.len(), s / 4);
    }

    #[test]
    fn prop_window_count_formula(t in 2usize..200, l in 1usize..20, stride in 1usize..10) {
        prop_assume!(t > l);
        let starts = window_starts(t, l, stride).unwrap();
        let expected = (t - l - 1) / stride + 1;
        prop_assert_eq!(starts.len(), expected);
        for &t0 in &starts {
            prop_assert!(t0 + l < t);
        }
    }
}
