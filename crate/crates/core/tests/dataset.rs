mod common;

use std::collections::BTreeSet;
use std::io::Write;

use fedloc::dataset::*;
use fedloc::Error;
use proptest::prelude::*;

fn ids(set: &FingerprintSet) -> BTreeSet<RecordId> {
    set.ids().into_iter().collect()
}

fn assert_sound(set: &FingerprintSet, a: &ClientAssignment, expected: &BTreeSet<RecordId>) {
    let mut seen = BTreeSet::new();
    for client in a.clients.values() {
        for id in client.ids() {
            assert!(seen.insert(id), "record {id:?} in two clients");
        }
    }
    assert_eq!(&seen, expected);
    assert!(seen.is_subset(&ids(set)));
}

#[test]
fn csv_round_trip_preserves_every_field() {
    let c = common::corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trainingData.csv");
    write_csv(&c.train, &path).unwrap();
    let back = load_csv(&path, Provenance::Training).unwrap();
    assert_eq!(back.len(), c.train.len());
    for (a, b) in back.iter().zip(c.train.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn corpus_has_expected_shape() {
    let c = common::corpus();
    assert_eq!(c.train.len(), 19_938, "{}", c.label);
    assert_eq!(c.validation.len(), 1_111, "{}", c.label);
    assert_eq!(c.building(1).floors(), vec![0, 1, 2, 3]);
}

fn write_file(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{}", header().join(",")).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

fn row(rss0: &str, floor: &str) -> String {
    let mut fields = vec!["100".to_string(); WAP_COUNT];
    fields[0] = rss0.to_string();
    fields.extend(
        ["-7600.5", "4864900.25", floor, "1", "106", "2", "2", "13", "1371713733"]
            .iter()
            .map(|s| s.to_string()),
    );
    fields.join(",") + "\n"
}

#[test]
fn loader_reports_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = row("-80", "2");
    let path = write_file(dir.path(), &format!("{good}{good}-70,100\n"));
    match load_csv(&path, Provenance::Training) {
        Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a malformed-row error, got {other:?}"),
    }
    let path = write_file(dir.path(), &row("-111", "2"));
    assert!(matches!(
        load_csv(&path, Provenance::Training),
        Err(Error::MalformedRow { line: 2, .. })
    ));
    let path = write_file(dir.path(), &row("-80", "7"));
    assert!(load_csv(&path, Provenance::Training).is_err());
    let path = write_file(dir.path(), &row("-80", "1.0"));
    let set = load_csv(&path, Provenance::Training).unwrap();
    assert_eq!(set.records()[0].floor, 1);
    assert_eq!(set.records()[0].rss[0], -80);
    assert_eq!(set.records()[0].rss[1], NOT_DETECTED);
}

#[test]
fn loader_rejects_wrong_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    let mut h = header();
    h.swap(0, 1);
    std::fs::write(&path, h.join(",") + "\n").unwrap();
    assert!(matches!(
        load_csv(&path, Provenance::Training),
        Err(Error::Schema { .. })
    ));
    let missing = dir.path().join("missing.csv");
    assert!(matches!(
        load_csv(&missing, Provenance::Training),
        Err(Error::Io { .. })
    ));
}

#[test]
fn partitions_of_building_one_are_sound() {
    let c = common::corpus();
    let b1 = c.building(1);

    let by_phone = partition_by_phone(&b1, 8).unwrap();
    let phones: BTreeSet<u32> = by_phone.groups.values().copied().collect();
    let expected = b1
        .iter()
        .filter(|r| phones.contains(&r.phone_id))
        .map(|r| r.id)
        .collect();
    assert_sound(&b1, &by_phone, &expected);
    for (client, set) in &by_phone.clients {
        assert!(set.iter().all(|r| r.phone_id == by_phone.groups[client]));
    }
    let all = partition_by_phone(&b1, b1.phone_counts().len()).unwrap();
    assert_sound(&b1, &all, &ids(&b1));

    let by_floor = partition_by_floor(&b1, 4, 7).unwrap();
    assert_eq!(by_floor.len(), 16);
    assert_sound(&b1, &by_floor, &ids(&b1));
    for set in by_floor.clients.values() {
        assert_eq!(set.floors().len(), 1);
    }

    let uniform = partition_uniform(&b1, 16, 7).unwrap();
    assert_sound(&b1, &uniform, &ids(&b1));
}

#[test]
fn partitions_are_reproducible() {
    let b1 = common::corpus().building(1);
    let a = partition_uniform(&b1, 16, 3).unwrap();
    let b = partition_uniform(&b1, 16, 3).unwrap();
    let c = partition_uniform(&b1, 16, 4).unwrap();
    for (x, y) in a.clients.values().zip(b.clients.values()) {
        assert_eq!(x.ids(), y.ids());
    }
    assert!(a
        .clients
        .values()
        .zip(c.clients.values())
        .any(|(x, y)| x.ids() != y.ids()));
}

#[test]
fn device_scenario_invariants() {
    let c = common::corpus();
    let floor = c.floor(1, 1);
    let source = partition_by_phone(&floor, 8).unwrap();
    let phone = source.groups[&7];
    let opts = ScenarioOptions {
        holdout_fraction: 0.3,
        seed: 5,
    };
    let mut previous: Option<BTreeSet<RecordId>> = None;
    let mut holdout: Option<BTreeSet<RecordId>> = None;
    for rho in [0.25, 0.5, 1.0] {
        let s = build_device_scenario(&floor, &[phone], 8, rho, &opts, Some(&c.validation)).unwrap();
        let train = ids(&s.target_trainable());
        let hold = ids(&s.holdout);
        let src = ids(&s.source.union());
        assert!(train.is_disjoint(&hold));
        assert!(src.is_disjoint(&hold));
        let client = s.source.client_for_group(phone).unwrap();
        assert!(train.is_subset(&ids(&s.source.clients[&client])));
        assert!(s.holdout.iter().all(|r| r.phone_id == phone));
        if let Some(p) = &previous {
            assert!(p.is_subset(&train), "subsamples must be nested across ratios");
        }
        if let Some(h) = &holdout {
            assert_eq!(h, &hold, "holdout must not depend on the ratio");
        }
        previous = Some(train);
        holdout = Some(hold);
    }
    let s = build_device_scenario(&floor, &[phone], 8, 1.0, &opts, None).unwrap();
    assert_eq!(s.target_trainable().ids(), s.target_pool.ids());
    let unselected = floor
        .phone_counts()
        .keys()
        .copied()
        .find(|p| !source.groups.values().any(|g| g == p));
    if let Some(p) = unselected {
        assert!(build_device_scenario(&floor, &[p], 8, 1.0, &opts, None).is_err());
    }
    assert!(build_device_scenario(&floor, &[phone], 8, 0.0, &opts, None).is_err());
    assert!(build_device_scenario(&floor, &[phone], 8, 1.5, &opts, None).is_err());
}

#[test]
fn time_scenario_invariants() {
    let floor = common::corpus().floor(1, 1);
    let split = suggest_split_time(&floor).unwrap();
    let opts = ScenarioOptions {
        holdout_fraction: 0.3,
        seed: 9,
    };
    let a = build_time_scenario(&floor, split, 8, 0.25, &opts).unwrap();
    let b = build_time_scenario(&floor, split, 8, 1.0, &opts).unwrap();
    assert!(a.source.union().iter().all(|r| r.timestamp < split));
    assert!(a.target_trainable().iter().all(|r| r.timestamp >= split));
    assert!(a.holdout.iter().all(|r| r.timestamp >= split));
    assert!(ids(&a.source.union()).is_disjoint(&ids(&a.target_trainable())));
    assert!(ids(&a.holdout).is_disjoint(&ids(&b.target_trainable())));
    assert_eq!(a.holdout.ids(), b.holdout.ids());
    assert_eq!(a.source.union().ids(), b.source.union().ids());
    assert!(ids(&a.target_trainable()).is_subset(&ids(&b.target_trainable())));
    let gap = median_gap_days(&a.source.union(), &a.holdout).unwrap();
    assert!(gap > 7.0, "phases should be weeks apart, got {gap} days");
    assert!(build_time_scenario(&floor, i64::MAX, 8, 1.0, &opts).is_err());
}

#[test]
fn normalization_round_trips_positions() {
    let floor = common::corpus().floor(1, 1);
    let norm = fit_target_normalization(&floor);
    for r in floor.iter().take(50) {
        let q = norm.normalize_target(r.position());
        assert!((0.0..=1.0).contains(&q[0]) && (0.0..=1.0).contains(&q[1]));
        let p = norm.denormalize_target(q);
        assert!((p[0] - r.longitude).abs() < 1e-6 && (p[1] - r.latitude).abs() < 1e-6);
    }
    let x = norm.encode_features(&floor);
    assert_eq!(x.len(), floor.len() * WAP_COUNT);
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_partition_is_balanced(n in 1usize..40, seed in any::<u64>()) {
        let floor = common::corpus().floor(1, 3);
        let a = partition_uniform(&floor, n, seed).unwrap();
        let sizes: Vec<usize> = a.clients.values().map(FingerprintSet::len).collect();
        prop_assert_eq!(sizes.len(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(a.total_records(), floor.len());
        let union: BTreeSet<RecordId> = a.union().ids().into_iter().collect();
        prop_assert_eq!(union, ids(&floor));
    }

    #[test]
    fn by_floor_clients_are_single_floor(per_floor in 1usize..6, seed in any::<u64>()) {
        let b1 = common::corpus().building(1);
        let a = partition_by_floor(&b1, per_floor, seed).unwrap();
        prop_assert_eq!(a.len(), per_floor * 4);
        for (id, set) in &a.clients {
            prop_assert!(set.iter().all(|r| r.floor as u32 == a.groups[id]));
        }
        prop_assert_eq!(a.total_records(), b1.len());
    }

    #[test]
    fn rss_normalization_is_monotone(a in MIN_RSS_DBM..=0i16, b in MIN_RSS_DBM..=0i16) {
        let spec = NormalizationSpec::default();
        let (x, y) = (normalize_rss(a, &spec), normalize_rss(b, &spec));
        prop_assert!((0.0..=1.0).contains(&x));
        if a <= b {
            prop_assert!(x <= y);
        }
        prop_assert_eq!(normalize_rss(NOT_DETECTED, &spec), 0.0);
    }
}
