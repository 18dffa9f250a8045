use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use datacase::checker::{check_g6, detect_ii};
use datacase::model::{DataUnit, EntityId, ErasureMode, PolicyTuple, Purpose, Timestamp, UnitId};
use datacase::store::{
    AccessControl, CompactLevel, CopyLocation, Derivation, ErasureStatus, Logging, PolicyChange, Store,
    StoreConfig,
};
use datacase::Error;

fn netflix() -> EntityId {
    EntityId::controller("Netflix").unwrap()
}

fn billing() -> Purpose {
    Purpose::new("billing").unwrap()
}

fn uid(s: &str) -> UnitId {
    UnitId::new(s).unwrap()
}

fn t(s: u64) -> Timestamp {
    Timestamp(s)
}

fn policies(end: u64) -> Vec<PolicyTuple> {
    vec![
        PolicyTuple::new(billing(), netflix(), t(0), t(end)).unwrap(),
        PolicyTuple::new(Purpose::compliance_erase(), netflix(), t(0), t(10_000)).unwrap(),
    ]
}

fn unit(id: &str, subject: &str, value: &[u8]) -> DataUnit {
    DataUnit::base(uid(id), EntityId::subject(subject).unwrap(), "0", value.to_vec(), t(1), policies(1_000)).unwrap()
}

/// Count of `needle` occurrences across every file under `dir`.
fn raw_occurrences(dir: &Path, needle: &[u8]) -> usize {
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            n += raw_occurrences(&path, needle);
        } else {
            let bytes = fs::read(&path).unwrap();
            n += bytes.windows(needle.len()).filter(|w| *w == needle).count();
        }
    }
    n
}

fn new_store(config: StoreConfig) -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::create(dir.path().join("s"), config).unwrap();
    (dir, store)
}

#[test]
fn put_get_and_denials() {
    let (_d, store) = new_store(StoreConfig::default());
    store.put(unit("cc", "1234", b"credit_card_info"), &netflix(), &billing(), t(2)).unwrap();
    assert_eq!(store.get(&uid("cc"), &netflix(), &billing(), t(3)).unwrap(), b"credit_card_info");
    assert_eq!(store.history_of(&uid("cc")).len(), 2);

    let err = store.get(&uid("cc"), &netflix(), &billing(), t(1_001)).unwrap_err();
    assert!(matches!(err, Error::PolicyDenied { .. }));
    assert_eq!(store.denied_count(), 1);
    // denied attempts stay out of the action history
    assert_eq!(store.history_of(&uid("cc")).len(), 2);

    let err = store.put(unit("cc", "1234", b"x"), &netflix(), &billing(), t(1_001)).unwrap_err();
    assert!(matches!(err, Error::DuplicateId(_)));
    let stranger = EntityId::processor("Ads").unwrap();
    let err = store.put(unit("cc2", "1234", b"x"), &stranger, &billing(), t(1_001)).unwrap_err();
    assert!(matches!(err, Error::PolicyDenied { .. }));
    assert!(matches!(
        store.get(&uid("nope"), &netflix(), &billing(), t(1_001)),
        Err(Error::UnknownUnit(_))
    ));
    assert!(matches!(
        store.get(&uid("cc"), &netflix(), &billing(), t(0)),
        Err(Error::TimeRegression { .. })
    ));
    assert!(check_g6(&store.snapshot(), t(2_000)).is_empty());
}

#[test]
fn versions_and_policy_updates() {
    let (_d, store) = new_store(StoreConfig::default());
    store.put(unit("u", "1", b"v1"), &netflix(), &billing(), t(2)).unwrap();
    assert_eq!(store.update_value(&uid("u"), b"v2".to_vec(), &netflix(), &billing(), t(5)).unwrap(), 2);
    let err = store.update_value(&uid("u"), b"v3".to_vec(), &netflix(), &billing(), t(5)).unwrap_err();
    assert!(matches!(err, Error::InvalidUnit(_)));
    assert_eq!(store.get(&uid("u"), &netflix(), &billing(), t(6)).unwrap(), b"v2");

    let old = PolicyTuple::new(billing(), netflix(), t(0), t(1_000)).unwrap();
    let new = old.with_window(t(0), t(5_000)).unwrap();
    store
        .update_policies(&uid("u"), PolicyChange::Replace { old, new }, &netflix(), &billing(), t(7))
        .unwrap();
    assert_eq!(store.get(&uid("u"), &netflix(), &billing(), t(4_000)).unwrap(), b"v2");

    let err = store.update_value(&uid("u"), b"v3".to_vec(), &netflix(), &billing(), t(6_000)).unwrap_err();
    assert!(matches!(err, Error::PolicyDenied { .. }));
}

#[test]
fn state_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s");
    let config = StoreConfig {
        encrypted_at_rest: true,
        access_control: AccessControl::FineGrained,
        logging: Logging::FullQueryPlusPolicyLog,
        segment_max_bytes: 512,
        ..StoreConfig::default()
    };
    {
        let store = Store::create(&path, config).unwrap();
        for i in 0..20 {
            store
                .put(unit(&format!("u{i:02}"), &format!("s{i}"), format!("value-{i}").as_bytes()), &netflix(), &billing(), t(2))
                .unwrap();
        }
        store.update_value(&uid("u03"), b"newer".to_vec(), &netflix(), &billing(), t(3)).unwrap();
        store.make_inaccessible(&uid("u04"), &netflix(), t(4)).unwrap();
        store.erase(&uid("u05"), ErasureMode::Delete, &netflix(), t(5)).unwrap();
        assert!(matches!(Store::open(&path), Err(Error::Locked(_))));
    }
    let store = Store::open(&path).unwrap();
    assert_eq!(store.unit_ids().len(), 20);
    assert_eq!(store.get(&uid("u03"), &netflix(), &billing(), t(6)).unwrap(), b"newer");
    assert_eq!(store.get(&uid("u07"), &netflix(), &billing(), t(6)).unwrap(), b"value-7");
    assert_eq!(store.status_of(&uid("u04")).unwrap(), ErasureStatus::ReversiblyInaccessible);
    assert_eq!(store.status_of(&uid("u05")).unwrap(), ErasureStatus::Deleted);
    store.restore_access(&uid("u04"), &netflix(), t(7)).unwrap();
    assert_eq!(store.get(&uid("u04"), &netflix(), &billing(), t(8)).unwrap(), b"value-4");
    for f in ["metadata.dat", "query.log", "policy.log", "actions.log", "denied.log", "escrow.bin", "manifest.json"] {
        assert!(path.join(f).exists(), "{f} missing");
    }
}

#[test]
fn create_refuses_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk"), b"x").unwrap();
    assert!(matches!(
        Store::create(dir.path(), StoreConfig::default()),
        Err(Error::DirectoryNotEmpty(_))
    ));
}

#[test]
fn reversible_inaccessibility_round_trip() {
    let (d, store) = new_store(StoreConfig::default());
    let marker = b"\x8e\x11MARKER-0123456\x07";
    store.put(unit("u", "1", marker), &netflix(), &billing(), t(2)).unwrap();
    assert!(matches!(
        store.restore_access(&uid("u"), &netflix(), t(3)),
        Err(Error::InvalidTransition { .. })
    ));
    store.make_inaccessible(&uid("u"), &netflix(), t(3)).unwrap();
    assert_eq!(raw_occurrences(d.path(), marker), 0);
    assert!(matches!(
        store.get(&uid("u"), &netflix(), &billing(), t(4)),
        Err(Error::Inaccessible { .. })
    ));
    let copies = store.copies_of(&uid("u"));
    assert!(!copies.is_empty());
    assert!(copies.locations.iter().all(|l| match l {
        CopyLocation::SegmentSlot { escrowed, .. } | CopyLocation::IndexEntry { escrowed } => *escrowed,
        CopyLocation::CacheEntry => false,
    }));
    assert!(store.has_escrow(&uid("u")));
    store.restore_access(&uid("u"), &netflix(), t(5)).unwrap();
    assert!(!store.has_escrow(&uid("u")));
    assert_eq!(store.status_of(&uid("u")).unwrap(), ErasureStatus::Live);
    assert_eq!(store.get(&uid("u"), &netflix(), &billing(), t(6)).unwrap(), marker);
    assert_eq!(raw_occurrences(d.path(), marker), 1);
}

#[test]
fn delete_zeroes_every_version() {
    let (d, store) = new_store(StoreConfig::default());
    store.put(unit("u", "1", b"FIRST-VERSION-abc123"), &netflix(), &billing(), t(2)).unwrap();
    store.update_value(&uid("u"), b"SECOND-VERSION-xyz789".to_vec(), &netflix(), &billing(), t(3)).unwrap();
    assert!(store.copies_of(&uid("u")).len() >= 3);
    let report = store.erase(&uid("u"), ErasureMode::Delete, &netflix(), t(4)).unwrap();
    assert_eq!(report.status, ErasureStatus::Deleted);
    assert!(report.bytes_zeroed > 0);
    assert!(store.copies_of(&uid("u")).is_empty());
    assert_eq!(raw_occurrences(d.path(), b"FIRST-VERSION-abc123"), 0);
    assert_eq!(raw_occurrences(d.path(), b"SECOND-VERSION-xyz789"), 0);
    let last = store.history_of(&uid("u")).pop().unwrap();
    assert_eq!(last.action.to_string(), "erase(delete)");
    assert!(last.regulation_required);

    assert!(matches!(
        store.erase(&uid("u"), ErasureMode::Delete, &netflix(), t(5)),
        Err(Error::InvalidTransition { .. })
    ));
    // escalation is allowed, going back is not
    store.erase(&uid("u"), ErasureMode::PermanentDelete, &netflix(), t(6)).unwrap();
    assert!(matches!(
        store.erase(&uid("u"), ErasureMode::StrongDelete, &netflix(), t(7)),
        Err(Error::InvalidTransition { .. })
    ));
    // erased ids are not reusable
    assert!(matches!(
        store.put(unit("u", "1", b"again"), &netflix(), &billing(), t(8)),
        Err(Error::DuplicateId(_))
    ));
}

fn derive(store: &Store, id: &str, inputs: &[&str], invertible: bool, identifiable: bool, at: u64) {
    store
        .derive(
            Derivation::new(uid(id), inputs.iter().map(|s| uid(s)).collect(), "f", format!("{id}-derived").into_bytes())
                .invertible(invertible)
                .subjects_identifiable(identifiable),
            &netflix(),
            &billing(),
            t(at),
        )
        .unwrap();
}

#[test]
fn strong_delete_cascades_to_identifiable_children_only() {
    let (_d, store) = new_store(StoreConfig::default());
    store.put(unit("x", "1", b"x-val"), &netflix(), &billing(), t(2)).unwrap();
    store.put(unit("w", "2", b"w-val"), &netflix(), &billing(), t(2)).unwrap();
    derive(&store, "child", &["x", "w"], true, true, 3);
    derive(&store, "anon", &["x"], false, false, 3);
    derive(&store, "grandchild", &["child"], false, true, 4);

    let report = store.erase(&uid("x"), ErasureMode::StrongDelete, &netflix(), t(5)).unwrap();
    let cascaded: BTreeSet<_> = report.cascaded.iter().cloned().collect();
    assert_eq!(cascaded, BTreeSet::from([uid("child"), uid("grandchild")]));
    assert_eq!(store.status_of(&uid("anon")).unwrap(), ErasureStatus::Live);
    assert_eq!(store.status_of(&uid("w")).unwrap(), ErasureStatus::Live);
    assert_eq!(store.status_of(&uid("grandchild")).unwrap(), ErasureStatus::StrongDeleted);
    // no upward cascade
    for u in ["x", "child", "grandchild"] {
        let history = store.history_of(&uid(u));
        assert!(history.last().unwrap().action.is_erase(), "{u}");
        assert!(history[..history.len() - 2].iter().all(|r| r.is_redacted()), "{u}");
    }
    assert!(!store.history_of(&uid("w")).iter().any(|r| r.is_redacted()));
    assert!(detect_ii(&store.snapshot(), t(6)).is_empty());
    assert!(matches!(
        store.derive(Derivation::new(uid("z"), vec![uid("x")], "f", vec![1]), &netflix(), &billing(), t(7)),
        Err(Error::ErasedInput(_))
    ));
}

#[test]
fn delete_leaves_inference_through_invertible_child() {
    let (_d, store) = new_store(StoreConfig::default());
    store.put(unit("x", "1", b"x-val"), &netflix(), &billing(), t(2)).unwrap();
    derive(&store, "y", &["x"], true, true, 3);
    store.erase(&uid("x"), ErasureMode::Delete, &netflix(), t(4)).unwrap();
    let v = detect_ii(&store.snapshot(), t(5));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].unit_id, uid("x"));
}

#[test]
fn compaction_reclaims_and_preserves_live_data() {
    let (_d, store) = new_store(StoreConfig {
        segment_max_bytes: 2048,
        encrypted_at_rest: true,
        ..StoreConfig::default()
    });
    for i in 0..100 {
        store
            .put(unit(&format!("u{i:03}"), &format!("s{i}"), format!("payload-{i:03}").as_bytes()), &netflix(), &billing(), t(2))
            .unwrap();
    }
    assert_eq!(store.compact(CompactLevel::Full).unwrap(), 0);
    assert_eq!(store.compact(CompactLevel::Incremental).unwrap(), 0);
    for i in (0..100).step_by(2) {
        store.erase(&uid(&format!("u{i:03}")), ErasureMode::Delete, &netflix(), t(3)).unwrap();
    }
    store.update_value(&uid("u001"), b"payload-001-b".to_vec(), &netflix(), &billing(), t(4)).unwrap();
    let before = store.space_usage().unwrap().total_bytes;
    let reclaimed = store.compact(CompactLevel::Full).unwrap();
    assert!(reclaimed > 0);
    assert!(store.space_usage().unwrap().total_bytes < before);
    assert_eq!(store.compact(CompactLevel::Full).unwrap(), 0);
    for i in (1..100).step_by(2) {
        let expected = if i == 1 { "payload-001-b".to_owned() } else { format!("payload-{i:03}") };
        assert_eq!(
            store.get(&uid(&format!("u{i:03}")), &netflix(), &billing(), t(5)).unwrap(),
            expected.as_bytes()
        );
    }
    assert_eq!(store.history_of(&uid("u001")).len(), 3);
    assert_eq!(store.status_of(&uid("u000")).unwrap(), ErasureStatus::Deleted);

    // compacted layout reopens cleanly
    let dir = store.dir().to_owned();
    drop(store);
    let store = Store::open(&dir).unwrap();
    assert_eq!(store.get(&uid("u099"), &netflix(), &billing(), t(6)).unwrap(), b"payload-099");
    assert_eq!(store.status_of(&uid("u050")).unwrap(), ErasureStatus::Deleted);
}

#[test]
fn metadata_scan_matches_across_access_modes() {
    for ac in [AccessControl::RoleBased, AccessControl::MetadataJoin, AccessControl::FineGrained] {
        let (_d, store) = new_store(StoreConfig {
            access_control: ac,
            ..StoreConfig::default()
        });
        for i in 0..10 {
            store.put(unit(&format!("u{i}"), "s", &[i as u8; 4]), &netflix(), &billing(), t(2)).unwrap();
        }
        store.erase(&uid("u3"), ErasureMode::Delete, &netflix(), t(3)).unwrap();
        let extra = PolicyTuple::new(Purpose::new("ads").unwrap(), netflix(), t(0), t(100)).unwrap();
        store.update_policies(&uid("u5"), PolicyChange::Add(extra), &netflix(), &billing(), t(4)).unwrap();
        let hits = store.read_by_metadata(&billing(), &netflix(), t(5)).unwrap();
        assert_eq!(hits.len(), 9, "{ac}");
        let ads = store.read_by_metadata(&Purpose::new("ads").unwrap(), &netflix(), t(6)).unwrap();
        assert_eq!(ads, vec![(uid("u5"), vec![5u8; 4])], "{ac}");
        assert!(check_g6(&store.snapshot(), t(7)).is_empty(), "{ac}");
    }
}
