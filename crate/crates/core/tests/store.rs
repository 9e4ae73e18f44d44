use edgefaas_core::sim::BlockReason;
use edgefaas_core::store::{ArchiveManifest, CheckpointStore, StoreError, DIGEST_ALGORITHM, MANIFEST_FORMAT_VERSION};
use edgefaas_core::{FunctionId, InstanceId, NodeId, SimTime};
use proptest::prelude::*;

fn manifest(n: u64, blocked: bool) -> ArchiveManifest {
    ArchiveManifest {
        function_id: FunctionId::new("f"),
        instance_id: InstanceId::new(format!("A-{n}")),
        image_digest: "sha256:f".into(),
        wake_rules: Vec::new(),
        block: blocked.then_some(BlockReason::Sleep { wake_at: SimTime::from_secs(n) }),
        created_at: SimTime::from_millis(n),
        origin_node: NodeId::new("A"),
        format_version: MANIFEST_FORMAT_VERSION,
        digest_algorithm: DIGEST_ALGORITHM.into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn archives_read_back_exactly_and_dedupe(n in 0..1_000_000u64, blocked in any::<bool>(), blob in prop::collection::vec(any::<u8>(), 1..512)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let m = manifest(n, blocked);
        let id = store.write_archive(&m, &blob).unwrap();
        let used = store.used_bytes();
        prop_assert_eq!(store.write_archive(&m, &blob).unwrap(), id.clone());
        prop_assert_eq!(store.used_bytes(), used);
        let back = store.read_archive(&id).unwrap();
        prop_assert_eq!(back.manifest, m);
        prop_assert_eq!(back.state_blob, blob);
        let reopened = CheckpointStore::open(dir.path()).unwrap();
        prop_assert!(reopened.contains(&id));
    }

    #[test]
    fn any_flipped_byte_is_caught(
        n in 0..1_000_000u64,
        blob in prop::collection::vec(any::<u8>(), 1..256),
        file in 0..3usize,
        pos in any::<prop::sample::Index>(),
        mask in 1..=255u8,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let id = store.write_archive(&manifest(n, false), &blob).unwrap();
        let path = store.archive_dir(&id).join(["manifest.json", "state.bin", "checksum"][file]);
        let mut bytes = std::fs::read(&path).unwrap();
        let at = pos.index(bytes.len());
        bytes[at] ^= mask;
        std::fs::write(&path, bytes).unwrap();
        prop_assert!(matches!(store.read_archive(&id), Err(StoreError::ChecksumMismatch(_))));
        prop_assert!(!store.contains(&id));
        prop_assert!(matches!(store.read_archive(&id), Err(StoreError::NotFound(_))));
    }
}
