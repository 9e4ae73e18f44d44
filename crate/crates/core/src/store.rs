//! On-disk, content-addressed checkpoint archives.
//!
//! Layout under the data directory:
//!
//! ```text
//! <root>/archives/<archive_id>/manifest.json   canonical JSON, sorted keys
//! <root>/archives/<archive_id>/state.bin       snapshot blob
//! <root>/archives/<archive_id>/checksum        hex SHA-256, same as <archive_id>
//! <root>/tmp/                                  in-flight writes
//! <root>/quarantine/                           archives that failed verification
//! ```
//!
//! The checksum is SHA-256 over the manifest length (8 bytes, little-endian),
//! the manifest bytes and the blob. An archive is only ever returned from
//! [`CheckpointStore::read_archive`] after that digest has been recomputed and
//! matched against both the directory name and the stored checksum.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::proxy::WakeRule;
use crate::sim::BlockReason;
use crate::types::{ArchiveId, FunctionId, InstanceId, NodeId, SimTime};

pub const DIGEST_ALGORITHM: &str = "sha256";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const STATE_FILE: &str = "state.bin";
const CHECKSUM_FILE: &str = "checksum";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub function_id: FunctionId,
    pub instance_id: InstanceId,
    /// Base image the archive must be restored on top of.
    pub image_digest: String,
    pub wake_rules: Vec<WakeRule>,
    /// Blocking condition at checkpoint time, re-checked on restore.
    pub block: Option<BlockReason>,
    pub created_at: SimTime,
    pub origin_node: NodeId,
    pub format_version: u32,
    pub digest_algorithm: String,
}

impl ArchiveManifest {
    /// Canonical encoding: JSON with sorted keys and no extra whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        // serde_json::Value keeps object keys in a BTreeMap, so this sorts them
        let value = serde_json::to_value(self).expect("manifest serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointArchive {
    pub archive_id: ArchiveId,
    pub manifest: ArchiveManifest,
    pub manifest_bytes: Vec<u8>,
    pub state_blob: Vec<u8>,
    pub checksum: [u8; 32],
}

impl CheckpointArchive {
    /// Bytes this archive occupies on disk, excluding the checksum file.
    pub fn size(&self) -> u64 {
        (self.manifest_bytes.len() + self.state_blob.len()) as u64
    }
}

/// Digest over a manifest encoding and a state blob.
pub fn archive_checksum(manifest_bytes: &[u8], blob: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((manifest_bytes.len() as u64).to_le_bytes());
    h.update(manifest_bytes);
    h.update(blob);
    h.finalize().into()
}

pub fn archive_id_for(checksum: &[u8; 32]) -> ArchiveId {
    ArchiveId(hex::encode(checksum))
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("archive {0} not found")]
    NotFound(ArchiveId),
    #[error("archive {0} failed checksum verification and was quarantined")]
    ChecksumMismatch(ArchiveId),
    #[error("checkpoint storage is full ({used} of {capacity} bytes used, {needed} more needed)")]
    StorageFull { used: u64, capacity: u64, needed: u64 },
    #[error("archive {id} uses unsupported format version {version} or digest {digest}")]
    UnsupportedFormat { id: ArchiveId, version: u32, digest: String },
    #[error("empty state blob")]
    EmptyBlob,
    #[error("retain count must be at least 1")]
    InvalidRetain,
    #[error("checkpoint storage I/O failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchiveInfo {
    pub archive_id: ArchiveId,
    pub function_id: FunctionId,
    pub instance_id: InstanceId,
    pub created_at: SimTime,
    pub size: u64,
    #[serde(skip)]
    seq: u64,
}

#[derive(Debug)]
pub struct CheckpointStore {
    root: PathBuf,
    index: RwLock<BTreeMap<ArchiveId, ArchiveInfo>>,
    capacity: Option<u64>,
    next_seq: u64,
    next_tmp: u64,
}

impl CheckpointStore {
    /// Opens (or creates) a store rooted at `root` and indexes what is on disk.
    /// Leftovers of interrupted writes are discarded.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("archives"))?;
        fs::create_dir_all(root.join("quarantine"))?;
        let tmp = root.join("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;

        let mut store =
            CheckpointStore { root, index: RwLock::new(BTreeMap::new()), capacity: None, next_seq: 0, next_tmp: 0 };
        let mut ids: Vec<String> = fs::read_dir(store.root.join("archives"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        for id in ids {
            let id = ArchiveId(id);
            match store.read_archive(&id) {
                Ok(archive) => {
                    let info = store.info_for(&archive);
                    store.index.get_mut().expect("index lock").insert(id, info);
                }
                Err(e) => tracing::warn!(archive = %id, error = %e, "skipping archive during reindex"),
            }
        }
        Ok(store)
    }

    /// Caps the total bytes of stored archives.
    pub fn with_capacity(mut self, bytes: u64) -> Self {
        self.capacity = Some(bytes);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn archive_dir(&self, id: &ArchiveId) -> PathBuf {
        self.root.join("archives").join(id.as_str())
    }

    fn info_for(&mut self, archive: &CheckpointArchive) -> ArchiveInfo {
        self.next_seq += 1;
        ArchiveInfo {
            archive_id: archive.archive_id.clone(),
            function_id: archive.manifest.function_id.clone(),
            instance_id: archive.manifest.instance_id.clone(),
            created_at: archive.manifest.created_at,
            size: archive.size(),
            seq: self.next_seq,
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.index.read().expect("index lock").values().map(|i| i.size).sum()
    }

    /// Atomically persists an archive and returns its content address.
    /// Writing identical content again is a no-op.
    pub fn write_archive(&mut self, manifest: &ArchiveManifest, blob: &[u8]) -> Result<ArchiveId, StoreError> {
        if blob.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let manifest_bytes = manifest.canonical_bytes();
        let checksum = archive_checksum(&manifest_bytes, blob);
        let archive = CheckpointArchive {
            archive_id: archive_id_for(&checksum),
            manifest: manifest.clone(),
            manifest_bytes,
            state_blob: blob.to_vec(),
            checksum,
        };
        self.put(archive)
    }

    /// Stores an archive received from elsewhere, re-verifying its content address.
    pub fn import(&mut self, archive: &CheckpointArchive) -> Result<ArchiveId, StoreError> {
        let checksum = archive_checksum(&archive.manifest_bytes, &archive.state_blob);
        if checksum != archive.checksum || archive_id_for(&checksum) != archive.archive_id {
            return Err(StoreError::ChecksumMismatch(archive.archive_id.clone()));
        }
        self.put(archive.clone())
    }

    fn put(&mut self, archive: CheckpointArchive) -> Result<ArchiveId, StoreError> {
        let id = archive.archive_id.clone();
        let dest = self.archive_dir(&id);
        if self.index.read().expect("index lock").contains_key(&id) && dest.exists() {
            return Ok(id);
        }
        if let Some(capacity) = self.capacity {
            let used = self.used_bytes();
            if used + archive.size() > capacity {
                return Err(StoreError::StorageFull { used, capacity, needed: archive.size() });
            }
        }

        self.next_tmp += 1;
        let tmp = self.root.join("tmp").join(format!("{}.{}", id, self.next_tmp));
        let written = (|| -> io::Result<()> {
            fs::create_dir_all(&tmp)?;
            write_synced(&tmp.join(MANIFEST_FILE), &archive.manifest_bytes)?;
            write_synced(&tmp.join(STATE_FILE), &archive.state_blob)?;
            write_synced(&tmp.join(CHECKSUM_FILE), hex::encode(archive.checksum).as_bytes())?;
            if dest.exists() {
                // an identical archive is already on disk
                fs::remove_dir_all(&tmp)
            } else {
                fs::rename(&tmp, &dest)
            }
        })();
        if let Err(e) = written {
            let _ = fs::remove_dir_all(&tmp);
            return Err(match e.kind() {
                io::ErrorKind::StorageFull => StoreError::StorageFull {
                    used: self.used_bytes(),
                    capacity: self.capacity.unwrap_or(0),
                    needed: archive.size(),
                },
                _ => StoreError::Io(e),
            });
        }
        let info = self.info_for(&archive);
        self.index.write().expect("index lock").insert(id.clone(), info);
        Ok(id)
    }

    /// Reads and verifies an archive. A mismatch moves it to quarantine so it
    /// can never be restored from.
    pub fn read_archive(&self, id: &ArchiveId) -> Result<CheckpointArchive, StoreError> {
        let dir = self.archive_dir(id);
        if !valid_id(id) || !dir.is_dir() {
            return Err(StoreError::NotFound(id.clone()));
        }
        let read = |name: &str| fs::read(dir.join(name));
        let (manifest_bytes, state_blob, stored) = match (read(MANIFEST_FILE), read(STATE_FILE), read(CHECKSUM_FILE)) {
            (Ok(m), Ok(s), Ok(c)) => (m, s, c),
            (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
            _ => {
                self.quarantine(id)?;
                return Err(StoreError::ChecksumMismatch(id.clone()));
            }
        };
        let checksum = archive_checksum(&manifest_bytes, &state_blob);
        let hex_sum = hex::encode(checksum);
        if hex_sum != id.as_str() || stored != hex_sum.as_bytes() {
            self.quarantine(id)?;
            return Err(StoreError::ChecksumMismatch(id.clone()));
        }
        let manifest: ArchiveManifest = match serde_json::from_slice(&manifest_bytes) {
            Ok(m) => m,
            Err(_) => {
                self.quarantine(id)?;
                return Err(StoreError::ChecksumMismatch(id.clone()));
            }
        };
        if manifest.format_version != MANIFEST_FORMAT_VERSION || manifest.digest_algorithm != DIGEST_ALGORITHM {
            return Err(StoreError::UnsupportedFormat {
                id: id.clone(),
                version: manifest.format_version,
                digest: manifest.digest_algorithm,
            });
        }
        Ok(CheckpointArchive { archive_id: id.clone(), manifest, manifest_bytes, state_blob, checksum })
    }

    fn quarantine(&self, id: &ArchiveId) -> Result<(), StoreError> {
        self.index.write().expect("index lock").remove(id);
        let src = self.archive_dir(id);
        if !src.exists() {
            return Ok(());
        }
        let qdir = self.root.join("quarantine");
        let mut n = 0u32;
        let dest = loop {
            let candidate = qdir.join(format!("{id}.{n}"));
            if !candidate.exists() {
                break candidate;
            }
            n += 1;
        };
        tracing::warn!(archive = %id, "quarantining archive that failed verification");
        fs::rename(src, dest)?;
        Ok(())
    }

    pub fn contains(&self, id: &ArchiveId) -> bool {
        self.index.read().expect("index lock").contains_key(id)
    }

    /// Indexed archives, oldest first.
    pub fn list(&self) -> Vec<ArchiveInfo> {
        let mut all: Vec<_> = self.index.read().expect("index lock").values().cloned().collect();
        all.sort_by_key(|a| (a.created_at, a.seq));
        all
    }

    pub fn remove(&mut self, id: &ArchiveId) -> Result<bool, StoreError> {
        let existed = self.index.get_mut().expect("index lock").remove(id).is_some();
        let dir = self.archive_dir(id);
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(existed)
    }

    /// Keeps the newest `retain_latest` archives per (function, instance) plus
    /// everything in `pinned`; removes the rest.
    pub fn gc(&mut self, retain_latest: usize, pinned: &BTreeSet<ArchiveId>) -> Result<usize, StoreError> {
        if retain_latest == 0 {
            return Err(StoreError::InvalidRetain);
        }
        let mut groups: BTreeMap<(FunctionId, InstanceId), Vec<ArchiveInfo>> = BTreeMap::new();
        for info in self.list() {
            groups.entry((info.function_id.clone(), info.instance_id.clone())).or_default().push(info);
        }
        let mut removed = 0;
        for (_, mut archives) in groups {
            // newest first
            archives.reverse();
            for info in archives.into_iter().skip(retain_latest) {
                if pinned.contains(&info.archive_id) {
                    continue;
                }
                self.remove(&info.archive_id)?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

fn valid_id(id: &ArchiveId) -> bool {
    id.as_str().len() == 64 && id.as_str().bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn write_synced(path: &Path, data: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(data)?;
    f.sync_all()
}

/// Tracks when each instance was last backed up.
#[derive(Debug, Default, Clone)]
pub struct BackupSchedule {
    last: BTreeMap<InstanceId, SimTime>,
}

impl BackupSchedule {
    /// Whether an instance created at `created_at` is due for a backup.
    pub fn is_due(&self, id: &InstanceId, created_at: SimTime, now: SimTime, interval: SimTime) -> bool {
        let since = self.last.get(id).copied().unwrap_or(created_at);
        now.saturating_sub(since) >= interval
    }

    pub fn mark(&mut self, id: &InstanceId, now: SimTime) {
        self.last.insert(id.clone(), now);
    }

    pub fn forget(&mut self, id: &InstanceId) {
        self.last.remove(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(instance: &str, created: u64) -> ArchiveManifest {
        ArchiveManifest {
            function_id: FunctionId::new("f"),
            instance_id: InstanceId::new(instance),
            image_digest: "sha256:img".into(),
            wake_rules: vec![],
            block: None,
            created_at: SimTime::from_secs(created),
            origin_node: NodeId::new("A"),
            format_version: MANIFEST_FORMAT_VERSION,
            digest_algorithm: DIGEST_ALGORITHM.into(),
        }
    }

    #[test]
    fn identical_content_is_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let a = store.write_archive(&manifest("i1", 1), b"blob").unwrap();
        let b = store.write_archive(&manifest("i1", 1), b"blob").unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read_dir(dir.path().join("archives")).unwrap().count(), 1);
        let c = store.write_archive(&manifest("i1", 1), b"blob!").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn read_returns_what_was_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let m = manifest("i1", 1);
        let id = store.write_archive(&m, b"state").unwrap();
        let got = store.read_archive(&id).unwrap();
        assert_eq!(got.manifest, m);
        assert_eq!(got.state_blob, b"state");
        assert_eq!(id.as_str(), hex::encode(got.checksum));
    }

    #[test]
    fn unknown_id_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        let id = ArchiveId::new("0".repeat(64));
        assert!(matches!(store.read_archive(&id), Err(StoreError::NotFound(_))));
        assert!(matches!(store.read_archive(&ArchiveId::new("../etc")), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn corrupted_byte_is_detected_and_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let id = store.write_archive(&manifest("i1", 1), b"some state bytes").unwrap();
        let path = store.archive_dir(&id).join(STATE_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x20;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.read_archive(&id), Err(StoreError::ChecksumMismatch(_))));
        assert!(!store.contains(&id));
        assert!(matches!(store.read_archive(&id), Err(StoreError::NotFound(_))));
        assert_eq!(fs::read_dir(dir.path().join("quarantine")).unwrap().count(), 1);
    }

    #[test]
    fn manifest_is_canonical_json() {
        let text = String::from_utf8(manifest("i1", 1).canonical_bytes()).unwrap();
        assert!(!text.contains(' ') && !text.contains('\n'));
        let keys: Vec<_> =
            serde_json::from_str::<serde_json::Value>(&text).unwrap().as_object().unwrap().keys().cloned().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.starts_with("{\"block\":null,\"created_at\":1,\"digest_algorithm\":\"sha256\""));
    }

    #[test]
    fn reopen_reindexes_existing_archives() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut store = CheckpointStore::open(dir.path()).unwrap();
            store.write_archive(&manifest("i1", 1), b"persisted").unwrap()
        };
        fs::create_dir_all(dir.path().join("tmp/half-written")).unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        assert!(store.contains(&id));
        assert_eq!(store.read_archive(&id).unwrap().state_blob, b"persisted");
        assert_eq!(fs::read_dir(dir.path().join("tmp")).unwrap().count(), 0);
    }

    #[test]
    fn capacity_limit_reports_storage_full() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap().with_capacity(64);
        assert!(matches!(store.write_archive(&manifest("i1", 1), &[0u8; 100]), Err(StoreError::StorageFull { .. })));
        assert!(matches!(store.write_archive(&manifest("i1", 1), &[]), Err(StoreError::EmptyBlob)));
    }

    #[test]
    fn gc_keeps_latest_and_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let ids: Vec<_> = (1..=3).map(|t| store.write_archive(&manifest("i1", t), b"x").unwrap()).collect();
        let other = store.write_archive(&manifest("i2", 1), b"y").unwrap();

        let pinned = BTreeSet::from([ids[0].clone()]);
        assert_eq!(store.gc(1, &pinned).unwrap(), 1);
        assert!(store.contains(&ids[0]) && !store.contains(&ids[1]) && store.contains(&ids[2]));
        assert!(store.contains(&other));
        assert_eq!(store.gc(1, &pinned).unwrap(), 0);
        assert!(matches!(store.gc(0, &pinned), Err(StoreError::InvalidRetain)));
    }

    #[test]
    fn gc_without_pins_removes_older_backups() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        for t in 1..=3 {
            store.write_archive(&manifest("i1", t), b"x").unwrap();
        }
        assert_eq!(store.gc(1, &BTreeSet::new()).unwrap(), 2);
        assert_eq!(store.gc(1, &BTreeSet::new()).unwrap(), 0);
    }

    #[test]
    fn backup_schedule_rate_limits() {
        let mut s = BackupSchedule::default();
        let id = InstanceId::new("i1");
        let interval = SimTime::from_secs(10);
        assert!(!s.is_due(&id, SimTime::ZERO, SimTime::from_secs(5), interval));
        assert!(s.is_due(&id, SimTime::ZERO, SimTime::from_secs(10), interval));
        s.mark(&id, SimTime::from_secs(10));
        assert!(!s.is_due(&id, SimTime::ZERO, SimTime::from_secs(15), interval));
    }
}
