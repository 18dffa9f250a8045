//! Embedded segment-file store for data units.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/manifest.json   configuration, written once at create
//! <dir>/LOCK            held exclusively while a handle is open
//! <dir>/segments/       seg-<n>.dat record files
//! <dir>/actions.log     action history
//! <dir>/denied.log      refused attempts, JSON lines
//! <dir>/escrow.bin      keys of reversibly inaccessible units
//! ```
//!
//! Profiles add `metadata.dat` (metadata join), `query.csv` or `query.log`,
//! and `policy.log`.
//!
//! The in-memory index is rebuilt from the segments on open. Every mutation
//! takes the write lock, so an erase and its cascade are never observed half
//! done.

mod config;
mod escrow;
pub mod segment;
mod sidecar;
pub mod transform;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::RwLock;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{AccessControl, Logging, StoreConfig};
pub use escrow::EscrowEntry;

use crate::checker::{Snapshot, UnitView};
use crate::error::{Error, Result};
use crate::ledger::{DeniedEvent, DeniedLog, Ledger};
use crate::model::{
    derive_unit, policy_active, state_digest, ActionKind, ActionRecord, Category, DataUnit, EntityId,
    ErasureMode, PolicyTuple, ProvenanceGraph, Purpose, RedactionReason, Timestamp, UnitId, Version,
};
use escrow::Escrow;
use segment::{
    decode_meta, decode_personal, encode_meta, encode_personal, frame_record, parse_segment_id, Personal,
    Segment, SlotInfo, UnitMeta, FLAG_AT_REST, FLAG_DEAD, FLAG_ERASED, FLAG_ESCROWED, SEGMENT_HEADER_LEN,
};
use sidecar::{MetadataTable, PolicyLog, QueryEvent, QueryLog};
use transform::{derive_key, keystream_xor, sanitize_range, Key};

const MANIFEST_FORMAT: u32 = 1;
/// Purpose recorded on the action that lifts reversible inaccessibility.
pub const ACCESS_RESTORE: &str = "access-restore";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureStatus {
    Live,
    ReversiblyInaccessible,
    Deleted,
    StrongDeleted,
    PermanentlyDeleted,
}

impl ErasureStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ErasureStatus::Live => "live",
            ErasureStatus::ReversiblyInaccessible => "reversibly_inaccessible",
            ErasureStatus::Deleted => "deleted",
            ErasureStatus::StrongDeleted => "strong_deleted",
            ErasureStatus::PermanentlyDeleted => "permanently_deleted",
        }
    }

    /// Status reached by completing an erase in `mode`.
    pub fn after(mode: ErasureMode) -> Self {
        match mode {
            ErasureMode::ReversiblyInaccessible => ErasureStatus::ReversiblyInaccessible,
            ErasureMode::Delete => ErasureStatus::Deleted,
            ErasureMode::StrongDelete => ErasureStatus::StrongDeleted,
            ErasureMode::PermanentDelete => ErasureStatus::PermanentlyDeleted,
        }
    }

    pub fn is_live(self) -> bool {
        self == ErasureStatus::Live
    }

    /// Value bytes are gone for good.
    pub fn is_deleted(self) -> bool {
        self >= ErasureStatus::Deleted
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ErasureStatus::Live,
            1 => ErasureStatus::ReversiblyInaccessible,
            2 => ErasureStatus::Deleted,
            3 => ErasureStatus::StrongDeleted,
            4 => ErasureStatus::PermanentlyDeleted,
            _ => return None,
        })
    }
}

impl fmt::Display for ErasureStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyChange {
    Add(PolicyTuple),
    Remove(PolicyTuple),
    Replace { old: PolicyTuple, new: PolicyTuple },
}

/// Arguments of a derivation `id = function(inputs)`.
#[derive(Debug, Clone)]
pub struct Derivation {
    pub id: UnitId,
    pub inputs: Vec<UnitId>,
    pub function: String,
    pub value: Vec<u8>,
    pub invertible: bool,
    pub subjects_identifiable: bool,
}

impl Derivation {
    pub fn new(id: UnitId, inputs: Vec<UnitId>, function: impl Into<String>, value: Vec<u8>) -> Self {
        Derivation {
            id,
            inputs,
            function: function.into(),
            value,
            invertible: false,
            subjects_identifiable: true,
        }
    }

    pub fn invertible(mut self, yes: bool) -> Self {
        self.invertible = yes;
        self
    }

    pub fn subjects_identifiable(mut self, yes: bool) -> Self {
        self.subjects_identifiable = yes;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErasureReport {
    pub unit_id: UnitId,
    pub mode: ErasureMode,
    pub status: ErasureStatus,
    /// Derived units erased along with the target, in erase order.
    pub cascaded: Vec<UnitId>,
    pub bytes_zeroed: u64,
    pub records_redacted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompactLevel {
    /// Rewrites only segments holding reclaimable bytes, one at a time.
    Incremental,
    /// Rewrites every segment into fresh files.
    Full,
}

impl FromStr for CompactLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(CompactLevel::Incremental),
            "full" => Ok(CompactLevel::Full),
            _ => Err(Error::Config(format!("unknown compaction level `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CopyLocation {
    SegmentSlot {
        segment: u32,
        offset: u64,
        len: u32,
        escrowed: bool,
    },
    IndexEntry {
        escrowed: bool,
    },
    CacheEntry,
}

/// Every engine-internal location holding recoverable value bytes of a
/// unit. Ledger records carry digests, never values, so they do not appear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CopySet {
    pub unit_id: UnitId,
    pub locations: Vec<CopyLocation>,
}

impl CopySet {
    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceUsage {
    /// Every file in the store directory.
    pub total_bytes: u64,
    /// Value bytes of live units, all versions.
    pub personal_bytes: u64,
}

impl SpaceUsage {
    /// Total over personal bytes; 1.0 when there is no personal data.
    pub fn factor(&self) -> f64 {
        if self.personal_bytes == 0 {
            1.0
        } else {
            self.total_bytes as f64 / self.personal_bytes as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: StoreConfig,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    info: SlotInfo,
    flags: u8,
}

#[derive(Debug)]
struct UnitEntry {
    meta: UnitMeta,
    status: ErasureStatus,
    /// Oldest first; the last slot is current.
    slots: Vec<Slot>,
    /// Decoded personal section; present only while live.
    cache: Option<Personal>,
}

impl UnitEntry {
    fn current(&self) -> &Slot {
        self.slots.last().expect("unit without a slot")
    }

    fn data_unit(&self, id: &UnitId) -> Option<DataUnit> {
        let p = self.cache.as_ref()?;
        Some(DataUnit {
            id: id.clone(),
            category: self.meta.category,
            subjects: p.subjects.clone(),
            origins: p.origins.clone(),
            values: p.values.clone(),
            policies: self.meta.policies.clone(),
        })
    }
}

fn value_at(values: &[Version], t: Timestamp) -> Option<&[u8]> {
    values.iter().rev().find(|v| v.time <= t).map(|v| v.value.as_slice())
}

fn grants_any<'a>(
    policies: impl IntoIterator<Item = &'a PolicyTuple>,
    purpose: &Purpose,
    entity: &EntityId,
    t: Timestamp,
) -> bool {
    policies
        .into_iter()
        .any(|p| policy_active(p, t) && p.grants(purpose, entity))
}

fn unit_target(unit: &UnitId) -> String {
    format!("unit_id = '{unit}'")
}

/// Segment files plus the keys needed to encode slots.
#[derive(Debug)]
struct Segments {
    dir: PathBuf,
    map: BTreeMap<u32, Segment>,
    active: u32,
    next_seq: u64,
    max_bytes: u64,
    at_rest: Option<Key>,
}

impl Segments {
    fn seg(&self, id: u32) -> &Segment {
        &self.map[&id]
    }

    fn roll(&mut self) -> Result<()> {
        let id = self.map.keys().next_back().map_or(0, |k| k + 1);
        self.map.insert(id, Segment::create(&self.dir, id)?);
        self.active = id;
        Ok(())
    }

    fn append(&mut self, unit: &UnitId, meta: &UnitMeta, personal: &Personal, status: ErasureStatus) -> Result<Slot> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let mut bytes = encode_personal(personal);
        let mut flags = 0;
        if let Some(key) = &self.at_rest {
            keystream_xor(key, seq, &mut bytes);
            flags |= FLAG_AT_REST;
        }
        let (frame, personal_off) = frame_record(flags, status.tag(), seq, unit, &encode_meta(meta), &bytes);
        let active_len = self.seg(self.active).len;
        if active_len > SEGMENT_HEADER_LEN && active_len + frame.len() as u64 > self.max_bytes {
            self.roll()?;
        }
        let seg = self.map.get_mut(&self.active).unwrap();
        let offset = seg.append(&frame)?;
        Ok(Slot {
            info: SlotInfo {
                segment: seg.id,
                offset,
                frame_len: frame.len() as u32,
                personal_off,
                personal_len: bytes.len() as u32,
                seq,
            },
            flags,
        })
    }

    fn write_flags(&self, slot: &Slot) -> Result<()> {
        self.seg(slot.info.segment)
            .file
            .write_all_at(&[slot.flags], slot.info.flags_offset())?;
        Ok(())
    }

    fn write_status(&self, slot: &Slot, status: ErasureStatus) -> Result<()> {
        self.seg(slot.info.segment)
            .file
            .write_all_at(&[status.tag()], slot.info.flags_offset() + 1)?;
        Ok(())
    }

    fn mark_dead(&mut self, slot: &mut Slot) -> Result<()> {
        if slot.flags & FLAG_DEAD != 0 {
            return Ok(());
        }
        slot.flags |= FLAG_DEAD;
        self.write_flags(slot)?;
        // An erased slot already counted its personal bytes.
        let reclaim = if slot.flags & FLAG_ERASED != 0 {
            slot.info.frame_len - slot.info.personal_len
        } else {
            slot.info.frame_len
        };
        self.map.get_mut(&slot.info.segment).unwrap().dead += reclaim as u64;
        Ok(())
    }

    fn read_personal(&self, slot: &Slot) -> Result<Vec<u8>> {
        let (off, len) = slot.info.personal_range();
        let mut buf = vec![0u8; len];
        self.seg(slot.info.segment).file.read_exact_at(&mut buf, off)?;
        Ok(buf)
    }

    /// Overwrites the personal bytes and refreshes the frame checksum.
    fn write_personal(&self, slot: &Slot, bytes: &[u8]) -> Result<()> {
        let file = &self.seg(slot.info.segment).file;
        file.write_all_at(bytes, slot.info.personal_range().0)?;
        self.refresh_crc(slot)
    }

    fn refresh_crc(&self, slot: &Slot) -> Result<()> {
        let file = &self.seg(slot.info.segment).file;
        let (off, len) = slot.info.body_range();
        let mut body = vec![0u8; len];
        file.read_exact_at(&mut body, off)?;
        file.write_all_at(&crc32fast::hash(&body).to_le_bytes(), slot.info.crc_offset())?;
        Ok(())
    }

    fn decode(&self, slot: &Slot, escrow: Option<&Key>) -> Result<Personal> {
        let mut bytes = self.read_personal(slot)?;
        if slot.flags & FLAG_ESCROWED != 0 {
            let key = escrow.ok_or_else(|| Error::Corrupt {
                file: "escrow.bin".into(),
                reason: "escrowed slot without a key".into(),
            })?;
            keystream_xor(key, slot.info.seq, &mut bytes);
        }
        if slot.flags & FLAG_AT_REST != 0 {
            if let Some(key) = &self.at_rest {
                keystream_xor(key, slot.info.seq, &mut bytes);
            }
        }
        decode_personal(&bytes).ok_or_else(|| Error::Corrupt {
            file: self.seg(slot.info.segment).path.display().to_string(),
            reason: format!("undecodable personal section at offset {}", slot.info.offset),
        })
    }

    fn total_len(&self) -> u64 {
        self.map.values().map(|s| s.len).sum()
    }

    /// Moves the survivors of `victims` into the active segment and deletes
    /// the victims. Superseded slots are dropped; an erased current slot is
    /// kept without its personal section so its status and metadata remain.
    fn rewrite(&mut self, units: &mut BTreeMap<UnitId, UnitEntry>, victims: &BTreeSet<u32>) -> Result<()> {
        if victims.contains(&self.active) {
            self.roll()?;
        }
        let mut sources: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
        // Frames bound for the active segment, written in one go per segment.
        let mut pending: Vec<u8> = Vec::new();
        for entry in units.values_mut() {
            if !entry.slots.iter().any(|s| victims.contains(&s.info.segment)) {
                continue;
            }
            let last = entry.slots.len() - 1;
            let mut kept = Vec::with_capacity(entry.slots.len());
            for (i, slot) in entry.slots.iter().enumerate() {
                if !victims.contains(&slot.info.segment) {
                    kept.push(*slot);
                    continue;
                }
                if i != last {
                    continue;
                }
                let src = match sources.entry(slot.info.segment) {
                    std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(fs::read(&self.map[&slot.info.segment].path)?)
                    }
                };
                let range = slot.info.offset as usize..(slot.info.offset + u64::from(slot.info.frame_len)) as usize;
                let mut frame = src.get(range).map(<[u8]>::to_vec).ok_or_else(|| Error::Corrupt {
                    file: self.map[&slot.info.segment].path.display().to_string(),
                    reason: "slot past end of segment".into(),
                })?;
                let mut info = slot.info;
                if slot.flags & FLAG_ERASED != 0 && slot.info.personal_len > 0 {
                    let (body_off, body_len) = slot.info.body_range();
                    let start = (body_off - slot.info.offset) as usize;
                    let body = &frame[start..start + body_len];
                    let mut r = crate::codec::Reader::new(body);
                    let parsed = (|| Some((r.u64()?, r.str16()?, r.blob32()?.to_vec())))();
                    let (seq, unit, meta) = parsed.ok_or_else(|| Error::Corrupt {
                        file: self.seg(slot.info.segment).path.display().to_string(),
                        reason: "unparseable frame during compaction".into(),
                    })?;
                    let unit = UnitId::new(unit)?;
                    let (residue, personal_off) = frame_record(slot.flags, frame[5], seq, &unit, &meta, &[]);
                    info.personal_off = personal_off;
                    info.personal_len = 0;
                    frame = residue;
                }
                let active_len = self.seg(self.active).len + pending.len() as u64;
                if active_len > SEGMENT_HEADER_LEN && active_len + frame.len() as u64 > self.max_bytes {
                    self.map.get_mut(&self.active).unwrap().append(&pending)?;
                    pending.clear();
                    self.roll()?;
                }
                let seg = &self.map[&self.active];
                info.offset = seg.len + pending.len() as u64;
                info.segment = seg.id;
                info.frame_len = frame.len() as u32;
                pending.extend_from_slice(&frame);
                kept.push(Slot { info, flags: slot.flags });
            }
            entry.slots = kept;
        }
        if !pending.is_empty() {
            self.map.get_mut(&self.active).unwrap().append(&pending)?;
        }
        for id in victims {
            if let Some(seg) = self.map.remove(id) {
                drop(seg.file);
                fs::remove_file(&seg.path)?;
            }
        }
        for seg in self.map.values() {
            seg.file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Inner {
    config: StoreConfig,
    segs: Segments,
    units: BTreeMap<UnitId, UnitEntry>,
    graph: ProvenanceGraph,
    ledger: Ledger,
    denied: DeniedLog,
    escrow: Escrow,
    metadata: Option<MetadataTable>,
    query_log: Option<QueryLog>,
    policy_log: Option<PolicyLog>,
}

/// A store handle. Cheap to share across threads behind an `Arc`.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    inner: RwLock<Inner>,
    _lock: File,
}

fn acquire_lock(dir: &Path) -> Result<File> {
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(dir.join("LOCK"))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(Error::Locked(dir.to_owned())),
        Err(TryLockError::Error(e)) => Err(e.into()),
    }
}

impl Store {
    /// Creates a store in `dir`, which must be absent or empty.
    pub fn create(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::DirectoryNotEmpty(dir.to_owned()));
        }
        fs::create_dir_all(dir.join("segments"))?;
        let lock = acquire_lock(dir)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT,
            config,
        };
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        fs::write(dir.join("manifest.json"), text)?;
        Self::load(dir, manifest.config, lock)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::Config(format!("{} is not a store: manifest.json missing", dir.display())));
        }
        let lock = acquire_lock(dir)?;
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Corrupt {
                file: manifest_path.display().to_string(),
                reason: format!("unsupported manifest format {}", manifest.format),
            });
        }
        Self::load(dir, manifest.config, lock)
    }

    fn load(dir: &Path, config: StoreConfig, lock: File) -> Result<Self> {
        let seg_dir = dir.join("segments");
        let mut ids: Vec<u32> = fs::read_dir(&seg_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| parse_segment_id(e.file_name().to_str()?))
            .collect();
        ids.sort_unstable();

        let mut segs = Segments {
            dir: seg_dir,
            map: BTreeMap::new(),
            active: 0,
            next_seq: 0,
            max_bytes: config.segment_max_bytes,
            at_rest: config
                .encrypted_at_rest
                .then(|| derive_key(config.seed, "at-rest")),
        };
        let mut scanned = Vec::new();
        for id in ids {
            let (seg, records) = Segment::open(&segment::segment_path(&segs.dir, id), id)?;
            segs.map.insert(id, seg);
            scanned.extend(records);
        }
        match segs.map.keys().next_back() {
            Some(&last) => segs.active = last,
            None => segs.roll()?,
        }
        scanned.sort_by_key(|r| r.slot.seq);
        segs.next_seq = scanned.last().map_or(0, |r| r.slot.seq + 1);

        let escrow = Escrow::open(&dir.join("escrow.bin"))?;
        let mut units: BTreeMap<UnitId, UnitEntry> = BTreeMap::new();
        let mut graph = ProvenanceGraph::new();
        let mut by_unit: BTreeMap<UnitId, Vec<segment::ScannedRecord>> = BTreeMap::new();
        for rec in scanned {
            by_unit.entry(rec.unit.clone()).or_default().push(rec);
        }
        for (id, records) in by_unit {
            let current = records.last().unwrap();
            let meta = decode_meta(&id, &current.meta).ok_or_else(|| Error::Corrupt {
                file: segment::segment_path(&segs.dir, current.slot.segment).display().to_string(),
                reason: format!("undecodable metadata for {id}"),
            })?;
            let status = ErasureStatus::from_tag(current.status).ok_or_else(|| Error::Corrupt {
                file: segment::segment_path(&segs.dir, current.slot.segment).display().to_string(),
                reason: format!("bad status byte for {id}"),
            })?;
            let last = records.len() - 1;
            let mut slots = Vec::with_capacity(records.len());
            for (i, rec) in records.iter().enumerate() {
                let mut slot = Slot {
                    info: rec.slot,
                    flags: rec.flags,
                };
                if i == last {
                    if slot.flags & FLAG_ERASED != 0 {
                        segs.map.get_mut(&slot.info.segment).unwrap().dead += slot.info.personal_len as u64;
                    }
                } else if slot.flags & FLAG_DEAD != 0 {
                    segs.map.get_mut(&slot.info.segment).unwrap().dead += slot.info.frame_len as u64;
                } else {
                    // Superseded but the flag write never happened.
                    segs.mark_dead(&mut slot)?;
                }
                slots.push(slot);
            }
            if let Some(edge) = &meta.edge {
                graph.insert(edge.clone())?;
            }
            let mut entry = UnitEntry {
                meta,
                status,
                slots,
                cache: None,
            };
            if status.is_live() {
                entry.cache = Some(segs.decode(entry.current(), None)?);
            }
            units.insert(id, entry);
        }

        let metadata = if config.access_control.joins_metadata() {
            let mut table = MetadataTable::open(&dir.join("metadata.dat"))?;
            for (id, entry) in &units {
                if !table.contains(id) {
                    table.write(id, &entry.meta.policies)?;
                }
            }
            Some(table)
        } else {
            None
        };
        let query_log = match config.logging {
            Logging::None => None,
            Logging::RowLevelCsv => Some(QueryLog::open_csv(&dir.join("query.csv"))?),
            Logging::FullQuery | Logging::FullQueryPlusPolicyLog => Some(QueryLog::open_json(&dir.join("query.log"))?),
        };
        let policy_log = match config.logging {
            Logging::FullQueryPlusPolicyLog => Some(PolicyLog::open(&dir.join("policy.log"))?),
            _ => None,
        };

        let inner = Inner {
            segs,
            units,
            graph,
            ledger: Ledger::open(&dir.join("actions.log"))?,
            denied: DeniedLog::open(&dir.join("denied.log"))?,
            escrow,
            metadata,
            query_log,
            policy_log,
            config,
        };
        Ok(Store {
            dir: dir.to_owned(),
            inner: RwLock::new(inner),
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> StoreConfig {
        self.inner.read().config.clone()
    }

    /// Stores a new base or metadata unit. Derived units go through
    /// [`Store::derive`].
    pub fn put(&self, unit: DataUnit, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<UnitId> {
        self.inner.write().put(unit, entity, purpose, t)
    }

    pub fn get(&self, unit: &UnitId, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<Vec<u8>> {
        self.inner.write().get(unit, entity, purpose, t)
    }

    /// Reads every live unit holding an active policy for `(purpose,
    /// entity)`, sorted by id. Each returned unit is recorded as a read.
    pub fn read_by_metadata(
        &self,
        purpose: &Purpose,
        entity: &EntityId,
        t: Timestamp,
    ) -> Result<Vec<(UnitId, Vec<u8>)>> {
        self.inner.write().read_by_metadata(purpose, entity, t)
    }

    /// Appends a version; returns the new version count.
    pub fn update_value(
        &self,
        unit: &UnitId,
        value: Vec<u8>,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<usize> {
        self.inner.write().update_value(unit, value, entity, purpose, t)
    }

    /// Applies a policy change; returns the resulting policy count.
    pub fn update_policies(
        &self,
        unit: &UnitId,
        change: PolicyChange,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<usize> {
        self.inner.write().update_policies(unit, change, entity, purpose, t)
    }

    pub fn derive(&self, d: Derivation, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<UnitId> {
        self.inner.write().derive(d, entity, purpose, t)
    }

    pub fn make_inaccessible(&self, unit: &UnitId, entity: &EntityId, t: Timestamp) -> Result<ErasureStatus> {
        self.inner.write().make_inaccessible(unit, entity, t)
    }

    pub fn restore_access(&self, unit: &UnitId, entity: &EntityId, t: Timestamp) -> Result<ErasureStatus> {
        self.inner.write().restore_access(unit, entity, t)
    }

    pub fn erase(&self, unit: &UnitId, mode: ErasureMode, entity: &EntityId, t: Timestamp) -> Result<ErasureReport> {
        self.inner.write().erase(unit, mode, entity, t)
    }

    /// Returns the number of bytes reclaimed.
    pub fn compact(&self, level: CompactLevel) -> Result<u64> {
        let mut inner = self.inner.write();
        let victims: BTreeSet<u32> = match level {
            CompactLevel::Full => {
                if inner.segs.map.values().all(|s| s.dead == 0) {
                    return Ok(0);
                }
                inner.segs.map.keys().copied().collect()
            }
            CompactLevel::Incremental => inner
                .segs
                .map
                .values()
                .filter(|s| s.dead > 0)
                .map(|s| s.id)
                .collect(),
        };
        let before = inner.segs.total_len();
        let Inner { segs, units, .. } = &mut *inner;
        match level {
            CompactLevel::Full => segs.rewrite(units, &victims)?,
            CompactLevel::Incremental => {
                for id in victims {
                    segs.rewrite(units, &BTreeSet::from([id]))?;
                }
            }
        }
        Ok(before.saturating_sub(segs.total_len()))
    }

    /// Incremental compaction restricted to sealed segments whose
    /// reclaimable share is at least `min_dead_ratio`.
    pub fn autovacuum(&self, min_dead_ratio: f64) -> Result<u64> {
        let mut inner = self.inner.write();
        let active = inner.segs.active;
        let victims: Vec<u32> = inner
            .segs
            .map
            .values()
            .filter(|s| s.id != active && s.dead > 0 && s.dead as f64 >= min_dead_ratio * s.len as f64)
            .map(|s| s.id)
            .collect();
        let before = inner.segs.total_len();
        let Inner { segs, units, .. } = &mut *inner;
        for id in victims {
            segs.rewrite(units, &BTreeSet::from([id]))?;
        }
        Ok(before.saturating_sub(segs.total_len()))
    }

    pub fn copies_of(&self, unit: &UnitId) -> CopySet {
        let inner = self.inner.read();
        let mut locations = Vec::new();
        if let Some(entry) = inner.units.get(unit) {
            if !entry.status.is_deleted() {
                let escrowed = entry.status == ErasureStatus::ReversiblyInaccessible;
                for s in &entry.slots {
                    if s.info.personal_len > 0 && s.flags & FLAG_ERASED == 0 {
                        locations.push(CopyLocation::SegmentSlot {
                            segment: s.info.segment,
                            offset: s.info.offset,
                            len: s.info.frame_len,
                            escrowed,
                        });
                    }
                }
                locations.push(CopyLocation::IndexEntry { escrowed });
                if entry.cache.is_some() {
                    locations.push(CopyLocation::CacheEntry);
                }
            }
        }
        CopySet {
            unit_id: unit.clone(),
            locations,
        }
    }

    pub fn status_of(&self, unit: &UnitId) -> Result<ErasureStatus> {
        self.inner
            .read()
            .units
            .get(unit)
            .map(|e| e.status)
            .ok_or_else(|| Error::UnknownUnit(unit.clone()))
    }

    pub fn contains(&self, unit: &UnitId) -> bool {
        self.inner.read().units.contains_key(unit)
    }

    pub fn unit_ids(&self) -> Vec<UnitId> {
        self.inner.read().units.keys().cloned().collect()
    }

    pub fn live_units(&self) -> Vec<UnitId> {
        self.inner
            .read()
            .units
            .iter()
            .filter(|(_, e)| e.status.is_live())
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn policies_of(&self, unit: &UnitId) -> Result<BTreeSet<PolicyTuple>> {
        self.inner
            .read()
            .units
            .get(unit)
            .map(|e| e.meta.policies.clone())
            .ok_or_else(|| Error::UnknownUnit(unit.clone()))
    }

    pub fn has_escrow(&self, unit: &UnitId) -> bool {
        self.inner.read().escrow.contains(unit)
    }

    pub fn history_of(&self, unit: &UnitId) -> Vec<ActionRecord> {
        self.inner.read().ledger.history_of(unit)
    }

    pub fn ledger_records(&self) -> Vec<ActionRecord> {
        self.inner.read().ledger.records().to_vec()
    }

    pub fn ledger_len(&self) -> usize {
        self.inner.read().ledger.len()
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.inner.read().ledger.last_time()
    }

    pub fn denied_count(&self) -> u64 {
        self.inner.read().denied.count()
    }

    pub fn export_ledger(&self, out: &mut impl Write) -> Result<()> {
        self.inner.read().ledger.export_ndjson(out)
    }

    pub fn graph(&self) -> ProvenanceGraph {
        self.inner.read().graph.clone()
    }

    /// Read-only view consumed by the invariant checker.
    pub fn snapshot(&self) -> Snapshot {
        let inner = self.inner.read();
        Snapshot {
            units: inner
                .units
                .iter()
                .map(|(id, e)| {
                    (
                        id.clone(),
                        UnitView {
                            category: e.meta.category,
                            policies: e.meta.policies.clone(),
                            status: e.status,
                            escrowed: inner.escrow.contains(id),
                        },
                    )
                })
                .collect(),
            edges: inner.graph.edges().cloned().collect(),
            records: inner.ledger.records().to_vec(),
            purpose_map: inner.config.purpose_map.clone(),
            exempt_metadata: inner.config.exempt_metadata_units,
        }
    }

    pub fn space_usage(&self) -> Result<SpaceUsage> {
        let personal_bytes = self
            .inner
            .read()
            .units
            .values()
            .filter_map(|e| e.cache.as_ref())
            .map(Personal::value_bytes)
            .sum();
        Ok(SpaceUsage {
            total_bytes: dir_size(&self.dir)?,
            personal_bytes,
        })
    }

    /// Flushes every file the store writes to stable storage.
    pub fn sync(&self) -> Result<()> {
        let inner = self.inner.read();
        inner.ledger.sync()?;
        for seg in inner.segs.map.values() {
            seg.file.sync_data()?;
        }
        Ok(())
    }

    /// Appends a read record without enforcement and returns the value if
    /// one is still readable. Exists to fabricate erasure-inconsistent reads
    /// in tests.
    #[doc(hidden)]
    pub fn force_read_unchecked(
        &self,
        unit: &UnitId,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<Option<Vec<u8>>> {
        let mut inner = self.inner.write();
        inner.check_time(t)?;
        let entry = inner.units.get(unit).ok_or_else(|| Error::UnknownUnit(unit.clone()))?;
        let value = entry
            .cache
            .as_ref()
            .and_then(|p| value_at(&p.values, t))
            .map(<[u8]>::to_vec);
        let digest = state_digest([value.as_deref().unwrap_or_default()]);
        inner.ledger.append(
            ActionRecord::new(unit.clone(), purpose.clone(), entity.clone(), ActionKind::Read, t).with_digest(digest),
        )?;
        Ok(value)
    }
}

fn dir_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        if meta.is_dir() {
            total += dir_size(&entry.path())?;
        } else {
            total += meta.len();
        }
    }
    Ok(total)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel != "LOCK" {
                out.push((rel, path));
            }
        }
    }
    Ok(())
}

/// Hex SHA-256 over every file of a store directory (except the lock file),
/// in path order.
pub fn content_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl Inner {
    fn check_time(&self, t: Timestamp) -> Result<()> {
        match self.ledger.last_time() {
            Some(last) if t < last => Err(Error::TimeRegression { last, got: t }),
            _ => Ok(()),
        }
    }

    fn entry(&self, unit: &UnitId) -> Result<&UnitEntry> {
        self.units.get(unit).ok_or_else(|| Error::UnknownUnit(unit.clone()))
    }

    fn require_live(&self, unit: &UnitId) -> Result<&UnitEntry> {
        let entry = self.entry(unit)?;
        if !entry.status.is_live() {
            return Err(Error::Inaccessible {
                unit: unit.clone(),
                status: entry.status,
            });
        }
        Ok(entry)
    }

    fn by_purpose_map(&self, purpose: &Purpose, action: ActionKind) -> bool {
        self.config
            .purpose_map
            .as_ref()
            .is_none_or(|m| m.authorizes(purpose, action))
    }

    fn joined_policies(&self, unit: &UnitId) -> Result<Vec<PolicyTuple>> {
        let table = self.metadata.as_ref().expect("metadata join without a table");
        table.read(unit)?.ok_or_else(|| Error::Corrupt {
            file: "metadata.dat".into(),
            reason: format!("no metadata row for {unit}"),
        })
    }

    /// Decides an access against `policies`, which for stored units come
    /// from wherever the access-control mode keeps them.
    fn decide(
        &mut self,
        unit: &UnitId,
        category: Category,
        policies: &[PolicyTuple],
        entity: &EntityId,
        purpose: &Purpose,
        action: ActionKind,
        t: Timestamp,
    ) -> Result<bool> {
        if category == Category::Metadata && self.config.exempt_metadata_units {
            return Ok(true);
        }
        let allowed = self.by_purpose_map(purpose, action) && grants_any(policies, purpose, entity, t);
        if let Some(log) = &mut self.policy_log {
            log.log(t, unit, entity, purpose, &action.to_string(), policies, allowed)?;
        }
        Ok(allowed)
    }

    fn authorize(
        &mut self,
        unit: &UnitId,
        entity: &EntityId,
        purpose: &Purpose,
        action: ActionKind,
        t: Timestamp,
    ) -> Result<bool> {
        let entry = self.entry(unit)?;
        let category = entry.meta.category;
        if self.config.access_control == AccessControl::RoleBased {
            if category == Category::Metadata && self.config.exempt_metadata_units {
                return Ok(true);
            }
            return Ok(self.by_purpose_map(purpose, action) && grants_any(&entry.meta.policies, purpose, entity, t));
        }
        let policies = self.joined_policies(unit)?;
        self.decide(unit, category, &policies, entity, purpose, action, t)
    }

    fn log_query(
        &mut self,
        t: Timestamp,
        entity: &EntityId,
        purpose: &Purpose,
        op: &str,
        target: &str,
        rows: usize,
        digest: &[u8],
        allowed: bool,
    ) -> Result<()> {
        if let Some(log) = &mut self.query_log {
            log.log(&QueryEvent {
                time: t,
                entity,
                purpose,
                op,
                target,
                rows,
                digest,
                allowed,
            })?;
        }
        Ok(())
    }

    fn deny<T>(
        &mut self,
        unit: &UnitId,
        entity: &EntityId,
        purpose: &Purpose,
        action: ActionKind,
        t: Timestamp,
    ) -> Result<T> {
        self.denied.record(&DeniedEvent {
            unit_id: unit.clone(),
            purpose: purpose.clone(),
            entity: entity.clone(),
            action,
            time: t,
            reason: "no active policy grants this purpose and entity".into(),
        })?;
        self.log_query(t, entity, purpose, &action.to_string(), &unit_target(unit), 0, &[], false)?;
        Err(Error::PolicyDenied {
            unit: unit.clone(),
            entity: entity.clone(),
            purpose: purpose.clone(),
            time: t,
        })
    }

    fn record(&mut self, record: ActionRecord) -> Result<u64> {
        self.ledger.append(record)
    }

    fn write_metadata_row(&mut self, unit: &UnitId) -> Result<()> {
        if let Some(table) = &mut self.metadata {
            table.write(unit, &self.units[unit].meta.policies)?;
        }
        Ok(())
    }

    /// Writes a new current slot for a live unit and supersedes the old one.
    fn replace_slot(&mut self, unit: &UnitId, meta: UnitMeta, personal: Personal) -> Result<()> {
        let slot = self.segs.append(unit, &meta, &personal, ErasureStatus::Live)?;
        let entry = self.units.get_mut(unit).unwrap();
        if let Some(prev) = entry.slots.last_mut() {
            self.segs.mark_dead(prev)?;
        }
        entry.slots.push(slot);
        entry.meta = meta;
        entry.cache = Some(personal);
        Ok(())
    }

    fn put(&mut self, unit: DataUnit, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<UnitId> {
        self.check_time(t)?;
        unit.validate()?;
        if unit.category == Category::Derived {
            return Err(Error::InvalidUnit(format!(
                "{} is derived; derived units are created by derivation",
                unit.id
            )));
        }
        if self.units.contains_key(&unit.id) {
            return Err(Error::DuplicateId(unit.id));
        }
        let policies: Vec<PolicyTuple> = unit.policies.iter().cloned().collect();
        if !self.decide(&unit.id, unit.category, &policies, entity, purpose, ActionKind::Create, t)? {
            return self.deny(&unit.id, entity, purpose, ActionKind::Create, t);
        }
        self.insert_unit(unit, None, entity, purpose, t)
    }

    fn insert_unit(
        &mut self,
        unit: DataUnit,
        edge: Option<crate::model::ProvenanceEdge>,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<UnitId> {
        let id = unit.id.clone();
        let meta = UnitMeta {
            category: unit.category,
            policies: unit.policies,
            edge,
        };
        let personal = Personal {
            subjects: unit.subjects,
            origins: unit.origins,
            values: unit.values,
        };
        let digest = state_digest([personal.values.last().map_or(&[][..], |v| &v.value[..])]);
        let slot = self.segs.append(&id, &meta, &personal, ErasureStatus::Live)?;
        self.units.insert(
            id.clone(),
            UnitEntry {
                meta,
                status: ErasureStatus::Live,
                slots: vec![slot],
                cache: Some(personal),
            },
        );
        self.write_metadata_row(&id)?;
        self.record(ActionRecord::new(id.clone(), purpose.clone(), entity.clone(), ActionKind::Create, t).with_digest(digest))?;
        self.log_query(t, entity, purpose, "create", &unit_target(&id), 1, &digest, true)?;
        Ok(id)
    }

    fn get(&mut self, unit: &UnitId, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<Vec<u8>> {
        self.check_time(t)?;
        self.require_live(unit)?;
        if !self.authorize(unit, entity, purpose, ActionKind::Read, t)? {
            return self.deny(unit, entity, purpose, ActionKind::Read, t);
        }
        let cache = self.units[unit].cache.as_ref().expect("live unit without cache");
        let value = value_at(&cache.values, t)
            .ok_or_else(|| Error::NoValue {
                unit: unit.clone(),
                time: t,
            })?
            .to_vec();
        let digest = state_digest([&value[..]]);
        self.record(ActionRecord::new(unit.clone(), purpose.clone(), entity.clone(), ActionKind::Read, t).with_digest(digest))?;
        self.log_query(t, entity, purpose, "read", &unit_target(unit), 1, &digest, true)?;
        Ok(value)
    }

    fn read_by_metadata(
        &mut self,
        purpose: &Purpose,
        entity: &EntityId,
        t: Timestamp,
    ) -> Result<Vec<(UnitId, Vec<u8>)>> {
        self.check_time(t)?;
        let by_map = self.by_purpose_map(purpose, ActionKind::Read);
        let matched: Vec<UnitId> = match self.config.access_control {
            AccessControl::RoleBased => self
                .units
                .iter()
                .filter(|(_, e)| e.status.is_live() && by_map && grants_any(&e.meta.policies, purpose, entity, t))
                .map(|(id, _)| id.clone())
                .collect(),
            AccessControl::MetadataJoin => {
                let rows = self.metadata.as_ref().unwrap().scan()?;
                let mut out: Vec<UnitId> = rows
                    .into_iter()
                    .filter(|(_, policies)| by_map && grants_any(policies, purpose, entity, t))
                    .filter(|(id, _)| self.units.get(id).is_some_and(|e| e.status.is_live()))
                    .map(|(id, _)| id)
                    .collect();
                out.sort();
                out
            }
            AccessControl::FineGrained => {
                let rows = self.metadata.as_ref().unwrap().scan()?;
                let mut out = Vec::new();
                for (id, policies) in rows {
                    if !self.units.get(&id).is_some_and(|e| e.status.is_live()) {
                        continue;
                    }
                    let category = self.units[&id].meta.category;
                    let verdicts: Vec<bool> = policies
                        .iter()
                        .map(|p| policy_active(p, t) && p.grants(purpose, entity))
                        .collect();
                    if verdicts.contains(&true)
                        && self.decide(&id, category, &policies, entity, purpose, ActionKind::Read, t)?
                    {
                        out.push(id);
                    }
                }
                out.sort();
                out
            }
        };
        let mut results = Vec::with_capacity(matched.len());
        let mut h = Sha256::new();
        for id in matched {
            let cache = self.units[&id].cache.as_ref().expect("live unit without cache");
            let Some(value) = value_at(&cache.values, t).map(<[u8]>::to_vec) else {
                continue;
            };
            let digest = state_digest([&value[..]]);
            h.update(digest);
            self.record(ActionRecord::new(id.clone(), purpose.clone(), entity.clone(), ActionKind::Read, t).with_digest(digest))?;
            results.push((id, value));
        }
        let digest = h.finalize();
        let target = format!("purpose = '{purpose}' AND entity = '{entity}' AND now() BETWEEN t_b AND t_f");
        self.log_query(t, entity, purpose, "read-by-metadata", &target, results.len(), &digest[..16], true)?;
        Ok(results)
    }

    fn update_value(
        &mut self,
        unit: &UnitId,
        value: Vec<u8>,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<usize> {
        self.check_time(t)?;
        self.require_live(unit)?;
        if !self.authorize(unit, entity, purpose, ActionKind::UpdateValue, t)? {
            return self.deny(unit, entity, purpose, ActionKind::UpdateValue, t);
        }
        let entry = &self.units[unit];
        let mut personal = entry.cache.clone().expect("live unit without cache");
        if personal.values.last().is_some_and(|v| v.time >= t) {
            return Err(Error::InvalidUnit(format!(
                "value timestamps of {unit} must be strictly increasing"
            )));
        }
        let digest = state_digest([&value[..]]);
        personal.values.push(Version { value, time: t });
        let count = personal.values.len();
        let meta = entry.meta.clone();
        self.replace_slot(unit, meta, personal)?;
        self.record(
            ActionRecord::new(unit.clone(), purpose.clone(), entity.clone(), ActionKind::UpdateValue, t).with_digest(digest),
        )?;
        self.log_query(t, entity, purpose, "update-value", &unit_target(unit), 1, &digest, true)?;
        Ok(count)
    }

    fn update_policies(
        &mut self,
        unit: &UnitId,
        change: PolicyChange,
        entity: &EntityId,
        purpose: &Purpose,
        t: Timestamp,
    ) -> Result<usize> {
        self.check_time(t)?;
        self.require_live(unit)?;
        if !self.authorize(unit, entity, purpose, ActionKind::UpdateMetadata, t)? {
            return self.deny(unit, entity, purpose, ActionKind::UpdateMetadata, t);
        }
        let entry = &self.units[unit];
        let mut meta = entry.meta.clone();
        let missing = |p: &PolicyTuple| Error::InvalidUnit(format!("{unit} has no policy {p:?}"));
        match change {
            PolicyChange::Add(p) => {
                meta.policies.insert(p);
            }
            PolicyChange::Remove(p) => {
                if !meta.policies.remove(&p) {
                    return Err(missing(&p));
                }
            }
            PolicyChange::Replace { old, new } => {
                if !meta.policies.remove(&old) {
                    return Err(missing(&old));
                }
                meta.policies.insert(new);
            }
        }
        let count = meta.policies.len();
        let encoded = encode_meta(&meta);
        let digest = state_digest([&encoded[..]]);
        let personal = entry.cache.clone().expect("live unit without cache");
        self.replace_slot(unit, meta, personal)?;
        self.write_metadata_row(unit)?;
        self.record(
            ActionRecord::new(unit.clone(), purpose.clone(), entity.clone(), ActionKind::UpdateMetadata, t)
                .with_digest(digest),
        )?;
        self.log_query(t, entity, purpose, "update-metadata", &unit_target(unit), 1, &digest, true)?;
        Ok(count)
    }

    fn derive(&mut self, d: Derivation, entity: &EntityId, purpose: &Purpose, t: Timestamp) -> Result<UnitId> {
        self.check_time(t)?;
        if d.inputs.is_empty() {
            return Err(Error::EmptyInputs);
        }
        if self.units.contains_key(&d.id) {
            return Err(Error::DuplicateId(d.id));
        }
        let inputs: BTreeSet<UnitId> = d.inputs.iter().cloned().collect();
        for input in &inputs {
            if !self.entry(input)?.status.is_live() {
                return Err(Error::ErasedInput(input.clone()));
            }
        }
        for input in &inputs {
            if !self.authorize(input, entity, purpose, ActionKind::Read, t)? {
                return self.deny(input, entity, purpose, ActionKind::Read, t);
            }
        }
        let units: Vec<DataUnit> = inputs
            .iter()
            .map(|id| self.units[id].data_unit(id).expect("live unit without cache"))
            .collect();
        let refs: Vec<&DataUnit> = units.iter().collect();
        let (derived, edge) = derive_unit(
            d.id.clone(),
            &refs,
            d.function,
            d.value,
            d.invertible,
            d.subjects_identifiable,
            t,
        )?;
        let policies: Vec<PolicyTuple> = derived.policies.iter().cloned().collect();
        if !self.decide(&d.id, Category::Derived, &policies, entity, purpose, ActionKind::Create, t)? {
            return self.deny(&d.id, entity, purpose, ActionKind::Create, t);
        }
        self.graph.insert(edge.clone())?;
        for unit in &units {
            let digest = state_digest([unit.value_at(t).unwrap_or_default()]);
            self.record(
                ActionRecord::new(unit.id.clone(), purpose.clone(), entity.clone(), ActionKind::Read, t).with_digest(digest),
            )?;
        }
        self.insert_unit(derived, Some(edge), entity, purpose, t)
    }

    fn erase_record(&mut self, unit: &UnitId, mode: ErasureMode, entity: &EntityId, t: Timestamp) -> Result<()> {
        let status = ErasureStatus::after(mode);
        let digest = state_digest([status.as_str().as_bytes()]);
        self.record(
            ActionRecord::new(unit.clone(), Purpose::compliance_erase(), entity.clone(), ActionKind::Erase(mode), t)
                .regulation_required(true)
                .with_digest(digest),
        )?;
        self.log_query(
            t,
            entity,
            &Purpose::compliance_erase(),
            &ActionKind::Erase(mode).to_string(),
            &unit_target(unit),
            1,
            &digest,
            true,
        )
    }

    fn make_inaccessible(&mut self, unit: &UnitId, entity: &EntityId, t: Timestamp) -> Result<ErasureStatus> {
        self.check_time(t)?;
        let entry = self.entry(unit)?;
        if entry.status != ErasureStatus::Live {
            return Err(Error::InvalidTransition {
                unit: unit.clone(),
                from: entry.status,
                to: ErasureStatus::ReversiblyInaccessible,
            });
        }
        let key = derive_key(self.config.seed, &format!("escrow:{unit}:{}", self.ledger.len()));
        let entry = self.units.get_mut(unit).unwrap();
        for slot in &mut entry.slots {
            if slot.info.personal_len == 0 {
                continue;
            }
            let mut bytes = self.segs.read_personal(slot)?;
            keystream_xor(&key, slot.info.seq, &mut bytes);
            self.segs.write_personal(slot, &bytes)?;
            slot.flags |= FLAG_ESCROWED;
            self.segs.write_flags(slot)?;
        }
        self.segs.write_status(entry.current(), ErasureStatus::ReversiblyInaccessible)?;
        entry.status = ErasureStatus::ReversiblyInaccessible;
        entry.cache = None;
        self.escrow.insert(EscrowEntry {
            unit_id: unit.clone(),
            key,
            created_at: t,
        })?;
        self.erase_record(unit, ErasureMode::ReversiblyInaccessible, entity, t)?;
        Ok(ErasureStatus::ReversiblyInaccessible)
    }

    fn restore_access(&mut self, unit: &UnitId, entity: &EntityId, t: Timestamp) -> Result<ErasureStatus> {
        self.check_time(t)?;
        let entry = self.entry(unit)?;
        if entry.status != ErasureStatus::ReversiblyInaccessible {
            return Err(Error::InvalidTransition {
                unit: unit.clone(),
                from: entry.status,
                to: ErasureStatus::Live,
            });
        }
        let key = self
            .escrow
            .get(unit)
            .ok_or_else(|| Error::Corrupt {
                file: "escrow.bin".into(),
                reason: format!("no escrow key for {unit}"),
            })?
            .key;
        let entry = self.units.get_mut(unit).unwrap();
        for slot in &mut entry.slots {
            if slot.flags & FLAG_ESCROWED == 0 {
                continue;
            }
            let mut bytes = self.segs.read_personal(slot)?;
            keystream_xor(&key, slot.info.seq, &mut bytes);
            self.segs.write_personal(slot, &bytes)?;
            slot.flags &= !FLAG_ESCROWED;
            self.segs.write_flags(slot)?;
        }
        self.segs.write_status(entry.current(), ErasureStatus::Live)?;
        entry.status = ErasureStatus::Live;
        entry.cache = Some(self.segs.decode(entry.current(), None)?);
        self.escrow.remove(unit)?;
        let digest = state_digest([ErasureStatus::Live.as_str().as_bytes()]);
        let purpose = Purpose::new(ACCESS_RESTORE)?;
        self.record(
            ActionRecord::new(unit.clone(), purpose.clone(), entity.clone(), ActionKind::UpdateMetadata, t)
                .regulation_required(true)
                .with_digest(digest),
        )?;
        self.log_query(t, entity, &purpose, "restore-access", &unit_target(unit), 1, &digest, true)?;
        Ok(ErasureStatus::Live)
    }

    /// Subjects of a unit whose personal section is still recoverable.
    fn subjects_of(&self, unit: &UnitId) -> Result<Option<BTreeSet<EntityId>>> {
        let entry = &self.units[unit];
        match entry.status {
            ErasureStatus::Live => Ok(entry.cache.as_ref().map(|p| p.subjects.clone())),
            ErasureStatus::ReversiblyInaccessible => {
                let key = self.escrow.get(unit).map(|e| e.key);
                Ok(Some(self.segs.decode(entry.current(), key.as_ref())?.subjects))
            }
            _ => Ok(None),
        }
    }

    /// Derived units a strong erase of `root` must take along: every
    /// provenance descendant whose own edge keeps subjects identifiable and
    /// whose subjects meet the root's, unless already erased that far.
    /// Derived subjects are unions of input subjects, so when either side's
    /// subjects are already gone the intersection is taken as non-empty.
    fn cascade_targets(&self, root: &UnitId, target: ErasureStatus) -> Result<Vec<UnitId>> {
        let root_subjects = self.subjects_of(root)?;
        let mut out = Vec::new();
        for d in self.graph.descendants(root) {
            let Some(edge) = self.graph.edge(&d) else { continue };
            if !edge.subjects_identifiable || self.units[&d].status >= target {
                continue;
            }
            let intersects = match (&root_subjects, self.subjects_of(&d)?) {
                (Some(a), Some(b)) => !a.is_disjoint(&b),
                _ => true,
            };
            if intersects {
                out.push(d);
            }
        }
        Ok(out)
    }

    /// Zeroes (or sanitizes, then zeroes) the personal bytes of every slot
    /// of `unit` and moves it to `status`.
    fn destroy_bytes(&mut self, unit: &UnitId, status: ErasureStatus, rng: &mut ChaCha20Rng) -> Result<u64> {
        let sanitize = status == ErasureStatus::PermanentlyDeleted;
        let entry = self.units.get_mut(unit).unwrap();
        let last = entry.slots.len() - 1;
        let mut zeroed = 0u64;
        for (i, slot) in entry.slots.iter_mut().enumerate() {
            let (off, len) = slot.info.personal_range();
            if len > 0 {
                let seg = self.segs.seg(slot.info.segment);
                if sanitize {
                    sanitize_range(&seg.file, off, len, rng)?;
                } else {
                    seg.file.write_all_at(&vec![0u8; len], off)?;
                }
                self.segs.refresh_crc(slot)?;
                zeroed += len as u64;
            }
            let newly_erased = slot.flags & FLAG_ERASED == 0;
            slot.flags = (slot.flags | FLAG_ERASED) & !FLAG_ESCROWED;
            self.segs.write_flags(slot)?;
            if i == last && newly_erased {
                self.segs.map.get_mut(&slot.info.segment).unwrap().dead += slot.info.personal_len as u64;
            }
        }
        let current = *entry.current();
        self.segs.write_status(&current, status)?;
        if status >= ErasureStatus::StrongDeleted {
            let touched: BTreeSet<u32> = entry.slots.iter().map(|s| s.info.segment).collect();
            for id in touched {
                self.segs.seg(id).file.sync_data()?;
            }
        }
        entry.status = status;
        entry.cache = None;
        self.escrow.remove(unit)?;
        Ok(zeroed)
    }

    fn erase(&mut self, unit: &UnitId, mode: ErasureMode, entity: &EntityId, t: Timestamp) -> Result<ErasureReport> {
        self.check_time(t)?;
        let from = self.entry(unit)?.status;
        let target = ErasureStatus::after(mode);
        if from >= target {
            return Err(Error::InvalidTransition {
                unit: unit.clone(),
                from,
                to: target,
            });
        }
        if mode == ErasureMode::ReversiblyInaccessible {
            self.make_inaccessible(unit, entity, t)?;
            return Ok(ErasureReport {
                unit_id: unit.clone(),
                mode,
                status: target,
                cascaded: Vec::new(),
                bytes_zeroed: 0,
                records_redacted: 0,
            });
        }
        let strong = mode >= ErasureMode::StrongDelete;
        let cascaded = if strong {
            self.cascade_targets(unit, target)?
        } else {
            Vec::new()
        };
        let reason = if mode == ErasureMode::PermanentDelete {
            RedactionReason::PermanentDelete
        } else {
            RedactionReason::StrongDelete
        };
        let mut rng = ChaCha20Rng::from_seed(derive_key(self.config.seed, &format!("sanitize:{}", self.ledger.len())));
        let mut bytes_zeroed = 0;
        let mut records_redacted = 0;
        for u in cascaded.iter().chain(std::iter::once(unit)) {
            bytes_zeroed += self.destroy_bytes(u, target, &mut rng)?;
            if strong && !self.ledger.positions_of(u).is_empty() {
                records_redacted += self.ledger.redact_values(u, reason, entity, t)?;
            }
            self.erase_record(u, mode, entity, t)?;
        }
        Ok(ErasureReport {
            unit_id: unit.clone(),
            mode,
            status: target,
            cascaded,
            bytes_zeroed,
            records_redacted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_tags_round_trip_and_order() {
        for s in [
            ErasureStatus::Live,
            ErasureStatus::ReversiblyInaccessible,
            ErasureStatus::Deleted,
            ErasureStatus::StrongDeleted,
            ErasureStatus::PermanentlyDeleted,
        ] {
            assert_eq!(ErasureStatus::from_tag(s.tag()), Some(s));
        }
        assert!(ErasureStatus::after(ErasureMode::Delete) < ErasureStatus::after(ErasureMode::StrongDelete));
        assert_eq!(ErasureStatus::from_tag(9), None);
    }

    #[test]
    fn space_factor_defaults_to_one() {
        let u = SpaceUsage {
            total_bytes: 100,
            personal_bytes: 0,
        };
        assert_eq!(u.factor(), 1.0);
    }
}
