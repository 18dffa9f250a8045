//! Segment files and the stored-record layout.
//!
//! `seg-<n>.dat` starts with an 8-byte magic and a version byte, followed by
//! framed records:
//!
//! ```text
//! [body_len: u32][flags: u8][status: u8][body][crc32(body): u32]
//! body = [seq: u64][unit_id: str16][meta: blob32][personal: blob32]
//! ```
//!
//! `flags` and `status` sit outside the checksum so that superseding a slot
//! is a single-byte write. The personal section (subjects, origins, values)
//! is what erasure zeroes, escrow transforms and at-rest encoding covers; the
//! meta section (category, policies, provenance) survives erasure.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::codec::{Reader, Writer};
use crate::model::{
    Category, EntityId, EntityKind, PolicyTuple, ProvenanceEdge, Purpose, Timestamp, UnitId, Version,
};

pub const SEGMENT_MAGIC: [u8; 8] = *b"DCSEGMNT";
pub const SEGMENT_VERSION: u8 = 1;
pub const SEGMENT_HEADER_LEN: u64 = 9;

pub const FLAG_DEAD: u8 = 0b0001;
pub const FLAG_ESCROWED: u8 = 0b0010;
pub const FLAG_AT_REST: u8 = 0b0100;
pub const FLAG_ERASED: u8 = 0b1000;

/// Bytes before the body: length, flags, status.
const PRE_BODY: u64 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitMeta {
    pub category: Category,
    pub policies: BTreeSet<PolicyTuple>,
    pub edge: Option<ProvenanceEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Personal {
    pub subjects: BTreeSet<EntityId>,
    pub origins: BTreeSet<String>,
    pub values: Vec<Version>,
}

impl Personal {
    pub fn value_bytes(&self) -> u64 {
        self.values.iter().map(|v| v.value.len() as u64).sum()
    }
}

pub fn encode_meta(meta: &UnitMeta) -> Vec<u8> {
    let mut w = Writer::with_capacity(128);
    w.u8(match meta.category {
        Category::Base => 0,
        Category::Derived => 1,
        Category::Metadata => 2,
    });
    w.u16(meta.policies.len() as u16);
    for p in &meta.policies {
        encode_policy(&mut w, p);
    }
    match &meta.edge {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.u16(e.inputs.len() as u16);
            for i in &e.inputs {
                w.str16(i.as_str());
            }
            w.str16(&e.function);
            w.u8(e.invertible as u8);
            w.u8(e.subjects_identifiable as u8);
        }
    }
    w.into_inner()
}

pub(crate) fn encode_policy(w: &mut Writer, p: &PolicyTuple) {
    w.str16(p.purpose().as_str());
    w.u8(p.entity().kind().tag());
    w.str16(p.entity().id());
    w.u64(p.begin().secs());
    w.u64(p.end().secs());
}

pub(crate) fn decode_policy(r: &mut Reader<'_>) -> Option<PolicyTuple> {
    let purpose = Purpose::new(r.str16()?).ok()?;
    let kind = EntityKind::from_tag(r.u8()?)?;
    let entity = EntityId::new(kind, r.str16()?).ok()?;
    PolicyTuple::new(purpose, entity, Timestamp(r.u64()?), Timestamp(r.u64()?)).ok()
}

pub fn decode_meta(unit: &UnitId, buf: &[u8]) -> Option<UnitMeta> {
    let mut r = Reader::new(buf);
    let category = match r.u8()? {
        0 => Category::Base,
        1 => Category::Derived,
        2 => Category::Metadata,
        _ => return None,
    };
    let n = r.u16()?;
    let mut policies = BTreeSet::new();
    for _ in 0..n {
        policies.insert(decode_policy(&mut r)?);
    }
    let edge = match r.u8()? {
        0 => None,
        _ => {
            let n = r.u16()?;
            let mut inputs = BTreeSet::new();
            for _ in 0..n {
                inputs.insert(UnitId::new(r.str16()?).ok()?);
            }
            Some(ProvenanceEdge {
                derived: unit.clone(),
                inputs,
                function: r.str16()?,
                invertible: r.u8()? != 0,
                subjects_identifiable: r.u8()? != 0,
            })
        }
    };
    r.is_empty().then_some(UnitMeta {
        category,
        policies,
        edge,
    })
}

pub fn encode_personal(p: &Personal) -> Vec<u8> {
    let mut w = Writer::with_capacity(128);
    w.u16(p.subjects.len() as u16);
    for s in &p.subjects {
        w.u8(s.kind().tag());
        w.str16(s.id());
    }
    w.u16(p.origins.len() as u16);
    for o in &p.origins {
        w.str16(o);
    }
    w.u32(p.values.len() as u32);
    for v in &p.values {
        w.u64(v.time.secs());
        w.blob32(&v.value);
    }
    w.into_inner()
}

pub fn decode_personal(buf: &[u8]) -> Option<Personal> {
    let mut r = Reader::new(buf);
    let mut subjects = BTreeSet::new();
    for _ in 0..r.u16()? {
        let kind = EntityKind::from_tag(r.u8()?)?;
        subjects.insert(EntityId::new(kind, r.str16()?).ok()?);
    }
    let mut origins = BTreeSet::new();
    for _ in 0..r.u16()? {
        origins.insert(r.str16()?);
    }
    let n = r.u32()?;
    let mut values = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let time = Timestamp(r.u64()?);
        values.push(Version {
            value: r.blob32()?.to_vec(),
            time,
        });
    }
    r.is_empty().then_some(Personal {
        subjects,
        origins,
        values,
    })
}

/// Location of one stored record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotInfo {
    pub segment: u32,
    pub offset: u64,
    pub frame_len: u32,
    /// Offset of the personal bytes from the start of the frame.
    pub personal_off: u32,
    pub personal_len: u32,
    pub seq: u64,
}

impl SlotInfo {
    pub fn personal_range(&self) -> (u64, usize) {
        (self.offset + self.personal_off as u64, self.personal_len as usize)
    }

    pub fn body_range(&self) -> (u64, usize) {
        (self.offset + PRE_BODY, self.frame_len as usize - PRE_BODY as usize - 4)
    }

    pub fn crc_offset(&self) -> u64 {
        self.offset + self.frame_len as u64 - 4
    }

    pub fn flags_offset(&self) -> u64 {
        self.offset + 4
    }
}

/// Builds a framed record; returns the bytes and the personal-section offset
/// within them.
pub fn frame_record(
    flags: u8,
    status: u8,
    seq: u64,
    unit: &UnitId,
    meta: &[u8],
    personal: &[u8],
) -> (Vec<u8>, u32) {
    let mut body = Writer::with_capacity(meta.len() + personal.len() + 32);
    body.u64(seq);
    body.str16(unit.as_str());
    body.blob32(meta);
    body.u32(personal.len() as u32);
    let personal_in_body = body.len();
    body.bytes(personal);
    let body = body.into_inner();

    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.push(flags);
    out.push(status);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    (out, PRE_BODY as u32 + personal_in_body as u32)
}

/// A record as found by a raw scan of a segment.
#[derive(Debug)]
pub struct ScannedRecord {
    pub flags: u8,
    pub status: u8,
    pub unit: UnitId,
    pub meta: Vec<u8>,
    pub personal: Vec<u8>,
    pub slot: SlotInfo,
}

#[derive(Debug)]
pub struct Segment {
    pub id: u32,
    pub path: PathBuf,
    pub file: File,
    pub len: u64,
    /// Bytes compaction would reclaim.
    pub dead: u64,
}

pub fn segment_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("seg-{id}.dat"))
}

pub fn parse_segment_id(name: &str) -> Option<u32> {
    name.strip_prefix("seg-")?.strip_suffix(".dat")?.parse().ok()
}

impl Segment {
    pub fn create(dir: &Path, id: u32) -> std::io::Result<Self> {
        let path = segment_path(dir, id);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)?;
        let mut header = SEGMENT_MAGIC.to_vec();
        header.push(SEGMENT_VERSION);
        file.write_all_at(&header, 0)?;
        Ok(Segment {
            id,
            path,
            file,
            len: SEGMENT_HEADER_LEN,
            dead: 0,
        })
    }

    /// Opens a segment and returns every record whose checksum verifies.
    /// Records failing the check count as dead space. A torn final frame is
    /// truncated away so later appends stay reachable.
    pub fn open(path: &Path, id: u32) -> crate::Result<(Self, Vec<ScannedRecord>)> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        if buf.len() < SEGMENT_HEADER_LEN as usize || buf[..8] != SEGMENT_MAGIC || buf[8] != SEGMENT_VERSION {
            return Err(crate::Error::Corrupt {
                file: path.display().to_string(),
                reason: "bad segment header".into(),
            });
        }
        let mut records = Vec::new();
        let mut dead = 0u64;
        let mut pos = SEGMENT_HEADER_LEN as usize;
        while pos < buf.len() {
            let Some(len) = buf.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            else {
                break;
            };
            let frame_len = len + PRE_BODY as usize + 4;
            let Some(frame) = buf.get(pos..pos + frame_len) else {
                break;
            };
            let body = &frame[PRE_BODY as usize..PRE_BODY as usize + len];
            let crc = u32::from_le_bytes(frame[frame_len - 4..].try_into().unwrap());
            let parsed = (crc32fast::hash(body) == crc)
                .then(|| {
                    let mut r = Reader::new(body);
                    let seq = r.u64()?;
                    let unit = UnitId::new(r.str16()?).ok()?;
                    let meta = r.blob32()?.to_vec();
                    let personal_len = r.u32()? as usize;
                    let personal_in_body = r.position();
                    let personal = r.take(personal_len)?.to_vec();
                    r.is_empty().then_some(ScannedRecord {
                        flags: frame[4],
                        status: frame[5],
                        unit,
                        meta,
                        personal,
                        slot: SlotInfo {
                            segment: id,
                            offset: pos as u64,
                            frame_len: frame_len as u32,
                            personal_off: PRE_BODY as u32 + personal_in_body as u32,
                            personal_len: personal_len as u32,
                            seq,
                        },
                    })
                })
                .flatten();
            match parsed {
                Some(rec) => records.push(rec),
                None => dead += frame_len as u64,
            }
            pos += frame_len;
        }
        if pos < buf.len() {
            file.set_len(pos as u64)?;
        }
        let len = pos as u64;
        Ok((
            Segment {
                id,
                path: path.to_owned(),
                file,
                len,
                dead,
            },
            records,
        ))
    }

    pub fn append(&mut self, frame: &[u8]) -> std::io::Result<u64> {
        let offset = self.len;
        self.file.write_all_at(frame, offset)?;
        self.len += frame.len() as u64;
        Ok(offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_meta() -> UnitMeta {
        let e = EntityId::controller("Netflix").unwrap();
        UnitMeta {
            category: Category::Derived,
            policies: BTreeSet::from([
                PolicyTuple::new(Purpose::new("billing").unwrap(), e.clone(), Timestamp(1), Timestamp(9)).unwrap(),
                PolicyTuple::new(Purpose::compliance_erase(), e, Timestamp(1), Timestamp(99)).unwrap(),
            ]),
            edge: Some(ProvenanceEdge {
                derived: UnitId::new("y").unwrap(),
                inputs: BTreeSet::from([UnitId::new("a").unwrap(), UnitId::new("b").unwrap()]),
                function: "sum".into(),
                invertible: true,
                subjects_identifiable: true,
            }),
        }
    }

    fn sample_personal() -> Personal {
        Personal {
            subjects: BTreeSet::from([EntityId::subject("1234").unwrap()]),
            origins: BTreeSet::from(["0".to_owned()]),
            values: vec![
                Version { value: b"v1".to_vec(), time: Timestamp(1) },
                Version { value: b"v22".to_vec(), time: Timestamp(2) },
            ],
        }
    }

    #[test]
    fn meta_and_personal_round_trip() {
        let id = UnitId::new("y").unwrap();
        let meta = sample_meta();
        assert_eq!(decode_meta(&id, &encode_meta(&meta)), Some(meta));
        let p = sample_personal();
        assert_eq!(decode_personal(&encode_personal(&p)), Some(p));
        assert_eq!(decode_personal(&[0u8; 12]), None);
    }

    #[test]
    fn scan_finds_records_and_skips_bad_crc() {
        let dir = tempfile::tempdir().unwrap();
        let mut seg = Segment::create(dir.path(), 0).unwrap();
        let id = UnitId::new("y").unwrap();
        let meta = encode_meta(&sample_meta());
        let personal = encode_personal(&sample_personal());
        let (f1, poff) = frame_record(0, 0, 1, &id, &meta, &personal);
        let (f2, _) = frame_record(0, 0, 2, &id, &meta, &personal);
        let o1 = seg.append(&f1).unwrap();
        let o2 = seg.append(&f2).unwrap();
        // corrupt one byte of the second record's body
        seg.file.write_all_at(&[0xEE], o2 + 12).unwrap();

        let (reopened, recs) = Segment::open(&seg.path, 0).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].slot.offset, o1);
        assert_eq!(recs[0].slot.personal_off, poff);
        assert_eq!(recs[0].personal, personal);
        assert_eq!(reopened.dead, f2.len() as u64);
    }

    #[test]
    fn segment_names() {
        assert_eq!(parse_segment_id("seg-12.dat"), Some(12));
        assert_eq!(parse_segment_id("seg-x.dat"), None);
    }
}
