//! Append-only action history with in-place payload redaction.
//!
//! On disk (`actions.log`): a 4-byte magic, a version byte, then records of
//! `[len: u32][body][crc32(body): u32]`, little-endian. The first 25 body
//! bytes are the redactable prefix: redaction reason, redaction time and the
//! 16-byte state digest. Redaction overwrites that prefix and the CRC in place,
//! so record positions and every structural field survive it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{
    ActionKind, ActionRecord, EntityId, EntityKind, Purpose, RedactionReason, StateDigest, Timestamp,
    UnitId, DIGEST_LEN,
};

pub const LEDGER_MAGIC: [u8; 4] = *b"DCAL";
pub const LEDGER_VERSION: u8 = 1;
pub const REDACTED_SENTINEL: StateDigest = [0u8; DIGEST_LEN];

const HEADER_LEN: u64 = 5;
const REDACTABLE_PREFIX: usize = 1 + 8 + DIGEST_LEN;

/// Payload redaction applied to a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RedactionMark {
    pub position: u64,
    pub redacted_at: Timestamp,
    pub reason: RedactionReason,
}

#[derive(Debug, Default)]
pub struct Ledger {
    records: Vec<ActionRecord>,
    by_unit: HashMap<UnitId, Vec<usize>>,
    /// File offset of each record's length prefix.
    offsets: Vec<u64>,
    file: Option<File>,
    end: u64,
}

fn encode_body(r: &ActionRecord) -> Vec<u8> {
    let mut w = Writer::with_capacity(64);
    write_prefix(&mut w, r);
    w.u64(r.time.secs());
    w.u8(r.action.tag());
    w.u8(r.regulation_required as u8);
    w.str16(r.unit_id.as_str());
    w.str16(r.purpose.as_str());
    w.u8(r.entity.kind().tag());
    w.str16(r.entity.id());
    w.into_inner()
}

fn write_prefix(w: &mut Writer, r: &ActionRecord) {
    match r.redaction {
        None => {
            w.u8(0);
            w.u64(0);
        }
        Some((reason, at)) => {
            w.u8(match reason {
                RedactionReason::StrongDelete => 1,
                RedactionReason::PermanentDelete => 2,
            });
            w.u64(at.secs());
        }
    }
    w.bytes(&r.digest);
}

fn decode_body(body: &[u8]) -> Option<ActionRecord> {
    let mut rd = Reader::new(body);
    let reason = match rd.u8()? {
        0 => None,
        1 => Some(RedactionReason::StrongDelete),
        2 => Some(RedactionReason::PermanentDelete),
        _ => return None,
    };
    let redacted_at = Timestamp(rd.u64()?);
    let digest: StateDigest = rd.take(DIGEST_LEN)?.try_into().ok()?;
    let time = Timestamp(rd.u64()?);
    let action = ActionKind::from_tag(rd.u8()?)?;
    let regulation_required = rd.u8()? != 0;
    let unit_id = UnitId::new(rd.str16()?).ok()?;
    let purpose = Purpose::new(rd.str16()?).ok()?;
    let kind = EntityKind::from_tag(rd.u8()?)?;
    let entity = EntityId::new(kind, rd.str16()?).ok()?;
    rd.is_empty().then_some(ActionRecord {
        unit_id,
        purpose,
        entity,
        action,
        time,
        regulation_required,
        digest,
        redaction: reason.map(|r| (r, redacted_at)),
    })
}

fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out
}

impl Ledger {
    /// Ledger without a backing file.
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Opens or creates `path`. A torn final record is truncated away; a bad
    /// record followed by more data is reported as corruption.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let corrupt = |reason: String| Error::Corrupt {
            file: path.display().to_string(),
            reason,
        };

        let mut ledger = Ledger::default();
        if buf.is_empty() {
            let mut header = LEDGER_MAGIC.to_vec();
            header.push(LEDGER_VERSION);
            file.write_all(&header)?;
            ledger.end = HEADER_LEN;
            ledger.file = Some(file);
            return Ok(ledger);
        }
        if buf.len() < HEADER_LEN as usize || buf[..4] != LEDGER_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        if buf[4] != LEDGER_VERSION {
            return Err(corrupt(format!("unsupported version {}", buf[4])));
        }

        let mut pos = HEADER_LEN as usize;
        while pos < buf.len() {
            let parsed = (|| {
                let len = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().ok()?) as usize;
                let body = buf.get(pos + 4..pos + 4 + len)?;
                let crc = u32::from_le_bytes(buf.get(pos + 4 + len..pos + 8 + len)?.try_into().ok()?);
                if crc32fast::hash(body) != crc {
                    return None;
                }
                Some((decode_body(body)?, len + 8))
            })();
            match parsed {
                Some((record, framed)) => {
                    ledger.index(record, pos as u64);
                    pos += framed;
                }
                None => {
                    let tail_len = u32::from_le_bytes(
                        buf.get(pos..pos + 4).and_then(|b| b.try_into().ok()).unwrap_or([0; 4]),
                    ) as usize;
                    if pos + 8 + tail_len < buf.len() {
                        return Err(corrupt(format!("bad record at offset {pos}")));
                    }
                    log_truncate(&file, pos as u64)?;
                    break;
                }
            }
        }
        ledger.end = pos.min(buf.len()) as u64;
        ledger.file = Some(file);
        Ok(ledger)
    }

    fn index(&mut self, record: ActionRecord, offset: u64) {
        let position = self.records.len();
        self.by_unit
            .entry(record.unit_id.clone())
            .or_default()
            .push(position);
        self.records.push(record);
        self.offsets.push(offset);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.records.last().map(|r| r.time)
    }

    pub fn records(&self) -> &[ActionRecord] {
        &self.records
    }

    pub fn get(&self, position: u64) -> Option<&ActionRecord> {
        self.records.get(position as usize)
    }

    pub fn append(&mut self, record: ActionRecord) -> Result<u64> {
        if let Some(last) = self.last_time() {
            if record.time < last {
                return Err(Error::TimeRegression {
                    last,
                    got: record.time,
                });
            }
        }
        let offset = self.end;
        if let Some(file) = &self.file {
            let framed = frame(&encode_body(&record));
            file.write_all_at(&framed, offset)?;
            self.end += framed.len() as u64;
        }
        let position = self.records.len() as u64;
        self.index(record, offset);
        Ok(position)
    }

    pub fn history_of(&self, unit: &UnitId) -> Vec<ActionRecord> {
        self.positions_of(unit)
            .iter()
            .map(|&p| self.records[p].clone())
            .collect()
    }

    pub fn positions_of(&self, unit: &UnitId) -> &[usize] {
        self.by_unit.get(unit).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_of(&self, unit: &UnitId) -> Option<&ActionRecord> {
        self.positions_of(unit).last().map(|&p| &self.records[p])
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.by_unit.keys()
    }

    /// Replaces the digest of every not-yet-redacted record of `unit` with the
    /// sentinel, then appends one regulation-required record describing the
    /// redaction. Returns how many records changed.
    pub fn redact_values(
        &mut self,
        unit: &UnitId,
        reason: RedactionReason,
        entity: &EntityId,
        time: Timestamp,
    ) -> Result<usize> {
        let positions = self.positions_of(unit).to_vec();
        if positions.is_empty() {
            return Err(Error::UnknownUnit(unit.clone()));
        }
        if let Some(last) = self.last_time() {
            if time < last {
                return Err(Error::TimeRegression { last, got: time });
            }
        }
        let mut changed = 0;
        for p in positions {
            let record = &mut self.records[p];
            if record.redaction.is_some() {
                continue;
            }
            record.digest = REDACTED_SENTINEL;
            record.redaction = Some((reason, time));
            changed += 1;
            if let Some(file) = &self.file {
                let body = encode_body(record);
                let offset = self.offsets[p];
                file.write_all_at(&body[..REDACTABLE_PREFIX], offset + 4)?;
                file.write_all_at(&crc32fast::hash(&body).to_le_bytes(), offset + 4 + body.len() as u64)?;
            }
        }
        // Born redacted: it carries no state digest of its own.
        let mut note = ActionRecord::new(
            unit.clone(),
            Purpose::compliance_erase(),
            entity.clone(),
            ActionKind::UpdateMetadata,
            time,
        )
        .regulation_required(true);
        note.redaction = Some((reason, time));
        self.append(note)?;
        Ok(changed)
    }

    pub fn redaction_marks(&self) -> Vec<RedactionMark> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                r.redaction.map(|(reason, redacted_at)| RedactionMark {
                    position: i as u64,
                    redacted_at,
                    reason,
                })
            })
            .collect()
    }

    pub fn audit_scan(&self, pred: impl Fn(&ActionRecord) -> bool) -> Vec<u64> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i as u64)
            .collect()
    }

    pub fn sync(&self) -> Result<()> {
        if let Some(file) = &self.file {
            file.sync_data()?;
        }
        Ok(())
    }

    /// One JSON object per line with the fixed export field set.
    pub fn export_ndjson(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, &ExportRow::from(r))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn log_truncate(file: &File, len: u64) -> Result<()> {
    file.set_len(len)?;
    Ok(())
}

#[derive(Serialize)]
struct ExportRow<'a> {
    unit_id: &'a str,
    purpose: &'a str,
    entity: String,
    action: String,
    time: String,
    regulation_required: bool,
    redacted: bool,
}

impl<'a> From<&'a ActionRecord> for ExportRow<'a> {
    fn from(r: &'a ActionRecord) -> Self {
        ExportRow {
            unit_id: r.unit_id.as_str(),
            purpose: r.purpose.as_str(),
            entity: r.entity.to_string(),
            action: r.action.to_string(),
            time: r.time.to_iso(),
            regulation_required: r.regulation_required,
            redacted: r.is_redacted(),
        }
    }
}

/// Attempts refused by enforcement. Kept apart from the action history,
/// which holds only performed actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct DeniedEvent {
    pub unit_id: UnitId,
    pub purpose: Purpose,
    pub entity: EntityId,
    pub action: ActionKind,
    pub time: Timestamp,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct DeniedLog {
    file: Option<File>,
    count: u64,
}

impl DeniedLog {
    pub fn in_memory() -> Self {
        DeniedLog::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let count = text.lines().filter(|l| !l.is_empty()).count() as u64;
        Ok(DeniedLog {
            file: Some(file),
            count,
        })
    }

    pub fn record(&mut self, event: &DeniedEvent) -> Result<()> {
        if let Some(file) = &mut self.file {
            let mut line = serde_json::to_vec(event)?;
            line.push(b'\n');
            file.write_all(&line)?;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ErasureMode;

    fn uid(s: &str) -> UnitId {
        UnitId::new(s).unwrap()
    }

    fn netflix() -> EntityId {
        EntityId::controller("Netflix").unwrap()
    }

    fn rec(unit: &str, kind: ActionKind, t: u64) -> ActionRecord {
        ActionRecord::new(uid(unit), Purpose::new("billing").unwrap(), netflix(), kind, Timestamp(t))
            .with_digest([0xAB; DIGEST_LEN])
    }

    #[test]
    fn contract_record_lands_at_zero() {
        let mut l = Ledger::in_memory();
        let t = Timestamp::parse_iso("2023-01-02").unwrap();
        let r = ActionRecord::new(uid("1234"), Purpose::new("comp").unwrap(), netflix(), ActionKind::Contract, t);
        assert_eq!(l.append(r).unwrap(), 0);
    }

    #[test]
    fn time_regression_rejected() {
        let mut l = Ledger::in_memory();
        l.append(rec("a", ActionKind::Create, 10)).unwrap();
        assert!(matches!(
            l.append(rec("a", ActionKind::Read, 9)),
            Err(Error::TimeRegression { .. })
        ));
        // equal times are fine
        l.append(rec("a", ActionKind::Read, 10)).unwrap();
    }

    #[test]
    fn history_in_append_order() {
        let mut l = Ledger::in_memory();
        for i in 0..1000u64 {
            let unit = if i % 3 == 0 { "a" } else { "b" };
            l.append(rec(unit, ActionKind::Read, i)).unwrap();
        }
        let h = l.history_of(&uid("a"));
        assert_eq!(h.len(), 334);
        assert!(h.windows(2).all(|w| w[0].time < w[1].time));
        assert!(l.history_of(&uid("zzz")).is_empty());
    }

    #[test]
    fn redaction_counts_and_keeps_structure() {
        let mut l = Ledger::in_memory();
        for t in 0..5 {
            l.append(rec("x", ActionKind::Read, t)).unwrap();
        }
        l.append(rec("y", ActionKind::Read, 5)).unwrap();
        let before = l.history_of(&uid("x"));

        let n = l
            .redact_values(&uid("x"), RedactionReason::StrongDelete, &netflix(), Timestamp(9))
            .unwrap();
        assert_eq!(n, 5);
        let after = l.history_of(&uid("x"));
        assert_eq!(after.len(), 6);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!((&a.unit_id, &a.entity, &a.purpose, a.action, a.time), (&b.unit_id, &b.entity, &b.purpose, b.action, b.time));
            assert_eq!(b.digest, REDACTED_SENTINEL);
            assert!(b.is_redacted());
        }
        let last = after.last().unwrap();
        assert!(last.regulation_required);
        assert_eq!(last.action, ActionKind::UpdateMetadata);
        // untouched neighbour
        assert_eq!(l.history_of(&uid("y"))[0].digest, [0xAB; DIGEST_LEN]);

        let again = l
            .redact_values(&uid("x"), RedactionReason::StrongDelete, &netflix(), Timestamp(10))
            .unwrap();
        assert_eq!(again, 0);
        assert_eq!(l.history_of(&uid("x")).len(), 7);
    }

    #[test]
    fn redact_unknown_unit() {
        let mut l = Ledger::in_memory();
        assert!(matches!(
            l.redact_values(&uid("nope"), RedactionReason::StrongDelete, &netflix(), Timestamp(0)),
            Err(Error::UnknownUnit(_))
        ));
    }

    #[test]
    fn scan_and_history_agree() {
        let mut l = Ledger::in_memory();
        l.append(rec("a", ActionKind::Create, 0)).unwrap();
        l.append(rec("b", ActionKind::Create, 1)).unwrap();
        l.append(rec("a", ActionKind::Erase(ErasureMode::Delete), 2)).unwrap();
        l.append(rec("b", ActionKind::Read, 3)).unwrap();
        assert_eq!(l.audit_scan(|r| r.action.is_erase()), vec![2]);
        assert!(l.audit_scan(|_| false).is_empty());
        assert_eq!(l.audit_scan(|r| r.unit_id == uid("a")), vec![0, 2]);
    }

    #[test]
    fn file_round_trip_with_redaction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actions.log");
        {
            let mut l = Ledger::open(&path).unwrap();
            l.append(rec("a", ActionKind::Create, 1)).unwrap();
            l.append(rec("b", ActionKind::Create, 2)).unwrap();
            l.append(rec("a", ActionKind::Read, 3)).unwrap();
            l.redact_values(&uid("a"), RedactionReason::PermanentDelete, &netflix(), Timestamp(4))
                .unwrap();
        }
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"DCAL");
        let l = Ledger::open(&path).unwrap();
        assert_eq!(l.len(), 4);
        let a = l.history_of(&uid("a"));
        assert_eq!(a[0].redaction, Some((RedactionReason::PermanentDelete, Timestamp(4))));
        assert_eq!(a[0].digest, REDACTED_SENTINEL);
        assert_eq!(l.history_of(&uid("b"))[0].digest, [0xAB; DIGEST_LEN]);
        // the digest pattern of a's records is gone from disk, b's remains once
        let hits = raw.windows(DIGEST_LEN).filter(|w| *w == [0xAB; DIGEST_LEN]).count();
        assert_eq!(hits, 1);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actions.log");
        {
            let mut l = Ledger::open(&path).unwrap();
            l.append(rec("a", ActionKind::Create, 1)).unwrap();
            l.append(rec("a", ActionKind::Read, 2)).unwrap();
        }
        let len = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 3).unwrap();
        let mut l = Ledger::open(&path).unwrap();
        assert_eq!(l.len(), 1);
        l.append(rec("a", ActionKind::Read, 5)).unwrap();
        drop(l);
        assert_eq!(Ledger::open(&path).unwrap().len(), 2);
    }

    #[test]
    fn export_has_fixed_fields() {
        let mut l = Ledger::in_memory();
        l.append(rec("a", ActionKind::Erase(ErasureMode::StrongDelete), 0).regulation_required(true))
            .unwrap();
        let mut out = Vec::new();
        l.export_ndjson(&mut out).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["action", "entity", "purpose", "redacted", "regulation_required", "time", "unit_id"]
        );
        assert_eq!(obj["action"], "erase(strong_delete)");
        assert_eq!(obj["time"], "1970-01-01T00:00:00Z");
    }
}
