//! `escrow.bin`: keys of reversibly inaccessible units.
//!
//! `"DCES"`, a version byte, then `[count: u32]` entries of
//! `[unit: str16][key: 32 bytes][created_at: u64]`, and a CRC32 over
//! everything before it. The whole file is rewritten on each change.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Timestamp, UnitId};
use crate::store::transform::Key;

const ESCROW_MAGIC: [u8; 4] = *b"DCES";
const ESCROW_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowEntry {
    pub unit_id: UnitId,
    pub key: Key,
    pub created_at: Timestamp,
}

#[derive(Debug)]
pub struct Escrow {
    path: PathBuf,
    entries: BTreeMap<UnitId, EscrowEntry>,
}

impl Escrow {
    pub fn open(path: &Path) -> Result<Self> {
        let mut escrow = Escrow {
            path: path.to_owned(),
            entries: BTreeMap::new(),
        };
        let buf = match fs::read(path) {
            Ok(buf) => buf,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                escrow.persist()?;
                return Ok(escrow);
            }
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| Error::Corrupt {
            file: path.display().to_string(),
            reason: reason.into(),
        };
        if buf.len() < 13 || buf[..4] != ESCROW_MAGIC || buf[4] != ESCROW_VERSION {
            return Err(corrupt("bad escrow header"));
        }
        let (data, crc) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(data) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(corrupt("escrow checksum mismatch"));
        }
        let mut r = Reader::new(&data[5..]);
        let n = r.u32().ok_or_else(|| corrupt("truncated escrow"))?;
        for _ in 0..n {
            let entry = (|| {
                let unit_id = UnitId::new(r.str16()?).ok()?;
                let key: Key = r.take(32)?.try_into().ok()?;
                let created_at = Timestamp(r.u64()?);
                Some(EscrowEntry {
                    unit_id,
                    key,
                    created_at,
                })
            })()
            .ok_or_else(|| corrupt("bad escrow entry"))?;
            escrow.entries.insert(entry.unit_id.clone(), entry);
        }
        Ok(escrow)
    }

    fn persist(&self) -> Result<()> {
        let mut w = Writer::with_capacity(16 + self.entries.len() * 64);
        w.bytes(&ESCROW_MAGIC);
        w.u8(ESCROW_VERSION);
        w.u32(self.entries.len() as u32);
        for e in self.entries.values() {
            w.str16(e.unit_id.as_str());
            w.bytes(&e.key);
            w.u64(e.created_at.secs());
        }
        let mut buf = w.into_inner();
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let tmp = self.path.with_extension("bin.tmp");
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn get(&self, unit: &UnitId) -> Option<&EscrowEntry> {
        self.entries.get(unit)
    }

    pub fn contains(&self, unit: &UnitId) -> bool {
        self.entries.contains_key(unit)
    }

    pub fn insert(&mut self, entry: EscrowEntry) -> Result<()> {
        self.entries.insert(entry.unit_id.clone(), entry);
        self.persist()
    }

    /// Destroys the key; returns whether one existed.
    pub fn remove(&mut self, unit: &UnitId) -> Result<bool> {
        let existed = self.entries.remove(unit).is_some();
        if existed {
            self.persist()?;
        }
        Ok(existed)
    }
}
