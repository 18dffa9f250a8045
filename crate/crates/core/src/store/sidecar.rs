//! Profile-dependent side files: the separate policy table used by the
//! metadata-join access path, and the query and policy logs.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{policy_active, EntityId, PolicyTuple, Purpose, Timestamp, UnitId};
use crate::store::segment::{decode_policy, encode_policy};

const METADATA_MAGIC: [u8; 4] = *b"DCMD";
const METADATA_VERSION: u8 = 1;

/// `metadata.dat`: one framed row `[len][unit][policies][crc]` per policy
/// write; the latest row of a unit wins.
#[derive(Debug)]
pub struct MetadataTable {
    file: File,
    end: u64,
    rows: HashMap<UnitId, (u64, u32)>,
}

fn decode_row(body: &[u8]) -> Option<(UnitId, Vec<PolicyTuple>)> {
    let mut r = Reader::new(body);
    let unit = UnitId::new(r.str16()?).ok()?;
    let n = r.u16()?;
    let mut policies = Vec::with_capacity(n as usize);
    for _ in 0..n {
        policies.push(decode_policy(&mut r)?);
    }
    r.is_empty().then_some((unit, policies))
}

impl MetadataTable {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        if buf.is_empty() {
            let mut header = METADATA_MAGIC.to_vec();
            header.push(METADATA_VERSION);
            file.write_all_at(&header, 0)?;
            return Ok(MetadataTable {
                file,
                end: 5,
                rows: HashMap::new(),
            });
        }
        if buf.len() < 5 || buf[..4] != METADATA_MAGIC {
            return Err(Error::Corrupt {
                file: path.display().to_string(),
                reason: "bad metadata header".into(),
            });
        }
        let mut rows = HashMap::new();
        let mut pos = 5usize;
        while let Some(len) = buf.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize) {
            let Some(frame) = buf.get(pos..pos + 8 + len) else { break };
            let body = &frame[4..4 + len];
            let crc = u32::from_le_bytes(frame[4 + len..].try_into().unwrap());
            if crc32fast::hash(body) == crc {
                if let Some((unit, _)) = decode_row(body) {
                    rows.insert(unit, (pos as u64, (len + 8) as u32));
                }
            }
            pos += 8 + len;
        }
        Ok(MetadataTable {
            file,
            end: pos as u64,
            rows,
        })
    }

    pub fn write(&mut self, unit: &UnitId, policies: &BTreeSet<PolicyTuple>) -> Result<()> {
        let mut w = Writer::with_capacity(64 + policies.len() * 48);
        w.str16(unit.as_str());
        w.u16(policies.len() as u16);
        for p in policies {
            encode_policy(&mut w, p);
        }
        let body = w.into_inner();
        let mut frame = Vec::with_capacity(body.len() + 8);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        self.file.write_all_at(&frame, self.end)?;
        self.rows.insert(unit.clone(), (self.end, frame.len() as u32));
        self.end += frame.len() as u64;
        Ok(())
    }

    pub fn contains(&self, unit: &UnitId) -> bool {
        self.rows.contains_key(unit)
    }

    /// Second lookup of the join: reads the unit's row back from disk.
    pub fn read(&self, unit: &UnitId) -> Result<Option<Vec<PolicyTuple>>> {
        let Some(&(offset, len)) = self.rows.get(unit) else {
            return Ok(None);
        };
        let mut frame = vec![0u8; len as usize];
        self.file.read_exact_at(&mut frame, offset)?;
        let body = &frame[4..frame.len() - 4];
        Ok(decode_row(body).map(|(_, p)| p))
    }

    /// Reads the whole table and returns the current row of every unit, in
    /// file order.
    pub fn scan(&self) -> Result<Vec<(UnitId, Vec<PolicyTuple>)>> {
        let mut buf = vec![0u8; self.end as usize];
        self.file.read_exact_at(&mut buf, 0)?;
        let mut out = Vec::with_capacity(self.rows.len());
        let mut pos = 5usize;
        while let Some(len) = buf.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize) {
            let Some(frame) = buf.get(pos..pos + 8 + len) else { break };
            if let Some((unit, policies)) = decode_row(&frame[4..4 + len]) {
                if self.rows.get(&unit).map(|r| r.0) == Some(pos as u64) {
                    out.push((unit, policies));
                }
            }
            pos += 8 + len;
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct QueryLine<'a> {
    time: String,
    entity: String,
    purpose: &'a str,
    op: &'a str,
    query: String,
    rows: usize,
    response_digest: String,
    outcome: &'a str,
}

#[derive(Serialize)]
struct PolicyVerdict {
    purpose: String,
    entity: String,
    begin: u64,
    end: u64,
    active: bool,
    matches: bool,
}

#[derive(Serialize)]
struct PolicyLine<'a> {
    time: String,
    unit: &'a str,
    entity: String,
    purpose: &'a str,
    op: &'a str,
    evaluated: Vec<PolicyVerdict>,
    decision: &'a str,
}

/// One logged operation.
pub struct QueryEvent<'a> {
    pub time: Timestamp,
    pub entity: &'a EntityId,
    pub purpose: &'a Purpose,
    pub op: &'a str,
    pub target: &'a str,
    pub rows: usize,
    pub digest: &'a [u8],
    pub allowed: bool,
}

#[derive(Debug)]
pub struct QueryLog {
    file: File,
    json: bool,
}

impl QueryLog {
    pub fn open_csv(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).create(true).open(path)?;
        Ok(QueryLog { file, json: false })
    }

    pub fn open_json(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).create(true).open(path)?;
        Ok(QueryLog { file, json: true })
    }

    pub fn log(&mut self, ev: &QueryEvent<'_>) -> Result<()> {
        let outcome = if ev.allowed { "ok" } else { "denied" };
        let mut line = if self.json {
            let mut v = serde_json::to_vec(&QueryLine {
                time: ev.time.to_iso(),
                entity: ev.entity.to_string(),
                purpose: ev.purpose.as_str(),
                op: ev.op,
                query: format!(
                    "{} FROM units JOIN unit_policies USING (unit_id) WHERE {} AND purpose = '{}' AND entity = '{}'",
                    if ev.op == "read" || ev.op == "read-by-metadata" { "SELECT value" } else { "UPDATE" },
                    ev.target,
                    ev.purpose,
                    ev.entity
                ),
                rows: ev.rows,
                response_digest: hex::encode(ev.digest),
                outcome,
            })?;
            v.push(b'\n');
            v
        } else {
            format!(
                "{},{},{},{},{},{}\n",
                ev.time.secs(),
                ev.entity,
                ev.purpose,
                ev.target,
                ev.op,
                outcome
            )
            .into_bytes()
        };
        line.shrink_to_fit();
        self.file.write_all(&line)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct PolicyLog {
    file: File,
}

impl PolicyLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).create(true).open(path)?;
        Ok(PolicyLog { file })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn log(
        &mut self,
        time: Timestamp,
        unit: &UnitId,
        entity: &EntityId,
        purpose: &Purpose,
        op: &str,
        policies: &[PolicyTuple],
        allowed: bool,
    ) -> Result<()> {
        let evaluated = policies
            .iter()
            .map(|p| PolicyVerdict {
                purpose: p.purpose().to_string(),
                entity: p.entity().to_string(),
                begin: p.begin().secs(),
                end: p.end().secs(),
                active: policy_active(p, time),
                matches: p.grants(purpose, entity),
            })
            .collect();
        let mut line = serde_json::to_vec(&PolicyLine {
            time: time.to_iso(),
            unit: unit.as_str(),
            entity: entity.to_string(),
            purpose: purpose.as_str(),
            op,
            evaluated,
            decision: if allowed { "permit" } else { "deny" },
        })?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        Ok(())
    }
}
