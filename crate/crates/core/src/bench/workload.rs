//! Workload mixes and deterministic operation streams.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Timestamp, UnitId};

/// 2023-01-01T00:00:00Z; load-phase records carry this time.
pub const EPOCH: Timestamp = Timestamp(1_672_531_200);
pub const DAY: u64 = 86_400;
/// Run-phase operation `i` happens at `RUN_START + i`.
pub const RUN_START: Timestamp = Timestamp(EPOCH.0 + DAY);
pub const VALUE_LEN: usize = 64;
pub const MARKER_LEN: usize = 16;

pub const PURPOSES: [&str; 8] = [
    "billing",
    "shipping",
    "recommendations",
    "analytics",
    "support",
    "fraud-detection",
    "marketing",
    "research",
];
pub const PROCESSORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpClass {
    Create,
    DataRead,
    DataUpdate,
    DataDelete,
    MetadataRead,
    MetadataUpdate,
}

impl OpClass {
    pub const ALL: [OpClass; 6] = [
        OpClass::Create,
        OpClass::DataRead,
        OpClass::DataUpdate,
        OpClass::DataDelete,
        OpClass::MetadataRead,
        OpClass::MetadataUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::Create => "create",
            OpClass::DataRead => "data-read",
            OpClass::DataUpdate => "data-update",
            OpClass::DataDelete => "data-delete",
            OpClass::MetadataRead => "metadata-read",
            OpClass::MetadataUpdate => "metadata-update",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OpClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidMix(format!("unknown operation class `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    /// Percentages per class; they sum to 100.
    pub mix: BTreeMap<OpClass, u32>,
    pub n_records: u64,
    pub n_txns: u64,
    pub seed: u64,
}

pub const BUILTIN_WORKLOADS: [&str; 4] = ["wcon", "wpro", "wcus", "ycsb-c"];

pub fn builtin_mix(name: &str) -> Result<BTreeMap<OpClass, u32>> {
    use OpClass::*;
    let pairs: &[(OpClass, u32)] = match name {
        "wcon" => &[(Create, 25), (DataDelete, 25), (MetadataUpdate, 50)],
        "wpro" => &[(DataRead, 80), (MetadataRead, 20)],
        "wcus" => &[
            (DataRead, 20),
            (DataUpdate, 20),
            (DataDelete, 20),
            (MetadataRead, 20),
            (MetadataUpdate, 20),
        ],
        "ycsb-c" => &[(DataRead, 100)],
        _ => return Err(Error::UnknownWorkload(name.to_owned())),
    };
    Ok(pairs.iter().copied().collect())
}

pub fn builtin_workload(name: &str, n_records: u64, n_txns: u64, seed: u64) -> Result<WorkloadSpec> {
    Ok(WorkloadSpec {
        name: name.to_owned(),
        mix: builtin_mix(name)?,
        n_records,
        n_txns,
        seed,
    })
}

/// Workload file contents: a built-in `name`, or a `mix` of its own.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub name: String,
    #[serde(default)]
    pub mix: Option<BTreeMap<OpClass, u32>>,
    pub n_records: u64,
    pub n_txns: u64,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn into_spec(self) -> Result<WorkloadSpec> {
        let mix = match self.mix {
            Some(mix) => mix,
            None => builtin_mix(&self.name)?,
        };
        let spec = WorkloadSpec {
            name: self.name,
            mix,
            n_records: self.n_records,
            n_txns: self.n_txns,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let total: u32 = self.mix.values().sum();
        if total != 100 {
            return Err(Error::InvalidMix(format!("percentages sum to {total}, not 100")));
        }
        Ok(())
    }

    /// Per-class operation counts for `n_txns`, by largest remainder. Ties
    /// go to the class listed first.
    pub fn class_counts(&self) -> Result<BTreeMap<OpClass, u64>> {
        self.validate()?;
        let n = self.n_txns;
        let mut counts: BTreeMap<OpClass, u64> = BTreeMap::new();
        let mut remainders = Vec::new();
        for (&class, &pct) in &self.mix {
            let exact = n * pct as u64;
            counts.insert(class, exact / 100);
            remainders.push((exact % 100, class));
        }
        let assigned: u64 = counts.values().sum();
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, class) in remainders.iter().take((n - assigned) as usize) {
            *counts.get_mut(&class).unwrap() += 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Create { unit: UnitId, purpose: String, processor: u32 },
    Read { unit: UnitId, purpose: String, processor: u32 },
    Update { unit: UnitId, purpose: String, processor: u32, version: u32 },
    Delete { unit: UnitId },
    ReadByMetadata { purpose: String, processor: u32 },
    AddPolicy { unit: UnitId, purpose: String, processor: u32 },
    ExtendPolicy { unit: UnitId, purpose: String, processor: u32, days: u64 },
}

impl Op {
    pub fn class(&self) -> OpClass {
        match self {
            Op::Create { .. } => OpClass::Create,
            Op::Read { .. } => OpClass::DataRead,
            Op::Update { .. } => OpClass::DataUpdate,
            Op::Delete { .. } => OpClass::DataDelete,
            Op::ReadByMetadata { .. } => OpClass::MetadataRead,
            Op::AddPolicy { .. } | Op::ExtendPolicy { .. } => OpClass::MetadataUpdate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedOp {
    pub time: Timestamp,
    #[serde(flatten)]
    pub op: Op,
}

pub fn processor_name(i: u32) -> String {
    format!("proc-{i:02}")
}

pub fn load_unit_id(i: u64) -> UnitId {
    UnitId::new(format!("u{i:08}")).unwrap()
}

fn created_unit_id(i: u64) -> UnitId {
    UnitId::new(format!("c{i:08}")).unwrap()
}

fn seeded_hash(seed: u64, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// The contract grant of a unit: which purpose and processor may use it.
pub fn assignment(seed: u64, unit: &UnitId) -> (&'static str, u32) {
    let h = seeded_hash(seed, &[b"assign", unit.as_str().as_bytes()]);
    (PURPOSES[h[0] as usize % PURPOSES.len()], u32::from(h[1]) % PROCESSORS as u32)
}

/// The 16 pseudo-random bytes that open every stored value.
pub fn marker(seed: u64, unit: &UnitId, version: u32) -> [u8; MARKER_LEN] {
    let h = seeded_hash(seed, &[b"marker", unit.as_str().as_bytes(), &version.to_le_bytes()]);
    h[..MARKER_LEN].try_into().unwrap()
}

/// A 64-byte value: the marker, then the unit id and timestamp as text,
/// padded with dots.
pub fn synthetic_value(seed: u64, unit: &UnitId, version: u32, t: Timestamp) -> Vec<u8> {
    let mut v = marker(seed, unit, version).to_vec();
    let text = format!("id={unit};t={}", t.to_iso());
    v.extend_from_slice(&text.as_bytes()[..text.len().min(VALUE_LEN - MARKER_LEN)]);
    v.resize(VALUE_LEN, b'.');
    v
}

/// The operation stream for `spec`: a seeded shuffle of the class counts,
/// with targets drawn uniformly from the units live at that point of the
/// stream.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<TimedOp>> {
    let counts = spec.class_counts()?;
    let mut classes: Vec<OpClass> = counts
        .iter()
        .flat_map(|(&c, &n)| std::iter::repeat_n(c, n as usize))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    classes.shuffle(&mut rng);

    let mut live: Vec<UnitId> = (0..spec.n_records).map(load_unit_id).collect();
    let mut versions: BTreeMap<UnitId, u32> = BTreeMap::new();
    let mut created = 0u64;
    let mut ops = Vec::with_capacity(classes.len());
    for (i, class) in classes.into_iter().enumerate() {
        let time = Timestamp(RUN_START.0 + i as u64);
        let pick = |rng: &mut ChaCha20Rng, live: &[UnitId]| -> Option<usize> {
            (!live.is_empty()).then(|| rng.random_range(0..live.len()))
        };
        let op = match class {
            OpClass::Create => {
                let unit = created_unit_id(created);
                created += 1;
                live.push(unit.clone());
                let (purpose, processor) = assignment(spec.seed, &unit);
                Op::Create {
                    unit,
                    purpose: purpose.to_owned(),
                    processor,
                }
            }
            OpClass::DataRead | OpClass::DataUpdate | OpClass::DataDelete | OpClass::MetadataUpdate => {
                let unit = match pick(&mut rng, &live) {
                    Some(idx) if class == OpClass::DataDelete => live.swap_remove(idx),
                    Some(idx) => live[idx].clone(),
                    // Nothing left to target; the op will fail and be counted.
                    None => load_unit_id(spec.n_records),
                };
                let (purpose, processor) = assignment(spec.seed, &unit);
                let purpose = purpose.to_owned();
                match class {
                    OpClass::DataRead => Op::Read { unit, purpose, processor },
                    OpClass::DataUpdate => {
                        let v = versions.entry(unit.clone()).or_insert(0);
                        *v += 1;
                        Op::Update {
                            unit,
                            purpose,
                            processor,
                            version: *v,
                        }
                    }
                    OpClass::DataDelete => Op::Delete { unit },
                    _ => {
                        if rng.random_bool(0.5) {
                            Op::AddPolicy {
                                unit,
                                purpose: PURPOSES[rng.random_range(0..PURPOSES.len())].to_owned(),
                                processor: rng.random_range(0..PROCESSORS as u32),
                            }
                        } else {
                            Op::ExtendPolicy {
                                unit,
                                purpose,
                                processor,
                                days: 30,
                            }
                        }
                    }
                }
            }
            OpClass::MetadataRead => Op::ReadByMetadata {
                purpose: PURPOSES[rng.random_range(0..PURPOSES.len())].to_owned(),
                processor: rng.random_range(0..PROCESSORS as u32),
            },
        };
        ops.push(TimedOp { time, op });
    }
    Ok(ops)
}

pub fn write_stream(out: &mut impl Write, ops: &[TimedOp]) -> Result<()> {
    for op in ops {
        serde_json::to_writer(&mut *out, op)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
