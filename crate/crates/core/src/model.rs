//! Domain types for data units, policies and action records, plus the pure
//! predicates evaluated over them.
//!
//! A data unit is the tuple `(S, O, V, P)`: its data-subjects, origins,
//! time-ordered values and attached policies. Everything here is a plain value
//! type; the storage engine and ledger decide where these live.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs)
    }

    pub const fn secs(self) -> u64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp().max(0) as u64)
    }

    /// Accepts RFC 3339 (`2023-02-26T00:10:00Z`), a naive `YYYY-MM-DDTHH:MM:SS`
    /// read as UTC, or a bare date at midnight UTC.
    pub fn parse_iso(s: &str) -> Result<Self> {
        let s = s.trim();
        let secs = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            dt.timestamp()
        } else if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
            dt.and_utc().timestamp()
        } else if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            d.and_hms_opt(0, 0, 0)
                .expect("midnight is valid")
                .and_utc()
                .timestamp()
        } else {
            return Err(Error::InvalidTime(s.to_owned()));
        };
        if secs < 0 {
            return Err(Error::InvalidTime(s.to_owned()));
        }
        Ok(Timestamp(secs as u64))
    }

    pub fn to_iso(self) -> String {
        match Utc.timestamp_opt(self.0 as i64, 0).single() {
            Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            None => format!("@{}", self.0),
        }
    }

    pub fn saturating_add(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    DataSubject,
    Controller,
    Processor,
    Auditor,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::DataSubject => "data-subject",
            EntityKind::Controller => "controller",
            EntityKind::Processor => "processor",
            EntityKind::Auditor => "auditor",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            EntityKind::DataSubject => 0,
            EntityKind::Controller => 1,
            EntityKind::Processor => 2,
            EntityKind::Auditor => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => EntityKind::DataSubject,
            1 => EntityKind::Controller,
            2 => EntityKind::Processor,
            3 => EntityKind::Auditor,
            _ => return None,
        })
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data-subject" | "subject" => Ok(EntityKind::DataSubject),
            "controller" => Ok(EntityKind::Controller),
            "processor" => Ok(EntityKind::Processor),
            "auditor" => Ok(EntityKind::Auditor),
            other => Err(Error::UnknownEntityKind(other.to_owned())),
        }
    }
}

/// A role-holder: data-subject, controller, processor or auditor.
///
/// Textual form is `kind:id`, e.g. `controller:Netflix`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId {
    kind: EntityKind,
    id: String,
}

impl EntityId {
    pub fn new(kind: EntityKind, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::EmptyEntity);
        }
        Ok(EntityId { kind, id })
    }

    pub fn subject(id: impl Into<String>) -> Result<Self> {
        Self::new(EntityKind::DataSubject, id)
    }

    pub fn controller(id: impl Into<String>) -> Result<Self> {
        Self::new(EntityKind::Controller, id)
    }

    pub fn processor(id: impl Into<String>) -> Result<Self> {
        Self::new(EntityKind::Processor, id)
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.id)
    }
}

impl FromStr for EntityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| Error::UnknownEntityKind(s.to_owned()))?;
        EntityId::new(kind.parse()?, id)
    }
}

impl Serialize for EntityId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Purpose of processing. `compliance-erase` is reserved for the erasure
/// deadline policy and for erase actions required by regulation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Purpose(String);

impl Purpose {
    pub const COMPLIANCE_ERASE: &'static str = "compliance-erase";

    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::EmptyPurpose);
        }
        Ok(Purpose(name))
    }

    pub fn compliance_erase() -> Self {
        Purpose(Self::COMPLIANCE_ERASE.to_owned())
    }

    pub fn is_compliance_erase(&self) -> bool {
        self.0 == Self::COMPLIANCE_ERASE
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Purpose {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Purpose::new(s)
    }
}

impl From<Purpose> for String {
    fn from(p: Purpose) -> String {
        p.0
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Purpose {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Purpose::new(s)
    }
}

/// `⟨purpose, entity, begin, end⟩`: `entity` may act on the unit for `purpose`
/// at any time in the closed window `[begin, end]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PolicyTuple {
    purpose: Purpose,
    entity: EntityId,
    begin: Timestamp,
    end: Timestamp,
}

impl PolicyTuple {
    pub fn new(purpose: Purpose, entity: EntityId, begin: Timestamp, end: Timestamp) -> Result<Self> {
        if begin > end {
            return Err(Error::InvalidWindow { begin, end });
        }
        Ok(PolicyTuple {
            purpose,
            entity,
            begin,
            end,
        })
    }

    pub fn purpose(&self) -> &Purpose {
        &self.purpose
    }

    pub fn entity(&self) -> &EntityId {
        &self.entity
    }

    pub fn begin(&self) -> Timestamp {
        self.begin
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn is_active(&self, t: Timestamp) -> bool {
        policy_active(self, t)
    }

    pub fn grants(&self, purpose: &Purpose, entity: &EntityId) -> bool {
        &self.purpose == purpose && &self.entity == entity
    }

    /// Same grant with the window moved; used for metadata updates.
    pub fn with_window(&self, begin: Timestamp, end: Timestamp) -> Result<Self> {
        PolicyTuple::new(self.purpose.clone(), self.entity.clone(), begin, end)
    }
}

/// Textual form `purpose,kind:id,begin,end` with ISO-8601 times.
impl FromStr for PolicyTuple {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidUnit(format!(
                "policy `{s}` must be purpose,kind:id,begin,end"
            )));
        }
        PolicyTuple::new(
            Purpose::new(parts[0])?,
            parts[1].parse()?,
            Timestamp::parse_iso(parts[2])?,
            Timestamp::parse_iso(parts[3])?,
        )
    }
}

pub fn policy_active(policy: &PolicyTuple, t: Timestamp) -> bool {
    policy.begin <= t && t <= policy.end
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(String);

impl UnitId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidUnit("unit id must be non-empty".into()));
        }
        Ok(UnitId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for UnitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UnitId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Base,
    Derived,
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Version {
    pub value: Vec<u8>,
    pub time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataUnit {
    pub id: UnitId,
    pub category: Category,
    pub subjects: BTreeSet<EntityId>,
    pub origins: BTreeSet<String>,
    pub values: Vec<Version>,
    pub policies: BTreeSet<PolicyTuple>,
}

impl DataUnit {
    /// A base unit: exactly one data-subject and an initial value.
    pub fn base(
        id: UnitId,
        subject: EntityId,
        origin: impl Into<String>,
        value: Vec<u8>,
        time: Timestamp,
        policies: impl IntoIterator<Item = PolicyTuple>,
    ) -> Result<Self> {
        let unit = DataUnit {
            id,
            category: Category::Base,
            subjects: BTreeSet::from([subject]),
            origins: BTreeSet::from([origin.into()]),
            values: vec![Version { value, time }],
            policies: policies.into_iter().collect(),
        };
        unit.validate()?;
        Ok(unit)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category == Category::Base {
            if self.subjects.len() != 1 {
                return Err(Error::InvalidUnit(format!(
                    "base unit {} must have exactly one data-subject, has {}",
                    self.id,
                    self.subjects.len()
                )));
            }
        }
        if let Some(s) = self.subjects.iter().find(|s| s.kind() != EntityKind::DataSubject) {
            return Err(Error::InvalidUnit(format!(
                "subject {s} of {} is not a data-subject",
                self.id
            )));
        }
        if self.values.windows(2).any(|w| w[0].time >= w[1].time) {
            return Err(Error::InvalidUnit(format!(
                "value timestamps of {} must be strictly increasing",
                self.id
            )));
        }
        Ok(())
    }

    /// Latest value at or before `t`.
    pub fn value_at(&self, t: Timestamp) -> Option<&[u8]> {
        self.values
            .iter()
            .rev()
            .find(|v| v.time <= t)
            .map(|v| v.value.as_slice())
    }

    pub fn current_value(&self) -> Option<&[u8]> {
        self.values.last().map(|v| v.value.as_slice())
    }

    pub fn active_policies(&self, t: Timestamp) -> Vec<PolicyTuple> {
        self.policies.iter().filter(|p| policy_active(p, t)).cloned().collect()
    }

    pub fn personal_bytes(&self) -> u64 {
        self.values.iter().map(|v| v.value.len() as u64).sum()
    }

    pub fn erase_deadline(&self) -> Option<Timestamp> {
        self.policies
            .iter()
            .filter(|p| p.purpose.is_compliance_erase())
            .map(|p| p.end)
            .max()
    }
}

/// `X(t) = (S(t), O(t), V(t), P(t))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataUnitState {
    pub subjects: BTreeSet<EntityId>,
    pub origins: BTreeSet<String>,
    pub value: Option<Vec<u8>>,
    pub active_policies: Vec<PolicyTuple>,
}

pub fn state_at(unit: &DataUnit, t: Timestamp) -> DataUnitState {
    DataUnitState {
        subjects: unit.subjects.clone(),
        origins: unit.origins.clone(),
        value: unit.value_at(t).map(<[u8]>::to_vec),
        active_policies: unit.active_policies(t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureMode {
    ReversiblyInaccessible,
    Delete,
    StrongDelete,
    PermanentDelete,
}

impl ErasureMode {
    pub const ALL: [ErasureMode; 4] = [
        ErasureMode::ReversiblyInaccessible,
        ErasureMode::Delete,
        ErasureMode::StrongDelete,
        ErasureMode::PermanentDelete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErasureMode::ReversiblyInaccessible => "reversibly_inaccessible",
            ErasureMode::Delete => "delete",
            ErasureMode::StrongDelete => "strong_delete",
            ErasureMode::PermanentDelete => "permanent_delete",
        }
    }

    /// Strictness: each mode's guarantees include those of every weaker mode.
    pub fn implies(self, weaker: ErasureMode) -> bool {
        self >= weaker
    }
}

impl fmt::Display for ErasureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErasureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ErasureMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown erasure mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    Create,
    Read,
    UpdateValue,
    UpdateMetadata,
    Erase(ErasureMode),
    Share,
    Contract,
}

/// `ActionKind` with the erasure mode dropped, for purpose maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionClass {
    Create,
    Read,
    UpdateValue,
    UpdateMetadata,
    Erase,
    Share,
    Contract,
}

impl ActionKind {
    pub fn class(self) -> ActionClass {
        match self {
            ActionKind::Create => ActionClass::Create,
            ActionKind::Read => ActionClass::Read,
            ActionKind::UpdateValue => ActionClass::UpdateValue,
            ActionKind::UpdateMetadata => ActionClass::UpdateMetadata,
            ActionKind::Erase(_) => ActionClass::Erase,
            ActionKind::Share => ActionClass::Share,
            ActionKind::Contract => ActionClass::Contract,
        }
    }

    pub fn is_erase(self) -> bool {
        matches!(self, ActionKind::Erase(_))
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ActionKind::Create => 0,
            ActionKind::Read => 1,
            ActionKind::UpdateValue => 2,
            ActionKind::UpdateMetadata => 3,
            ActionKind::Erase(ErasureMode::ReversiblyInaccessible) => 4,
            ActionKind::Erase(ErasureMode::Delete) => 5,
            ActionKind::Erase(ErasureMode::StrongDelete) => 6,
            ActionKind::Erase(ErasureMode::PermanentDelete) => 7,
            ActionKind::Share => 8,
            ActionKind::Contract => 9,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ActionKind::Create,
            1 => ActionKind::Read,
            2 => ActionKind::UpdateValue,
            3 => ActionKind::UpdateMetadata,
            4 => ActionKind::Erase(ErasureMode::ReversiblyInaccessible),
            5 => ActionKind::Erase(ErasureMode::Delete),
            6 => ActionKind::Erase(ErasureMode::StrongDelete),
            7 => ActionKind::Erase(ErasureMode::PermanentDelete),
            8 => ActionKind::Share,
            9 => ActionKind::Contract,
            _ => return None,
        })
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionKind::Create => f.write_str("create"),
            ActionKind::Read => f.write_str("read"),
            ActionKind::UpdateValue => f.write_str("update-value"),
            ActionKind::UpdateMetadata => f.write_str("update-metadata"),
            ActionKind::Erase(m) => write!(f, "erase({m})"),
            ActionKind::Share => f.write_str("share"),
            ActionKind::Contract => f.write_str("contract"),
        }
    }
}

pub const DIGEST_LEN: usize = 16;
pub type StateDigest = [u8; DIGEST_LEN];

/// Truncated SHA-256 over the given parts; used as the result-state digest
/// carried by action records in place of raw values.
pub fn state_digest<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> StateDigest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let full = h.finalize();
    let mut out = [0u8; DIGEST_LEN];
    out.copy_from_slice(&full[..DIGEST_LEN]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RedactionReason {
    StrongDelete,
    PermanentDelete,
}

/// `(X, p, e, τ(X), t)` plus whether a regulation required the action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub unit_id: UnitId,
    pub purpose: Purpose,
    pub entity: EntityId,
    pub action: ActionKind,
    pub time: Timestamp,
    pub regulation_required: bool,
    pub digest: StateDigest,
    pub redaction: Option<(RedactionReason, Timestamp)>,
}

impl ActionRecord {
    pub fn new(
        unit_id: UnitId,
        purpose: Purpose,
        entity: EntityId,
        action: ActionKind,
        time: Timestamp,
    ) -> Self {
        ActionRecord {
            unit_id,
            purpose,
            entity,
            action,
            time,
            regulation_required: false,
            digest: [0; DIGEST_LEN],
            redaction: None,
        }
    }

    pub fn regulation_required(mut self, yes: bool) -> Self {
        self.regulation_required = yes;
        self
    }

    pub fn with_digest(mut self, digest: StateDigest) -> Self {
        self.digest = digest;
        self
    }

    pub fn is_redacted(&self) -> bool {
        self.redaction.is_some()
    }
}

/// Optional stricter layer: which action classes each purpose authorizes.
/// Purposes absent from the map authorize nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PurposeMap(pub BTreeMap<Purpose, BTreeSet<ActionClass>>);

impl PurposeMap {
    pub fn allow(mut self, purpose: Purpose, classes: impl IntoIterator<Item = ActionClass>) -> Self {
        self.0.entry(purpose).or_default().extend(classes);
        self
    }

    pub fn authorizes(&self, purpose: &Purpose, action: ActionKind) -> bool {
        self.0
            .get(purpose)
            .is_some_and(|classes| classes.contains(&action.class()))
    }
}

/// True iff some active policy grants `(record.purpose, record.entity)` or the
/// action was required by regulation.
pub fn is_policy_consistent(record: &ActionRecord, state: &DataUnitState) -> bool {
    record.regulation_required
        || state
            .active_policies
            .iter()
            .any(|p| p.grants(&record.purpose, &record.entity))
}

/// `is_policy_consistent`, additionally requiring the purpose map (when given)
/// to authorize the action class. Regulation-required actions bypass the map.
pub fn is_policy_consistent_with(
    record: &ActionRecord,
    state: &DataUnitState,
    purposes: Option<&PurposeMap>,
) -> bool {
    if record.regulation_required {
        return true;
    }
    if let Some(map) = purposes {
        if !map.authorizes(&record.purpose, record.action) {
            return false;
        }
    }
    is_policy_consistent(record, state)
}

/// Records that `derived` was computed from `inputs` by an opaque function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEdge {
    pub derived: UnitId,
    pub inputs: BTreeSet<UnitId>,
    pub function: String,
    pub invertible: bool,
    pub subjects_identifiable: bool,
}

/// Per-(purpose, entity) window intersection across all inputs. An input may
/// hold several windows for the same grant; the result covers exactly the
/// instants at which every input grants it.
fn restrict_policies(inputs: &[&DataUnit]) -> BTreeSet<PolicyTuple> {
    type Grant = (Purpose, EntityId);
    let windows_of = |u: &DataUnit| -> BTreeMap<Grant, Vec<(Timestamp, Timestamp)>> {
        let mut m: BTreeMap<Grant, Vec<_>> = BTreeMap::new();
        for p in &u.policies {
            m.entry((p.purpose.clone(), p.entity.clone()))
                .or_default()
                .push((p.begin, p.end));
        }
        m
    };

    let mut acc = windows_of(inputs[0]);
    for unit in &inputs[1..] {
        let next = windows_of(unit);
        acc = acc
            .into_iter()
            .filter_map(|(grant, ws)| {
                let other = next.get(&grant)?;
                let merged: Vec<_> = ws
                    .iter()
                    .flat_map(|&(b1, f1)| {
                        other.iter().filter_map(move |&(b2, f2)| {
                            let (b, f) = (b1.max(b2), f1.min(f2));
                            (b <= f).then_some((b, f))
                        })
                    })
                    .collect();
                (!merged.is_empty()).then_some((grant, merged))
            })
            .collect();
    }

    acc.into_iter()
        .flat_map(|((purpose, entity), ws)| {
            ws.into_iter().map(move |(begin, end)| PolicyTuple {
                purpose: purpose.clone(),
                entity: entity.clone(),
                begin,
                end,
            })
        })
        .collect()
}

/// Builds the derived unit `Y = f(inputs)` and its provenance edge.
///
/// Subjects and origins are unions over the inputs; policies are the
/// per-grant window intersection. Liveness of the inputs is the caller's
/// concern (the store checks it). An invertible function must leave subjects
/// identifiable, since inverting it recovers the inputs.
pub fn derive_unit(
    id: UnitId,
    inputs: &[&DataUnit],
    function: impl Into<String>,
    value: Vec<u8>,
    invertible: bool,
    subjects_identifiable: bool,
    time: Timestamp,
) -> Result<(DataUnit, ProvenanceEdge)> {
    if inputs.is_empty() {
        return Err(Error::EmptyInputs);
    }
    if inputs.iter().any(|u| u.id == id) {
        return Err(Error::InvalidProvenance(format!("{id} cannot derive from itself")));
    }
    if invertible && !subjects_identifiable {
        return Err(Error::InvalidProvenance(format!(
            "{id}: an invertible derivation keeps its subjects identifiable"
        )));
    }
    let unit = DataUnit {
        id: id.clone(),
        category: Category::Derived,
        subjects: inputs.iter().flat_map(|u| u.subjects.iter().cloned()).collect(),
        origins: inputs.iter().flat_map(|u| u.origins.iter().cloned()).collect(),
        values: vec![Version { value, time }],
        policies: restrict_policies(inputs),
    };
    let edge = ProvenanceEdge {
        derived: id,
        inputs: inputs.iter().map(|u| u.id.clone()).collect(),
        function: function.into(),
        invertible,
        subjects_identifiable,
    };
    Ok((unit, edge))
}

/// Acyclic provenance relation over unit ids.
#[derive(Debug, Clone, Default)]
pub struct ProvenanceGraph {
    edges: BTreeMap<UnitId, ProvenanceEdge>,
    children: BTreeMap<UnitId, BTreeSet<UnitId>>,
}

impl ProvenanceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, edge: ProvenanceEdge) -> Result<()> {
        if edge.inputs.is_empty() {
            return Err(Error::EmptyInputs);
        }
        if edge.inputs.contains(&edge.derived) {
            return Err(Error::InvalidProvenance(format!(
                "{} lists itself as an input",
                edge.derived
            )));
        }
        if self.edges.contains_key(&edge.derived) {
            return Err(Error::InvalidProvenance(format!(
                "{} already has a provenance edge",
                edge.derived
            )));
        }
        // A cycle appears iff some input is already downstream of `derived`.
        let downstream = self.descendants(&edge.derived);
        if let Some(bad) = edge.inputs.iter().find(|i| downstream.contains(*i)) {
            return Err(Error::InvalidProvenance(format!(
                "edge {} <- {bad} would close a cycle",
                edge.derived
            )));
        }
        for input in &edge.inputs {
            self.children
                .entry(input.clone())
                .or_default()
                .insert(edge.derived.clone());
        }
        self.edges.insert(edge.derived.clone(), edge);
        Ok(())
    }

    pub fn edge(&self, derived: &UnitId) -> Option<&ProvenanceEdge> {
        self.edges.get(derived)
    }

    pub fn edges(&self) -> impl Iterator<Item = &ProvenanceEdge> {
        self.edges.values()
    }

    pub fn children(&self, unit: &UnitId) -> impl Iterator<Item = &UnitId> {
        self.children.get(unit).into_iter().flatten()
    }

    /// Every unit reachable from `unit` along input→derived edges, excluding
    /// `unit` itself.
    pub fn descendants(&self, unit: &UnitId) -> BTreeSet<UnitId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&UnitId> = self.children(unit).collect();
        while let Some(next) = stack.pop() {
            if seen.insert(next.clone()) {
                stack.extend(self.children(next));
            }
        }
        seen
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse_iso(s).unwrap()
    }

    fn billing() -> Purpose {
        Purpose::new("billing").unwrap()
    }

    fn netflix() -> EntityId {
        EntityId::controller("Netflix").unwrap()
    }

    fn aws() -> EntityId {
        EntityId::processor("AWS").unwrap()
    }

    fn pi1() -> PolicyTuple {
        PolicyTuple::new(billing(), netflix(), ts("2023-01-01"), ts("2024-01-01")).unwrap()
    }

    fn pi2() -> PolicyTuple {
        PolicyTuple::new(Purpose::new("retention").unwrap(), aws(), ts("2023-01-01"), ts("2024-01-01"))
            .unwrap()
    }

    fn credit_card() -> DataUnit {
        DataUnit::base(
            UnitId::new("credit_card").unwrap(),
            EntityId::subject("1234").unwrap(),
            "0",
            b"credit_card_info".to_vec(),
            ts("2023-01-02"),
            [pi1(), pi2()],
        )
        .unwrap()
    }

    fn window(purpose: &str, entity: &EntityId, b: u64, f: u64) -> PolicyTuple {
        PolicyTuple::new(Purpose::new(purpose).unwrap(), entity.clone(), Timestamp(b), Timestamp(f))
            .unwrap()
    }

    fn unit_with(id: &str, subject: &str, policies: Vec<PolicyTuple>) -> DataUnit {
        DataUnit::base(
            UnitId::new(id).unwrap(),
            EntityId::subject(subject).unwrap(),
            format!("origin-{id}"),
            id.as_bytes().to_vec(),
            Timestamp(0),
            policies,
        )
        .unwrap()
    }

    #[test]
    fn iso_round_trip() {
        let t = ts("2023-02-26T00:10:00Z");
        assert_eq!(t.to_iso(), "2023-02-26T00:10:00Z");
        assert_eq!(ts("2023-02-26T00:10:00"), t);
        assert_eq!(ts("1970-01-01"), Timestamp(0));
        assert!(Timestamp::parse_iso("022623").is_err());
    }

    #[test]
    fn netflix_billing_window() {
        assert!(policy_active(&pi1(), ts("2023-02-26")));
        assert!(!policy_active(&pi1(), ts("2022-12-31")));
        let point = window("billing", &netflix(), 7, 7);
        assert!(policy_active(&point, Timestamp(7)));
    }

    #[test]
    fn reversed_window_rejected() {
        let err = PolicyTuple::new(billing(), netflix(), Timestamp(5), Timestamp(4)).unwrap_err();
        assert!(matches!(err, Error::InvalidWindow { .. }));
    }

    #[test]
    fn policy_active_exhaustive_small_grid() {
        let e = netflix();
        for b in 0..12u64 {
            for f in b..12 {
                let p = window("billing", &e, b, f);
                for t in 0..14u64 {
                    assert_eq!(policy_active(&p, Timestamp(t)), (b..=f).contains(&t));
                }
            }
        }
    }

    #[test]
    fn credit_card_state() {
        let x = credit_card();
        let s = state_at(&x, ts("2023-02-26T00:10:00Z"));
        assert_eq!(s.subjects, BTreeSet::from([EntityId::subject("1234").unwrap()]));
        assert_eq!(s.origins, BTreeSet::from(["0".to_owned()]));
        assert_eq!(s.value.as_deref(), Some(&b"credit_card_info"[..]));
        assert_eq!(s.active_policies.len(), 2);

        let before = state_at(&x, ts("2023-01-01"));
        assert_eq!(before.value, None);
        assert_eq!(before.active_policies.len(), 2);

        let after = state_at(&x, ts("2024-06-01"));
        assert!(after.active_policies.is_empty());
    }

    #[test]
    fn policy_consistency_examples() {
        let x = credit_card();
        let t = ts("2023-02-26T00:10:00Z");
        let read = ActionRecord::new(x.id.clone(), billing(), netflix(), ActionKind::Read, t);
        assert!(is_policy_consistent(&read, &state_at(&x, t)));

        let late = ts("2025-01-01");
        let read_late = ActionRecord::new(x.id.clone(), billing(), netflix(), ActionKind::Read, late);
        assert!(!is_policy_consistent(&read_late, &state_at(&x, late)));

        let erase = ActionRecord::new(
            x.id.clone(),
            Purpose::compliance_erase(),
            netflix(),
            ActionKind::Erase(ErasureMode::Delete),
            late,
        )
        .regulation_required(true);
        assert!(is_policy_consistent(&erase, &state_at(&x, late)));
    }

    #[test]
    fn wrong_entity_or_purpose_is_inconsistent() {
        let x = credit_card();
        let t = ts("2023-03-01");
        let by_aws = ActionRecord::new(x.id.clone(), billing(), aws(), ActionKind::Read, t);
        assert!(!is_policy_consistent(&by_aws, &state_at(&x, t)));
    }

    #[test]
    fn purpose_map_is_stricter() {
        let x = credit_card();
        let t = ts("2023-03-01");
        let map = PurposeMap::default().allow(billing(), [ActionClass::Read]);
        let read = ActionRecord::new(x.id.clone(), billing(), netflix(), ActionKind::Read, t);
        let share = ActionRecord::new(x.id.clone(), billing(), netflix(), ActionKind::Share, t);
        let s = state_at(&x, t);
        assert!(is_policy_consistent_with(&read, &s, Some(&map)));
        assert!(is_policy_consistent(&share, &s));
        assert!(!is_policy_consistent_with(&share, &s, Some(&map)));
    }

    #[test]
    fn base_unit_invariants() {
        let mut x = credit_card();
        x.subjects.insert(EntityId::subject("5678").unwrap());
        assert!(x.validate().is_err());

        let mut y = credit_card();
        y.values.push(Version {
            value: b"x".to_vec(),
            time: y.values[0].time,
        });
        assert!(y.validate().is_err());

        let bad_subject = DataUnit::base(
            UnitId::new("u").unwrap(),
            netflix(),
            "0",
            vec![],
            Timestamp(0),
            [],
        );
        assert!(bad_subject.is_err());
    }

    #[test]
    fn derive_unions_subjects() {
        let e = netflix();
        let a = unit_with("a", "1234", vec![window("billing", &e, 0, 100)]);
        let b = unit_with("b", "5678", vec![window("billing", &e, 0, 100)]);
        let (y, edge) =
            derive_unit(UnitId::new("y").unwrap(), &[&a, &b], "join", vec![1], false, true, Timestamp(5))
                .unwrap();
        assert_eq!(
            y.subjects,
            BTreeSet::from([EntityId::subject("1234").unwrap(), EntityId::subject("5678").unwrap()])
        );
        assert_eq!(y.origins.len(), 2);
        assert_eq!(y.category, Category::Derived);
        assert_eq!(edge.inputs.len(), 2);
        assert!(edge.subjects_identifiable);
    }

    #[test]
    fn derive_single_input_keeps_policies() {
        let e = netflix();
        let a = unit_with("a", "1234", vec![window("billing", &e, 0, 100), window("ads", &e, 5, 9)]);
        let (y, _) =
            derive_unit(UnitId::new("y").unwrap(), &[&a], "copy", vec![], true, true, Timestamp(1)).unwrap();
        assert_eq!(y.subjects, a.subjects);
        assert_eq!(y.policies, a.policies);
    }

    #[test]
    fn derive_errors() {
        let a = unit_with("a", "1", vec![]);
        assert!(matches!(
            derive_unit(UnitId::new("y").unwrap(), &[], "f", vec![], false, true, Timestamp(0)),
            Err(Error::EmptyInputs)
        ));
        assert!(derive_unit(UnitId::new("a").unwrap(), &[&a], "f", vec![], false, true, Timestamp(0)).is_err());
        assert!(derive_unit(UnitId::new("y").unwrap(), &[&a], "f", vec![], true, false, Timestamp(0)).is_err());
    }

    /// Instants in `[0, horizon)` at which some policy of `unit` grants (p, e).
    fn granted_instants(policies: &BTreeSet<PolicyTuple>, p: &Purpose, e: &EntityId, horizon: u64) -> BTreeSet<u64> {
        (0..horizon)
            .filter(|&t| policies.iter().any(|pi| pi.grants(p, e) && policy_active(pi, Timestamp(t))))
            .collect()
    }

    #[test]
    fn derive_intersects_windows() {
        let e = netflix();
        let a = unit_with("a", "1", vec![window("billing", &e, 10, 20)]);
        let b = unit_with("b", "2", vec![window("billing", &e, 15, 30)]);
        let (y, _) =
            derive_unit(UnitId::new("y").unwrap(), &[&a, &b], "f", vec![], false, true, Timestamp(0)).unwrap();

        // brute-force: instants granted by every input
        let p = billing();
        let expected: BTreeSet<u64> = granted_instants(&a.policies, &p, &e, 40)
            .intersection(&granted_instants(&b.policies, &p, &e, 40))
            .copied()
            .collect();
        assert_eq!(expected, (15..=20).collect());
        assert_eq!(granted_instants(&y.policies, &p, &e, 40), expected);
        assert!(y.policies.contains(&window("billing", &e, 15, 20)));
    }

    #[test]
    fn derive_drops_unshared_and_disjoint_grants() {
        let e = netflix();
        let a = unit_with("a", "1", vec![window("billing", &e, 0, 5), window("ads", &e, 0, 5)]);
        let b = unit_with("b", "2", vec![window("billing", &e, 6, 9)]);
        let (y, _) =
            derive_unit(UnitId::new("y").unwrap(), &[&a, &b], "f", vec![], false, true, Timestamp(0)).unwrap();
        assert!(y.policies.is_empty());
    }

    #[test]
    fn graph_rejects_cycles() {
        let id = |s: &str| UnitId::new(s).unwrap();
        let edge = |d: &str, ins: &[&str]| ProvenanceEdge {
            derived: id(d),
            inputs: ins.iter().map(|s| id(s)).collect(),
            function: "f".into(),
            invertible: false,
            subjects_identifiable: true,
        };
        let mut g = ProvenanceGraph::new();
        g.insert(edge("b", &["a"])).unwrap();
        g.insert(edge("c", &["b"])).unwrap();
        assert!(g.insert(edge("a", &["c"])).is_err());
        assert!(g.insert(edge("d", &["d"])).is_err());
        assert_eq!(g.descendants(&id("a")), BTreeSet::from([id("b"), id("c")]));
    }

    fn arb_policy(entities: Vec<EntityId>) -> impl Strategy<Value = PolicyTuple> {
        (0usize..2, 0..entities.len(), 0u64..30, 0u64..30).prop_map(move |(p, e, x, y)| {
            let purpose = ["billing", "ads"][p];
            window(purpose, &entities[e], x.min(y), x.max(y))
        })
    }

    proptest! {
        #[test]
        fn active_policies_match_filter(policies in prop::collection::vec(arb_policy(vec![netflix(), aws()]), 0..8), t in 0u64..32) {
            let x = unit_with("x", "1", policies.clone());
            let brute: BTreeSet<PolicyTuple> = policies.into_iter().filter(|p| p.begin() <= Timestamp(t) && Timestamp(t) <= p.end()).collect();
            let got: BTreeSet<PolicyTuple> = state_at(&x, Timestamp(t)).active_policies.into_iter().collect();
            prop_assert_eq!(got, brute);
        }

        #[test]
        fn consistency_monotone_in_policies(
            base in prop::collection::vec(arb_policy(vec![netflix(), aws()]), 0..6),
            extra in prop::collection::vec(arb_policy(vec![netflix(), aws()]), 0..6),
            t in 0u64..32,
            reg in any::<bool>(),
        ) {
            let small = unit_with("x", "1", base.clone());
            let big = unit_with("x", "1", base.into_iter().chain(extra).collect());
            let r = ActionRecord::new(small.id.clone(), billing(), netflix(), ActionKind::Read, Timestamp(t)).regulation_required(reg);
            if is_policy_consistent(&r, &state_at(&small, Timestamp(t))) {
                prop_assert!(is_policy_consistent(&r, &state_at(&big, Timestamp(t))));
            }
        }

        #[test]
        fn derived_policies_are_restrictions(
            inputs in prop::collection::vec(prop::collection::vec(arb_policy(vec![netflix(), aws()]), 0..4), 1..4),
        ) {
            let units: Vec<DataUnit> = inputs.into_iter().enumerate()
                .map(|(i, ps)| unit_with(&format!("in{i}"), &format!("s{i}"), ps))
                .collect();
            let refs: Vec<&DataUnit> = units.iter().collect();
            let (y, _) = derive_unit(UnitId::new("y").unwrap(), &refs, "f", vec![], false, true, Timestamp(0)).unwrap();
            for u in &units {
                prop_assert!(y.subjects.is_superset(&u.subjects));
            }
            for py in &y.policies {
                for u in &units {
                    let covered = u.policies.iter().any(|pi| pi.grants(py.purpose(), py.entity())
                        && pi.begin() <= py.begin() && py.end() <= pi.end());
                    prop_assert!(covered);
                }
            }
            // exact: granted instants of Y equal the intersection over inputs
            for p in [billing(), Purpose::new("ads").unwrap()] {
                for e in [netflix(), aws()] {
                    let mut expect = (0..32).collect::<BTreeSet<u64>>();
                    for u in &units {
                        expect = expect.intersection(&granted_instants(&u.policies, &p, &e, 32)).copied().collect();
                    }
                    prop_assert_eq!(granted_instants(&y.policies, &p, &e, 32), expect);
                }
            }
        }
    }
}
