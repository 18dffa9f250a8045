//! Regulation invariants and erasure properties as decidable checks over a
//! read-only snapshot of a store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    is_policy_consistent_with, policy_active, ActionKind, ActionRecord, Category, DataUnit, DataUnitState,
    EntityId, ErasureMode, PolicyTuple, ProvenanceEdge, Purpose, PurposeMap, Timestamp, UnitId,
};
use crate::store::{Derivation, ErasureStatus, Store, StoreConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitView {
    pub category: Category,
    pub policies: BTreeSet<PolicyTuple>,
    pub status: ErasureStatus,
    pub escrowed: bool,
}

/// Everything the checks look at. Build one with [`Store::snapshot`] or by
/// hand.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub units: BTreeMap<UnitId, UnitView>,
    pub edges: Vec<ProvenanceEdge>,
    pub records: Vec<ActionRecord>,
    pub purpose_map: Option<PurposeMap>,
    /// Metadata units skip the policy-consistency and deadline checks.
    pub exempt_metadata: bool,
}

impl Snapshot {
    fn exempt(&self, unit: &UnitId) -> bool {
        self.exempt_metadata
            && self
                .units
                .get(unit)
                .is_some_and(|u| u.category == Category::Metadata)
    }

    fn active_at(&self, unit: &UnitId, t: Timestamp) -> Vec<PolicyTuple> {
        self.units
            .get(unit)
            .map(|u| u.policies.iter().filter(|p| policy_active(p, t)).cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViolationKind {
    #[serde(rename = "G6-inconsistent-action")]
    G6InconsistentAction,
    #[serde(rename = "G17-missing-policy")]
    G17MissingPolicy,
    #[serde(rename = "G17-late-erase")]
    G17LateErase,
    #[serde(rename = "G17-missing-erase")]
    G17MissingErase,
    #[serde(rename = "erasure-inconsistent-read")]
    ErasureInconsistentRead,
    #[serde(rename = "erasure-inconsistent-inference")]
    ErasureInconsistentInference,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 6] = [
        ViolationKind::G6InconsistentAction,
        ViolationKind::G17MissingPolicy,
        ViolationKind::G17LateErase,
        ViolationKind::G17MissingErase,
        ViolationKind::ErasureInconsistentRead,
        ViolationKind::ErasureInconsistentInference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::G6InconsistentAction => "G6-inconsistent-action",
            ViolationKind::G17MissingPolicy => "G17-missing-policy",
            ViolationKind::G17LateErase => "G17-late-erase",
            ViolationKind::G17MissingErase => "G17-missing-erase",
            ViolationKind::ErasureInconsistentRead => "erasure-inconsistent-read",
            ViolationKind::ErasureInconsistentInference => "erasure-inconsistent-inference",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    /// Ledger position of the offending record.
    Position(u64),
    /// Derived unit of a provenance edge.
    Edge(UnitId),
    /// The unit itself, when no record or edge is involved.
    Unit(UnitId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub unit_id: UnitId,
    pub evidence: Vec<Evidence>,
    pub detected_at: Timestamp,
}

impl Violation {
    fn sort_key(&self) -> (ViolationKind, &UnitId, Option<&Evidence>) {
        (self.kind, &self.unit_id, self.evidence.first())
    }
}

pub fn sort_violations(v: &mut [Violation]) {
    v.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

/// One violation per record that no active policy backs and no regulation
/// required. Records of units missing from the snapshot have no policies.
pub fn check_g6(snap: &Snapshot, now: Timestamp) -> Vec<Violation> {
    snap.records
        .iter()
        .enumerate()
        .filter(|(_, r)| !snap.exempt(&r.unit_id))
        .filter(|(_, r)| {
            let state = DataUnitState {
                subjects: BTreeSet::new(),
                origins: BTreeSet::new(),
                value: None,
                active_policies: snap.active_at(&r.unit_id, r.time),
            };
            !is_policy_consistent_with(r, &state, snap.purpose_map.as_ref())
        })
        .map(|(i, r)| Violation {
            kind: ViolationKind::G6InconsistentAction,
            unit_id: r.unit_id.clone(),
            evidence: vec![Evidence::Position(i as u64)],
            detected_at: now,
        })
        .collect()
}

fn positions_by_unit(records: &[ActionRecord]) -> BTreeMap<&UnitId, Vec<usize>> {
    let mut m: BTreeMap<&UnitId, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        m.entry(&r.unit_id).or_default().push(i);
    }
    m
}

/// Deadline check per unit. The deadline is the latest end among the unit's
/// compliance-erase policies; an erase in any mode satisfies it when it is
/// the unit's final record and falls on or before the deadline.
pub fn check_g17(snap: &Snapshot, now: Timestamp) -> Vec<Violation> {
    let by_unit = positions_by_unit(&snap.records);
    let mut out = Vec::new();
    for (id, unit) in &snap.units {
        if snap.exempt(id) {
            continue;
        }
        let deadline = unit
            .policies
            .iter()
            .filter(|p| p.purpose().is_compliance_erase())
            .map(|p| p.end())
            .max();
        let Some(deadline) = deadline else {
            out.push(Violation {
                kind: ViolationKind::G17MissingPolicy,
                unit_id: id.clone(),
                evidence: vec![Evidence::Unit(id.clone())],
                detected_at: now,
            });
            continue;
        };
        let last = by_unit.get(id).and_then(|p| p.last()).map(|&i| (i, &snap.records[i]));
        match last {
            Some((_, r)) if r.action.is_erase() && r.time <= deadline => {}
            Some((i, r)) if r.action.is_erase() => out.push(Violation {
                kind: ViolationKind::G17LateErase,
                unit_id: id.clone(),
                evidence: vec![Evidence::Position(i as u64)],
                detected_at: now,
            }),
            _ if deadline < now => out.push(Violation {
                kind: ViolationKind::G17MissingErase,
                unit_id: id.clone(),
                evidence: vec![last.map_or(Evidence::Unit(id.clone()), |(i, _)| Evidence::Position(i as u64))],
                detected_at: now,
            }),
            _ => {}
        }
    }
    out
}

/// Reads performed while the unit had no active policy at all.
pub fn detect_ir(snap: &Snapshot, now: Timestamp) -> Vec<Violation> {
    snap.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.action == ActionKind::Read && snap.active_at(&r.unit_id, r.time).is_empty())
        .map(|(i, r)| Violation {
            kind: ViolationKind::ErasureInconsistentRead,
            unit_id: r.unit_id.clone(),
            evidence: vec![Evidence::Position(i as u64)],
            detected_at: now,
        })
        .collect()
}

/// Erased units still reconstructible from a live unit: one reachable from
/// the erased unit along invertible edges only. Intermediate units may be
/// erased themselves. One violation per erased unit, listing every such
/// live unit.
pub fn detect_ii(snap: &Snapshot, now: Timestamp) -> Vec<Violation> {
    let mut forward: BTreeMap<&UnitId, Vec<&UnitId>> = BTreeMap::new();
    for edge in snap.edges.iter().filter(|e| e.invertible) {
        for input in &edge.inputs {
            forward.entry(input).or_default().push(&edge.derived);
        }
    }
    let live = |u: &UnitId| snap.units.get(u).is_some_and(|v| v.status.is_live());
    let mut out = Vec::new();
    for (id, view) in &snap.units {
        if view.status.is_live() || !forward.contains_key(id) {
            continue;
        }
        let mut seen: BTreeSet<&UnitId> = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(u) = stack.pop() {
            for &d in forward.get(u).into_iter().flatten() {
                if seen.insert(d) {
                    stack.push(d);
                }
            }
        }
        let witnesses: Vec<Evidence> = seen.into_iter().filter(|d| live(d)).map(|d| Evidence::Edge(d.clone())).collect();
        if !witnesses.is_empty() {
            out.push(Violation {
                kind: ViolationKind::ErasureInconsistentInference,
                unit_id: id.clone(),
                evidence: witnesses,
                detected_at: now,
            });
        }
    }
    out
}

/// Whether an erased unit can be recovered exactly, i.e. holds an escrow key.
pub fn classify_inv(snap: &Snapshot, unit: &UnitId) -> Result<bool> {
    let view = snap.units.get(unit).ok_or_else(|| Error::UnknownUnit(unit.clone()))?;
    if view.status.is_live() {
        return Err(Error::UnitLive(unit.clone()));
    }
    Ok(view.escrowed)
}

/// Every check, sorted by (kind, unit, first evidence).
pub fn audit(snap: &Snapshot, now: Timestamp) -> Vec<Violation> {
    let mut all = check_g6(snap, now);
    all.extend(check_g17(snap, now));
    all.extend(detect_ir(snap, now));
    all.extend(detect_ii(snap, now));
    sort_violations(&mut all);
    all
}

pub fn distinct_kinds(violations: &[Violation]) -> BTreeSet<ViolationKind> {
    violations.iter().map(|v| v.kind).collect()
}

/// One JSON object per violation; `detected_at` only when asked for, so the
/// default report depends on store content alone.
pub fn write_report(out: &mut impl Write, violations: &[Violation], with_time: bool) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        kind: ViolationKind,
        unit_id: &'a UnitId,
        evidence: &'a [Evidence],
        #[serde(skip_serializing_if = "Option::is_none")]
        detected_at: Option<String>,
    }
    for v in violations {
        serde_json::to_writer(
            &mut *out,
            &Line {
                kind: v.kind,
                unit_id: &v.unit_id,
                evidence: &v.evidence,
                detected_at: with_time.then(|| v.detected_at.to_iso()),
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ErasureCharacterization {
    pub mode: ErasureMode,
    /// Erasure-inconsistent read possible.
    pub ir: bool,
    /// Erasure-inconsistent inference possible.
    pub ii: bool,
    /// Transformation invertible.
    pub inv: bool,
}

impl ErasureCharacterization {
    /// The reference row each mode must reproduce.
    pub fn expected(mode: ErasureMode) -> Self {
        let (ir, ii, inv) = match mode {
            ErasureMode::ReversiblyInaccessible => (false, true, true),
            ErasureMode::Delete => (false, true, false),
            ErasureMode::StrongDelete | ErasureMode::PermanentDelete => (false, false, false),
        };
        ErasureCharacterization { mode, ir, ii, inv }
    }
}

/// Runs the canned scenario for `mode` in a scratch store: a base unit `x`
/// with an invertible, identifiable derived child `y`; `x` is read, erased,
/// then read again.
pub fn characterize(mode: ErasureMode) -> Result<ErasureCharacterization> {
    let dir = tempfile::tempdir()?;
    let store = Store::create(dir.path().join("store"), StoreConfig::default())?;
    let controller = EntityId::controller("acme")?;
    let subject = EntityId::subject("s-1")?;
    let analytics = Purpose::new("analytics")?;
    let policies = [
        PolicyTuple::new(analytics.clone(), controller.clone(), Timestamp(0), Timestamp(1_000))?,
        PolicyTuple::new(Purpose::compliance_erase(), controller.clone(), Timestamp(0), Timestamp(1_000))?,
    ];
    let x = UnitId::new("x")?;
    let y = UnitId::new("y")?;
    let base = DataUnit::base(x.clone(), subject, "origin-0", b"x-value".to_vec(), Timestamp(1), policies)?;
    store.put(base, &controller, &analytics, Timestamp(1))?;
    store.derive(
        Derivation::new(y, vec![x.clone()], "reversible-encoding", b"y-value".to_vec()).invertible(true),
        &controller,
        &analytics,
        Timestamp(2),
    )?;
    store.get(&x, &controller, &analytics, Timestamp(3))?;
    store.erase(&x, mode, &controller, Timestamp(4))?;

    let read_after = [
        store.get(&x, &controller, &analytics, Timestamp(5)),
        store.get(&x, &EntityId::subject("s-1")?, &analytics, Timestamp(5)),
    ]
    .into_iter()
    .any(|r| r.is_ok());
    let snap = store.snapshot();
    let now = Timestamp(6);
    Ok(ErasureCharacterization {
        mode,
        ir: read_after || !detect_ir(&snap, now).is_empty(),
        ii: !detect_ii(&snap, now).is_empty(),
        inv: classify_inv(&snap, &x)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uid(s: &str) -> UnitId {
        UnitId::new(s).unwrap()
    }

    fn netflix() -> EntityId {
        EntityId::controller("Netflix").unwrap()
    }

    fn policy(purpose: &str, b: u64, f: u64) -> PolicyTuple {
        PolicyTuple::new(Purpose::new(purpose).unwrap(), netflix(), Timestamp(b), Timestamp(f)).unwrap()
    }

    fn view(policies: &[PolicyTuple], status: ErasureStatus) -> UnitView {
        UnitView {
            category: Category::Base,
            policies: policies.iter().cloned().collect(),
            status,
            escrowed: false,
        }
    }

    fn rec(unit: &str, purpose: &str, action: ActionKind, t: u64) -> ActionRecord {
        ActionRecord::new(uid(unit), Purpose::new(purpose).unwrap(), netflix(), action, Timestamp(t))
    }

    #[test]
    fn empty_snapshot_is_clean() {
        assert!(audit(&Snapshot::default(), Timestamp(100)).is_empty());
    }

    #[test]
    fn g6_flags_read_after_expiry_only() {
        let mut snap = Snapshot::default();
        snap.units.insert(
            uid("cc"),
            view(&[policy("billing", 10, 20), policy("compliance-erase", 10, 50)], ErasureStatus::Live),
        );
        snap.records = vec![
            rec("cc", "billing", ActionKind::Create, 10),
            rec("cc", "billing", ActionKind::Read, 15),
            rec("cc", "billing", ActionKind::Read, 21),
        ];
        let v = check_g6(&snap, Timestamp(30));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].evidence, vec![Evidence::Position(2)]);
    }

    #[test]
    fn g17_cases() {
        let mut snap = Snapshot::default();
        snap.units.insert(uid("ok"), view(&[policy("compliance-erase", 0, 10)], ErasureStatus::Deleted));
        snap.units.insert(uid("late"), view(&[policy("compliance-erase", 0, 10)], ErasureStatus::Deleted));
        snap.units.insert(uid("none"), view(&[policy("billing", 0, 10)], ErasureStatus::Live));
        snap.units.insert(uid("open"), view(&[policy("compliance-erase", 0, 10)], ErasureStatus::Live));
        snap.records = vec![
            rec("ok", "compliance-erase", ActionKind::Erase(ErasureMode::Delete), 9),
            rec("late", "compliance-erase", ActionKind::Erase(ErasureMode::Delete), 15),
        ];
        let v = check_g17(&snap, Timestamp(20));
        let got: Vec<_> = v.iter().map(|v| (v.kind, v.unit_id.as_str())).collect();
        assert_eq!(
            got,
            vec![
                (ViolationKind::G17LateErase, "late"),
                (ViolationKind::G17MissingPolicy, "none"),
                (ViolationKind::G17MissingErase, "open"),
            ]
        );
        // before the deadline an unerased unit is fine
        assert_eq!(check_g17(&snap, Timestamp(10)).len(), 2);
    }

    #[test]
    fn ii_needs_live_invertible_child() {
        let mut snap = Snapshot::default();
        snap.units.insert(uid("x"), view(&[], ErasureStatus::Deleted));
        snap.units.insert(uid("y"), view(&[], ErasureStatus::Live));
        snap.units.insert(uid("z"), view(&[], ErasureStatus::Live));
        snap.edges = vec![
            ProvenanceEdge {
                derived: uid("y"),
                inputs: BTreeSet::from([uid("x")]),
                function: "f".into(),
                invertible: true,
                subjects_identifiable: true,
            },
            ProvenanceEdge {
                derived: uid("z"),
                inputs: BTreeSet::from([uid("x")]),
                function: "g".into(),
                invertible: false,
                subjects_identifiable: true,
            },
        ];
        let v = detect_ii(&snap, Timestamp(0));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].evidence, vec![Evidence::Edge(uid("y"))]);
        snap.units.get_mut(&uid("y")).unwrap().status = ErasureStatus::StrongDeleted;
        assert!(detect_ii(&snap, Timestamp(0)).is_empty());

        // x -> y -> w, all invertible, y erased: w still reconstructs both
        snap.units.insert(uid("w"), view(&[], ErasureStatus::Live));
        snap.edges.push(ProvenanceEdge {
            derived: uid("w"),
            inputs: BTreeSet::from([uid("y")]),
            function: "h".into(),
            invertible: true,
            subjects_identifiable: true,
        });
        let v = detect_ii(&snap, Timestamp(0));
        let flagged: Vec<&str> = v.iter().map(|v| v.unit_id.as_str()).collect();
        assert_eq!(flagged, ["x", "y"]);
        assert!(v.iter().all(|v| v.evidence == vec![Evidence::Edge(uid("w"))]));
    }

    #[test]
    fn inv_rejects_live_units() {
        let mut snap = Snapshot::default();
        snap.units.insert(uid("x"), view(&[], ErasureStatus::Live));
        assert!(matches!(classify_inv(&snap, &uid("x")), Err(Error::UnitLive(_))));
        assert!(matches!(classify_inv(&snap, &uid("q")), Err(Error::UnknownUnit(_))));
    }

    #[test]
    fn report_lines_are_stable() {
        let v = vec![Violation {
            kind: ViolationKind::G17MissingPolicy,
            unit_id: uid("u"),
            evidence: vec![Evidence::Unit(uid("u"))],
            detected_at: Timestamp(0),
        }];
        let mut out = Vec::new();
        write_report(&mut out, &v, false).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"kind\":\"G17-missing-policy\",\"unit_id\":\"u\",\"evidence\":[{\"unit\":\"u\"}]}\n"
        );
    }
}
