//! Load phase, timed run phase, and metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::profile::{Compaction, ComplianceProfile};
use super::workload::{self, Op, OpClass, TimedOp, WorkloadSpec, DAY, EPOCH, RUN_START};
use crate::checker;
use crate::error::{Error, Result};
use crate::model::{DataUnit, EntityId, PolicyTuple, Purpose, Timestamp, UnitId};
use crate::store::{content_digest, PolicyChange, SpaceUsage, Store};

pub const CONTROLLER: &str = "acme";
pub const ADMIN_PURPOSE: &str = "administration";
pub const CONTRACT_DAYS: u64 = 365;
pub const RETENTION_DAYS: u64 = 730;

pub fn controller() -> EntityId {
    EntityId::controller(CONTROLLER).unwrap()
}

fn admin() -> Purpose {
    Purpose::new(ADMIN_PURPOSE).unwrap()
}

/// Contract grant for one processor, administration and erase grants for
/// the controller.
pub fn unit_policies(purpose: &str, processor: u32) -> Vec<PolicyTuple> {
    let contract_end = Timestamp(EPOCH.0 + CONTRACT_DAYS * DAY);
    let retention_end = Timestamp(EPOCH.0 + RETENTION_DAYS * DAY);
    vec![
        PolicyTuple::new(
            Purpose::new(purpose).unwrap(),
            EntityId::processor(workload::processor_name(processor)).unwrap(),
            EPOCH,
            contract_end,
        )
        .unwrap(),
        PolicyTuple::new(admin(), controller(), EPOCH, retention_end).unwrap(),
        PolicyTuple::new(Purpose::compliance_erase(), controller(), EPOCH, retention_end).unwrap(),
    ]
}

pub fn synthetic_unit(seed: u64, id: &UnitId, purpose: &str, processor: u32, t: Timestamp) -> Result<DataUnit> {
    DataUnit::base(
        id.clone(),
        EntityId::subject(format!("s-{id}"))?,
        "signup",
        workload::synthetic_value(seed, id, 0, t),
        t,
        unit_policies(purpose, processor),
    )
}

/// Creates a store in `dir` holding `n_records` units, one create record
/// each. Nothing here is timed.
pub fn load_phase(dir: &Path, profile: &ComplianceProfile, n_records: u64, seed: u64) -> Result<Store> {
    let store = Store::create(dir, profile.store_config(seed))?;
    let (e, p) = (controller(), admin());
    for i in 0..n_records {
        let id = workload::load_unit_id(i);
        let (purpose, processor) = workload::assignment(seed, &id);
        store.put(synthetic_unit(seed, &id, purpose, processor, EPOCH)?, &e, &p, EPOCH)?;
    }
    store.sync()?;
    Ok(store)
}

/// Log2 buckets of nanoseconds: bucket `k` holds latencies in `[2^k, 2^(k+1))`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    pub count: u64,
    pub total_ns: u64,
    pub max_ns: u64,
    pub buckets: BTreeMap<u32, u64>,
}

impl LatencyHistogram {
    pub fn record(&mut self, d: Duration) {
        let ns = d.as_nanos().min(u64::MAX as u128) as u64;
        self.count += 1;
        self.total_ns = self.total_ns.saturating_add(ns);
        self.max_ns = self.max_ns.max(ns);
        *self.buckets.entry(63 - ns.max(1).leading_zeros()).or_default() += 1;
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        self.count += other.count;
        self.total_ns = self.total_ns.saturating_add(other.total_ns);
        self.max_ns = self.max_ns.max(other.max_ns);
        for (&k, &n) in &other.buckets {
            *self.buckets.entry(k).or_default() += n;
        }
    }

    pub fn mean_us(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_ns as f64 / self.count as f64 / 1000.0
        }
    }

    /// Upper bound of the bucket holding the `q` quantile, in microseconds.
    pub fn quantile_us(&self, q: f64) -> f64 {
        let target = (q * self.count as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (&k, &n) in &self.buckets {
            seen += n;
            if seen >= target {
                return (1u64 << (k + 1).min(63)) as f64 / 1000.0;
            }
        }
        0.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub elapsed: Duration,
    pub op_counts: BTreeMap<OpClass, u64>,
    /// Failed operations by error code.
    pub errors: BTreeMap<String, u64>,
    pub latency: BTreeMap<OpClass, LatencyHistogram>,
}

fn apply(store: &Store, profile: &ComplianceProfile, seed: u64, op: &TimedOp) -> Result<()> {
    let t = op.time;
    let proc_entity = |i: u32| EntityId::processor(workload::processor_name(i));
    match &op.op {
        Op::Create { unit, purpose, processor } => {
            store.put(synthetic_unit(seed, unit, purpose, *processor, t)?, &controller(), &admin(), t)?;
        }
        Op::Read { unit, purpose, processor } => {
            store.get(unit, &proc_entity(*processor)?, &Purpose::new(purpose.as_str())?, t)?;
        }
        Op::Update {
            unit,
            purpose,
            processor,
            version,
        } => {
            let value = workload::synthetic_value(seed, unit, *version, t);
            store.update_value(unit, value, &proc_entity(*processor)?, &Purpose::new(purpose.as_str())?, t)?;
        }
        Op::Delete { unit } => {
            store.erase(unit, profile.erase_mode, &controller(), t)?;
            match profile.compaction {
                Compaction::None => {}
                Compaction::Autovacuum { min_dead_ratio } => {
                    store.autovacuum(min_dead_ratio)?;
                }
                Compaction::FullAfterErase => {
                    store.compact(crate::store::CompactLevel::Full)?;
                }
            }
        }
        Op::ReadByMetadata { purpose, processor } => {
            store.read_by_metadata(&Purpose::new(purpose.as_str())?, &proc_entity(*processor)?, t)?;
        }
        Op::AddPolicy { unit, purpose, processor } => {
            let policy = PolicyTuple::new(
                Purpose::new(purpose.as_str())?,
                proc_entity(*processor)?,
                t,
                Timestamp(t.0 + CONTRACT_DAYS * DAY),
            )?;
            store.update_policies(unit, PolicyChange::Add(policy), &controller(), &admin(), t)?;
        }
        Op::ExtendPolicy {
            unit,
            purpose,
            processor,
            days,
        } => {
            let (purpose, entity) = (Purpose::new(purpose.as_str())?, proc_entity(*processor)?);
            let old = store
                .policies_of(unit)?
                .into_iter()
                .filter(|p| p.grants(&purpose, &entity))
                .max_by_key(|p| p.end())
                .ok_or_else(|| Error::InvalidUnit(format!("{unit} has no contract policy")))?;
            let new = old.with_window(old.begin(), old.end().saturating_add(days * DAY))?;
            store.update_policies(unit, PolicyChange::Replace { old, new }, &controller(), &admin(), t)?;
        }
    }
    Ok(())
}

/// Runs `ops` against `store`, timing each one. Failed operations are
/// counted, not fatal.
pub fn execute(store: &Store, profile: &ComplianceProfile, seed: u64, ops: &[TimedOp]) -> RunOutcome {
    let mut out = RunOutcome::default();
    let start = Instant::now();
    for op in ops {
        let class = op.op.class();
        let t0 = Instant::now();
        let res = apply(store, profile, seed, op);
        out.latency.entry(class).or_default().record(t0.elapsed());
        *out.op_counts.entry(class).or_default() += 1;
        if let Err(e) = res {
            *out.errors.entry(e.code().to_owned()).or_default() += 1;
        }
    }
    out.elapsed = start.elapsed();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub profile: String,
    pub workload: String,
    pub n_records: u64,
    pub n_txns: u64,
    pub seed: u64,
    pub op_counts: BTreeMap<OpClass, u64>,
    pub errors: BTreeMap<String, u64>,
    pub ledger_records: usize,
    pub denied: u64,
    pub space: SpaceUsage,
    pub space_factor: f64,
    pub g6_violations: usize,
    pub g17_violations: usize,
    pub post_load_digest: String,
    pub post_run_digest: String,
    /// Median wall-clock time of the timed repetitions, in seconds.
    pub completion_time_secs: f64,
    pub repetition_secs: Vec<f64>,
    pub latency: BTreeMap<OpClass, LatencyHistogram>,
}

/// Fields that depend on the wall clock; everything else is a function of
/// the inputs.
pub const WALL_CLOCK_FIELDS: [&str; 3] = ["completion_time_secs", "repetition_secs", "latency"];

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: bool,
    /// Parent of the scratch store directories; the system temp dir if unset.
    pub work_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 3,
            warmup: true,
            work_dir: None,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 }
}

/// Loads and runs `spec` once per repetition (plus an untimed warm-up),
/// each time on a fresh store, and reports the median completion time.
/// Space, audit counts and digests come from the last repetition.
pub fn run_benchmark(profile: &ComplianceProfile, spec: &WorkloadSpec, opts: &BenchOptions) -> Result<RunMetrics> {
    profile.validate()?;
    let ops = workload::generate(spec)?;
    let scratch = match &opts.work_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            tempfile::tempdir_in(dir)?
        }
        None => tempfile::tempdir()?,
    };
    let reps = opts.repetitions.max(1);
    let total = reps + usize::from(opts.warmup);
    let now = ops.last().map_or(RUN_START, |op| op.time);

    let mut times = Vec::with_capacity(reps);
    let mut latency: BTreeMap<OpClass, LatencyHistogram> = BTreeMap::new();
    let mut post_load_digest = String::new();
    let mut last = None;
    for r in 0..total {
        let dir = scratch.path().join(format!("rep{r}"));
        let store = load_phase(&dir, profile, spec.n_records, spec.seed)?;
        if r == 0 {
            post_load_digest = content_digest(&dir)?;
        }
        let outcome = execute(&store, profile, spec.seed, &ops);
        if r >= total - reps {
            times.push(outcome.elapsed.as_secs_f64());
            for (class, h) in &outcome.latency {
                latency.entry(*class).or_default().merge(h);
            }
        }
        if r == total - 1 {
            let snap = store.snapshot();
            let space = store.space_usage()?;
            last = Some((
                outcome,
                space,
                checker::check_g6(&snap, now).len(),
                checker::check_g17(&snap, now).len(),
                store.ledger_len(),
                store.denied_count(),
                content_digest(&dir)?,
            ));
        }
        drop(store);
        std::fs::remove_dir_all(&dir)?;
    }
    let (outcome, space, g6, g17, ledger_records, denied, post_run_digest) = last.expect("at least one repetition");
    Ok(RunMetrics {
        profile: profile.name.clone(),
        workload: spec.name.clone(),
        n_records: spec.n_records,
        n_txns: spec.n_txns,
        seed: spec.seed,
        op_counts: outcome.op_counts,
        errors: outcome.errors,
        ledger_records,
        denied,
        space,
        space_factor: space.factor(),
        g6_violations: g6,
        g17_violations: g17,
        post_load_digest,
        post_run_digest,
        completion_time_secs: median(&times),
        repetition_secs: times,
        latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets() {
        let mut h = LatencyHistogram::default();
        h.record(Duration::from_nanos(1));
        h.record(Duration::from_nanos(1500));
        h.record(Duration::from_nanos(1600));
        assert_eq!(h.buckets[&0], 1);
        assert_eq!(h.buckets[&10], 2);
        assert_eq!(h.max_ns, 1600);
        assert_eq!(h.quantile_us(0.5), 2.048);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
