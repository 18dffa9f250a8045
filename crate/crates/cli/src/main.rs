use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datacase::bench::{self, BenchOptions, ComplianceProfile, WorkloadConfig, WorkloadSpec};
use datacase::checker;
use datacase::model::{DataUnit, EntityId, ErasureMode, PolicyTuple, Purpose, Timestamp, UnitId};
use datacase::store::{AccessControl, CompactLevel, Logging, Store, StoreConfig};
use datacase::Error;
use serde_json::json;

/// Exit status for audit findings and characterization mismatches.
const EXIT_FINDINGS: u8 = 3;

#[derive(Parser)]
#[command(name = "datacase", version, about = "Policy-aware datastore with erasure semantics")]
struct Cli {
    /// Store directory. DATACASE_STORE takes precedence when set.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty store.
    Init(InitArgs),
    /// Insert a base unit.
    Put(PutArgs),
    /// Read a unit's current value.
    Get(AccessArgs),
    /// Erase a unit under one of the four modes.
    Erase {
        unit: UnitId,
        #[arg(long)]
        mode: ErasureMode,
        #[arg(long)]
        entity: EntityId,
        #[arg(long, value_parser = parse_time)]
        time: Option<Timestamp>,
    },
    /// Undo a reversible inaccessibility.
    Restore {
        unit: UnitId,
        #[arg(long)]
        entity: EntityId,
        #[arg(long, value_parser = parse_time)]
        time: Option<Timestamp>,
    },
    /// Reclaim dead segment space.
    Compact {
        #[arg(long, default_value = "full")]
        level: CompactLevel,
    },
    /// Check the history for invariant violations.
    Audit {
        /// Evaluation time; defaults to the last ledger record.
        #[arg(long, value_parser = parse_time)]
        now: Option<Timestamp>,
        /// Include detection times in the report.
        #[arg(long)]
        with_time: bool,
    },
    /// Measure IR / II / Inv for every erasure mode.
    Characterize {
        #[arg(long)]
        json: bool,
    },
    /// Load a store and run a workload under a profile.
    Bench(BenchArgs),
    /// Summarize result files.
    Report {
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the action ledger as JSON lines.
    ExportLedger {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InitArgs {
    /// Store configuration file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    access_control: Option<AccessControl>,
    #[arg(long)]
    logging: Option<Logging>,
    #[arg(long)]
    encrypted: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    segment_max_bytes: Option<u64>,
}

#[derive(Args)]
struct PutArgs {
    unit: UnitId,
    #[arg(long)]
    subject: EntityId,
    #[arg(long, default_value = "cli")]
    origin: String,
    #[arg(long, conflicts_with = "value_hex", required_unless_present = "value_hex")]
    value: Option<String>,
    #[arg(long)]
    value_hex: Option<String>,
    /// `purpose,kind:id,begin,end`; repeatable.
    #[arg(long = "policy", required = true)]
    policies: Vec<PolicyTuple>,
    #[arg(long)]
    entity: EntityId,
    #[arg(long)]
    purpose: Purpose,
    #[arg(long, value_parser = parse_time)]
    time: Option<Timestamp>,
}

#[derive(Args)]
struct AccessArgs {
    unit: UnitId,
    #[arg(long)]
    entity: EntityId,
    #[arg(long)]
    purpose: Purpose,
    #[arg(long, value_parser = parse_time)]
    time: Option<Timestamp>,
}

#[derive(Args)]
struct BenchArgs {
    /// Built-in profile name (P_Base, P_GBench, P_SYS).
    #[arg(long, conflicts_with = "profile_file", required_unless_present = "profile_file")]
    profile: Option<String>,
    #[arg(long)]
    profile_file: Option<PathBuf>,
    /// Built-in workload name (wcon, wpro, wcus, ycsb-c).
    #[arg(long, conflicts_with = "workload_file", required_unless_present = "workload_file")]
    workload: Option<String>,
    #[arg(long)]
    workload_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    records: u64,
    #[arg(long, default_value_t = 2_000)]
    txns: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Parent directory for scratch stores.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Print the op stream as JSON lines instead of running it.
    #[arg(long)]
    emit_stream: bool,
    #[arg(long)]
    json: bool,
}

fn parse_time(s: &str) -> Result<Timestamp, Error> {
    Timestamp::parse_iso(s)
}

fn store_dir(flag: &Option<PathBuf>) -> Result<PathBuf, Error> {
    std::env::var_os("DATACASE_STORE")
        .map(PathBuf::from)
        .or_else(|| flag.clone())
        .ok_or_else(|| Error::Config("no store given: pass --store or set DATACASE_STORE".into()))
}

fn open(flag: &Option<PathBuf>) -> Result<Store, Error> {
    Store::open(store_dir(flag)?)
}

fn time_or_now(t: Option<Timestamp>) -> Timestamp {
    t.unwrap_or_else(Timestamp::now)
}

fn print_line(out: &mut impl Write, v: &serde_json::Value) -> Result<(), Error> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Error> {
    Ok(std::fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<u8, Error> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let code = match cli.command {
        Command::Init(args) => {
            let mut config = match &args.config {
                Some(path) => {
                    let text = read_text(path)?;
                    if text.trim_start().starts_with('{') {
                        serde_json::from_str(&text)?
                    } else {
                        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                    }
                }
                None => StoreConfig::default(),
            };
            if let Some(a) = args.access_control {
                config.access_control = a;
            }
            if let Some(l) = args.logging {
                config.logging = l;
            }
            if args.encrypted {
                config.encrypted_at_rest = true;
            }
            if let Some(s) = args.seed {
                config.seed = s;
            }
            if let Some(m) = args.segment_max_bytes {
                config.segment_max_bytes = m;
            }
            let dir = store_dir(&cli.store)?;
            let store = Store::create(&dir, config)?;
            print_line(&mut out, &json!({ "initialized": dir.display().to_string(), "config": store.config() }))?;
            0
        }
        Command::Put(args) => {
            let store = open(&cli.store)?;
            let value = match (&args.value, &args.value_hex) {
                (Some(v), _) => v.as_bytes().to_vec(),
                (None, Some(h)) => hex::decode(h).map_err(|e| Error::InvalidUnit(format!("value-hex: {e}")))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let t = time_or_now(args.time);
            let unit = DataUnit::base(args.unit, args.subject, args.origin, value, t, args.policies)?;
            let id = store.put(unit, &args.entity, &args.purpose, t)?;
            print_line(&mut out, &json!({ "unit_id": id, "status": store.status_of(&id)? }))?;
            0
        }
        Command::Get(args) => {
            let store = open(&cli.store)?;
            let value = store.get(&args.unit, &args.entity, &args.purpose, time_or_now(args.time))?;
            print_line(
                &mut out,
                &json!({
                    "unit_id": args.unit,
                    "value": std::str::from_utf8(&value).ok(),
                    "value_hex": hex::encode(&value),
                }),
            )?;
            0
        }
        Command::Erase {
            unit,
            mode,
            entity,
            time,
        } => {
            let store = open(&cli.store)?;
            let report = store.erase(&unit, mode, &entity, time_or_now(time))?;
            print_line(&mut out, &serde_json::to_value(report)?)?;
            0
        }
        Command::Restore { unit, entity, time } => {
            let store = open(&cli.store)?;
            let status = store.restore_access(&unit, &entity, time_or_now(time))?;
            print_line(&mut out, &json!({ "unit_id": unit, "status": status }))?;
            0
        }
        Command::Compact { level } => {
            let store = open(&cli.store)?;
            let reclaimed = store.compact(level)?;
            print_line(&mut out, &json!({ "reclaimed_bytes": reclaimed }))?;
            0
        }
        Command::Audit { now, with_time } => {
            let store = open(&cli.store)?;
            let now = now.or_else(|| store.last_time()).unwrap_or(Timestamp(0));
            let violations = checker::audit(&store.snapshot(), now);
            checker::write_report(&mut out, &violations, with_time)?;
            writeln!(out, "{} violations", violations.len())?;
            if violations.is_empty() { 0 } else { EXIT_FINDINGS }
        }
        Command::Characterize { json } => {
            let mut deviates = false;
            if !json {
                writeln!(out, "{:<24} {:<3} {:<3} Inv", "mode", "IR", "II")?;
            }
            for mode in ErasureMode::ALL {
                let got = checker::characterize(mode)?;
                let ok = got == checker::ErasureCharacterization::expected(mode);
                deviates |= !ok;
                let mark = |b: bool| if b { "✓" } else { "×" };
                if json {
                    print_line(
                        &mut out,
                        &json!({ "mode": mode, "ir": got.ir, "ii": got.ii, "inv": got.inv, "matches_reference": ok }),
                    )?;
                } else {
                    writeln!(
                        out,
                        "{:<24} {:<3} {:<3} {}{}",
                        mode.as_str(),
                        mark(got.ir),
                        mark(got.ii),
                        mark(got.inv),
                        if ok { "" } else { " MISMATCH" }
                    )?;
                }
            }
            if deviates { EXIT_FINDINGS } else { 0 }
        }
        Command::Bench(args) => bench_cmd(args, &mut out)?,
        Command::Report { results, json } => {
            let runs = if results.exists() {
                bench::read_results(&results)?
            } else {
                Vec::new()
            };
            if json {
                for m in &runs {
                    print_line(&mut out, &serde_json::to_value(m)?)?;
                }
            } else {
                out.write_all(bench::render_table(&runs).as_bytes())?;
            }
            0
        }
        Command::ExportLedger { out: path } => {
            let store = open(&cli.store)?;
            match path {
                Some(path) => {
                    let mut f = BufWriter::new(File::create(path)?);
                    store.export_ledger(&mut f)?;
                    f.flush()?;
                }
                None => store.export_ledger(&mut out)?,
            }
            0
        }
    };
    out.flush()?;
    Ok(code)
}

fn bench_cmd(args: BenchArgs, out: &mut impl Write) -> Result<u8, Error> {
    let profile = match (&args.profile, &args.profile_file) {
        (Some(name), _) => ComplianceProfile::builtin(name)?,
        (None, Some(path)) => ComplianceProfile::parse(&read_text(path)?)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let spec: WorkloadSpec = match (&args.workload, &args.workload_file) {
        (Some(name), _) => bench::builtin_workload(name, args.records, args.txns, args.seed)?,
        (None, Some(path)) => WorkloadConfig::parse(&read_text(path)?)?.into_spec()?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    if args.emit_stream {
        bench::workload::write_stream(out, &bench::generate(&spec)?)?;
        return Ok(0);
    }
    let opts = BenchOptions {
        repetitions: args.repetitions,
        warmup: !args.no_warmup,
        work_dir: args.work_dir,
    };
    let metrics = bench::run_benchmark(&profile, &spec, &opts)?;
    let path = bench::write_result(&args.results, &metrics)?;
    if args.json {
        print_line(out, &serde_json::to_value(&metrics)?)?;
    } else {
        out.write_all(bench::render_table(std::slice::from_ref(&metrics)).as_bytes())?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let line = json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
