mod corpus;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use satir_core::closure::{run_closure, ClosureConfig, RuleSet};
use satir_core::oracle::{build_gates, compare, engine_match, generate_world, naive_match, oracle_match, OracleConfig, RecallReport, WorldParams};
use satir_core::projection::policy::SaliencePolicy;
use satir_core::projection::ProjectionConfig;
use satir_core::retrieval::{explain, explain_results, retrieve, MatchResult, ObjectiveConfig, RetrievalOptions, OBJECTIVE_NAMES};
use satir_core::smt::{facts_to_json, parse_patient_facts};
use satir_core::store::Store;
use satir_core::Ontology;

use corpus::FileError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_EMPTY_INGEST: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "satir", version, about = "Ontology-grounded retrieval of clinical trials for patients")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse trial programs and patient facts, close, project and build a store.
    Ingest(IngestArgs),
    /// Build a store from a corpus directory with `trials/`, `patients/`,
    /// and optional `ontology.jsonl` and `policy.json`.
    Build(BuildArgs),
    /// Run fact closure on one patient file and print the closed facts.
    Closure(ClosureArgs),
    /// Query the store for matching trials.
    Query(QueryArgs),
    /// Check full recall against the reference matcher on synthetic worlds.
    Verify(VerifyArgs),
    /// Time per-patient queries on a synthetic store.
    Bench(BenchArgs),
    /// Write a synthetic corpus directory.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct Knowledge {
    /// Ontology JSONL. Without it, concepts mentioned by the corpus are registered flat.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Closure rule inventory JSON; defaults to the shipped rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Salience policy JSON.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_passes: usize,
    #[arg(long, default_value_t = 16)]
    max_hops: usize,
    /// Also register corpus concepts missing from `--ontology` as flat concepts.
    #[arg(long)]
    extend_ontology: bool,
    /// Drop clauses naming unknown concepts instead of failing the file.
    #[arg(long)]
    lenient_concepts: bool,
}

impl Knowledge {
    fn rules(&self) -> Result<RuleSet> {
        match &self.rules {
            Some(p) => Ok(RuleSet::from_json(&read(p)?)?),
            None => Ok(RuleSet::default_rules()),
        }
    }

    fn policy(&self) -> Result<SaliencePolicy> {
        match &self.policy {
            Some(p) => Ok(SaliencePolicy::load(p)?),
            None => Ok(SaliencePolicy::default()),
        }
    }

    fn closure(&self) -> ClosureConfig {
        ClosureConfig { max_passes: self.max_passes, max_hops_concept: self.max_hops, ..ClosureConfig::default() }
    }
}

#[derive(Args)]
struct StoreArg {
    /// Store file.
    #[arg(long, env = "SATIR_STORE", default_value = "satir.sqlite")]
    store: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of `.smt2` trial programs, searched recursively.
    #[arg(long)]
    trials: PathBuf,
    /// Directory of patient fact JSON files.
    #[arg(long)]
    patients: PathBuf,
    #[command(flatten)]
    knowledge: Knowledge,
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BuildArgs {
    corpus: PathBuf,
    #[command(flatten)]
    knowledge: Knowledge,
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ClosureArgs {
    patient: PathBuf,
    #[command(flatten)]
    knowledge: Knowledge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ndjson,
    Table,
}

#[derive(Args)]
struct QueryArgs {
    /// Patient ids; all patients when omitted.
    #[arg(long = "patient")]
    patients: Vec<String>,
    #[command(flatten)]
    store: StoreArg,
    /// Ontology to check against the store; the stored copy is used otherwise.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// treat-chief, treat-any or relevant-to-any.
    #[arg(long, default_value = "treat-chief")]
    objective: String,
    /// JSON objective file, overriding `--objective`.
    #[arg(long)]
    objective_file: Option<PathBuf>,
    /// Drop pairs where a patient fact certainly meets an exclusion criterion.
    #[arg(long)]
    knockouts: bool,
    /// Knockouts need the certain window strictly inside the criterion window.
    #[arg(long)]
    strict_exclusion: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Print per-clause explanations instead of bare matches.
    #[arg(long)]
    explain: bool,
    /// With `--explain`, explain these trials for each patient whether or not they match.
    #[arg(long = "trial")]
    trials: Vec<String>,
    #[arg(long, value_enum, default_value = "ndjson")]
    format: Format,
}

#[derive(Args, Clone)]
struct WorldArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    concepts: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    patients: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 0.1)]
    missingness_rate: f64,
}

impl WorldArgs {
    fn params(&self) -> Result<WorldParams> {
        if self.depth > 4 {
            bail!(Usage("--depth must be at most 4".into()));
        }
        Ok(WorldParams { n_concepts: self.concepts.max(1), n_trials: self.trials, n_patients: self.patients, depth: self.depth, missingness_rate: self.missingness_rate, ..WorldParams::default() })
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    world: WorldArgs,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value = "treat-chief")]
    objective: String,
    #[arg(long)]
    knockouts: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3621)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    patients: usize,
    #[arg(long, default_value_t = 1500)]
    concepts: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value = "treat-any")]
    objective: String,
    /// Store file; a temporary one is used otherwise.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Also time the nested-loop baseline.
    #[arg(long)]
    naive: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn objective(name: &str, file: Option<&Path>, knockouts: bool, o: &Ontology) -> Result<ObjectiveConfig> {
    let obj = match file {
        Some(p) => ObjectiveConfig::from_json(&read(p)?)?,
        None => ObjectiveConfig::named(name).map_err(|_| Usage(format!("unknown objective `{name}`; expected one of {}", OBJECTIVE_NAMES.join(", "))))?,
    };
    let on = knockouts || obj.enforce_knockouts;
    let obj = obj.with_knockouts(on);
    obj.validate(o)?;
    Ok(obj)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}

fn emit(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct IngestReport {
    store: String,
    trial_programs: usize,
    patients: usize,
    derived_facts: usize,
    concepts_registered: usize,
    counts: satir_core::store::Counts,
    errors: Vec<FileError>,
}

fn ingest(trials_dir: &Path, patients_dir: &Path, k: &Knowledge, store: &Path, workers: usize) -> Result<()> {
    let pool = pool(workers)?;
    let (trials, mut errors) = corpus::load_trials(trials_dir, &pool)?;
    let (patients, patient_errors) = corpus::load_patients(patients_dir)?;
    errors.extend(patient_errors);

    let mut o = match &k.ontology {
        Some(p) => Ontology::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Ontology::new(),
    };
    let concepts_registered = if k.ontology.is_none() || k.extend_ontology { corpus::extend_with_tokens(&mut o, &trials, &patients)? } else { 0 };
    let policy = k.policy()?.compile(&o)?;
    let projection = ProjectionConfig { strict_concepts: !k.lenient_concepts, ..ProjectionConfig::default() };
    let projected = corpus::project_all(&trials, &patients, &o, &k.rules()?, &policy, &k.closure(), &projection, &pool);
    errors.extend(projected.errors);

    let mut seen = BTreeSet::new();
    let mut gates = Vec::new();
    for g in projected.gates {
        if seen.insert(g.owner.clone()) {
            gates.push(g);
        } else {
            errors.push(FileError { file: g.owner.to_string(), error: "duplicate entity; first one kept".into() });
        }
    }
    for e in &errors {
        log::warn!("{}: {}", e.file, e.error);
    }
    if gates.is_empty() {
        emit(&json!({ "store": null, "errors": errors }))?;
        eprintln!("satir: nothing ingested");
        return Err(Exit(EXIT_EMPTY_INGEST).into());
    }
    let s = Store::build(store, &gates, &o)?;
    emit(&IngestReport {
        store: store.display().to_string(),
        trial_programs: projected.trial_programs,
        patients: projected.patients,
        derived_facts: projected.derived_facts,
        concepts_registered,
        counts: s.counts()?,
        errors,
    })
}

fn closure(a: &ClosureArgs) -> Result<()> {
    let facts = parse_patient_facts(&read(&a.patient)?)?;
    let mut o = match &a.knowledge.ontology {
        Some(p) => Ontology::load(p)?,
        None => Ontology::new(),
    };
    if a.knowledge.ontology.is_none() || a.knowledge.extend_ontology {
        corpus::extend_with_tokens(&mut o, &[], &[(String::new(), facts.clone())])?;
    }
    let c = run_closure(&facts, &o, &a.knowledge.rules()?, &a.knowledge.closure());
    let records: Vec<_> = c.records().cloned().collect();
    emit(&json!({ "report": c.report, "facts": facts_to_json(&records) }))
}

fn query(a: &QueryArgs) -> Result<()> {
    let store = Store::open(&a.store.store).with_context(|| format!("opening {}", a.store.store.display()))?;
    let o = match &a.ontology {
        Some(p) => {
            let o = Ontology::load(p)?;
            store.check_ontology(&o)?;
            o
        }
        None => store.stored_ontology()?,
    };
    let obj = objective(&a.objective, a.objective_file.as_deref(), a.knockouts, &o)?;
    let opts = RetrievalOptions { strict_exclusion: a.strict_exclusion, workers: a.workers.max(1), ..RetrievalOptions::default() };
    let o = Arc::new(o);
    let ids = if a.patients.is_empty() { None } else { Some(a.patients.as_slice()) };
    if a.explain && !a.trials.is_empty() {
        let patients = if a.patients.is_empty() { store.patient_ids()? } else { a.patients.clone() };
        let mut out = std::io::stdout().lock();
        for p in &patients {
            for t in &a.trials {
                for e in explain(&store, t, p, &o, &obj, &opts)? {
                    match a.format {
                        Format::Ndjson => {
                            serde_json::to_writer(&mut out, &e)?;
                            writeln!(out)?;
                        }
                        Format::Table => write!(out, "{e}")?,
                    }
                }
            }
        }
        return Ok(());
    }
    let mut results = retrieve(&store, &o, &obj, &opts, ids)?;
    if a.explain {
        explain_results(&store, &mut results, &o, &obj, &opts)?;
    }
    let mut out = std::io::stdout().lock();
    match a.format {
        Format::Ndjson => {
            for r in &results {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
        }
        Format::Table => write_table(&mut out, &results)?,
    }
    Ok(())
}

fn write_table(out: &mut impl Write, results: &[MatchResult]) -> Result<()> {
    let w = |f: fn(&MatchResult) -> usize, h: &str| results.iter().map(f).chain([h.len()]).max().unwrap_or(0);
    let (wp, wt, ws) = (w(|r| r.patient_id.len(), "patient"), w(|r| r.trial_id.len(), "trial"), w(|r| r.subcohort.len(), "subcohort"));
    writeln!(out, "{:wp$}  {:wt$}  {:ws$}  supported/relevant", "patient", "trial", "subcohort")?;
    for r in results {
        writeln!(out, "{:wp$}  {:wt$}  {:ws$}  {}/{}", r.patient_id, r.trial_id, r.subcohort, r.supported_clause_count, r.relevant_clause_count)?;
        if let Some(e) = &r.explanation {
            write!(out, "{e}")?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary {
    objective: String,
    knockouts: bool,
    seeds: u64,
    oracle_pairs: usize,
    engine_pairs: usize,
    missed_pairs: usize,
    recall: f64,
    failing: Vec<RecallReport>,
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let params = a.world.params()?;
    let base = objective(&a.objective, None, a.knockouts, &Ontology::new())?;
    let pool = pool(a.workers)?;
    let reports: Vec<RecallReport> = pool.install(|| {
        (a.world.seed..a.world.seed + a.seeds)
            .into_par_iter()
            .map(|seed| -> Result<RecallReport> {
                let w = generate_world(seed, &params)?;
                let oracle = oracle_match(&w, &base, &OracleConfig::default())?;
                let gates = build_gates(&w, &ClosureConfig::default())?;
                let engine = engine_match(&w, &gates, &base, &RetrievalOptions::default())?;
                Ok(compare(seed, &base.name, &oracle, &engine))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let oracle_pairs: usize = reports.iter().map(|r| r.oracle_count).sum();
    let missed: usize = reports.iter().map(|r| r.missed.len()).sum();
    let summary = VerifySummary {
        objective: base.name.clone(),
        knockouts: base.enforce_knockouts,
        seeds: a.seeds,
        oracle_pairs,
        engine_pairs: reports.iter().map(|r| r.engine_count).sum(),
        missed_pairs: missed,
        recall: if oracle_pairs == 0 { 1.0 } else { (oracle_pairs - missed) as f64 / oracle_pairs as f64 },
        failing: reports.into_iter().filter(|r| !r.missed.is_empty()).collect(),
    };
    emit(&summary)?;
    if missed > 0 {
        return Err(Exit(EXIT_RUNTIME).into());
    }
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    if xs.is_empty() {
        0.0
    } else {
        xs[xs.len() / 2]
    }
}

fn bench(a: &BenchArgs) -> Result<()> {
    let t = Instant::now();
    let params = WorldParams { n_concepts: a.concepts.max(1), n_trials: a.trials, n_patients: a.patients.max(1), ..WorldParams::default() };
    let w = generate_world(a.seed, &params)?;
    let gates = build_gates(&w, &ClosureConfig::default())?;
    let prepare_s = t.elapsed().as_secs_f64();

    let tmp;
    let path = match &a.store {
        Some(p) => p.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().join("bench.sqlite")
        }
    };
    let t = Instant::now();
    let store = Store::build(&path, &gates.all(), &w.ontology)?;
    let build_s = t.elapsed().as_secs_f64();

    let obj = objective(&a.objective, None, false, &w.ontology)?;
    let opts = RetrievalOptions { workers: a.workers.max(1), ..RetrievalOptions::default() };
    let o = Arc::new(w.ontology.clone());
    let mut latencies = Vec::new();
    let mut first: Option<Vec<MatchResult>> = None;
    let mut stable = true;
    for _ in 0..a.repetitions.max(1) {
        let mut run = Vec::new();
        for (pid, _) in &w.patients {
            let t = Instant::now();
            run.extend(retrieve(&store, &o, &obj, &opts, Some(std::slice::from_ref(pid)))?);
            latencies.push(t.elapsed().as_secs_f64());
        }
        match &first {
            None => first = Some(run),
            Some(f) => stable &= *f == run,
        }
    }
    let naive = if a.naive {
        let t = Instant::now();
        let n = naive_match(&gates, &w.ontology, &obj, &opts)?;
        Some(json!({ "seconds_per_patient": t.elapsed().as_secs_f64() / w.patients.len() as f64, "matches": n.len() }))
    } else {
        None
    };
    let counts = store.counts()?;
    let trial_ids: BTreeSet<&str> = w.trials.iter().map(|p| p.trial_id.as_str()).collect();
    emit(&json!({
        "trials": trial_ids.len(),
        "trial_programs": w.trials.len(),
        "patients": w.patients.len(),
        "repetitions": a.repetitions.max(1),
        "objective": obj.name,
        "prepare_seconds": prepare_s,
        "store_build_seconds": build_s,
        "median_seconds_per_patient": median(&mut latencies),
        "max_seconds_per_patient": latencies.iter().cloned().fold(0.0, f64::max),
        "matches": first.map_or(0, |f| f.len()),
        "results_identical_across_repetitions": stable,
        "rows": counts,
        "naive_baseline": naive,
    }))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let w = generate_world(a.world.seed, &a.world.params()?)?;
    w.write(&a.out)?;
    emit(&json!({ "out": a.out.display().to_string(), "trial_programs": w.trials.len(), "patients": w.patients.len(), "concepts": w.ontology.concepts().count() }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Ingest(a) => ingest(&a.trials, &a.patients, &a.knowledge, &a.store.store, a.workers),
        Command::Build(a) => {
            let mut k = a.knowledge.clone();
            for (slot, name) in [(&mut k.ontology, "ontology.jsonl"), (&mut k.policy, "policy.json")] {
                if slot.is_none() && a.corpus.join(name).exists() {
                    *slot = Some(a.corpus.join(name));
                }
            }
            ingest(&a.corpus.join("trials"), &a.corpus.join("patients"), &k, &a.store.store, a.workers)
        }
        Command::Closure(a) => closure(&a),
        Command::Query(a) => query(&a),
        Command::Verify(a) => verify(&a),
        Command::Bench(a) => bench(&a),
        Command::Generate(a) => generate(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Exit(code)) = e.downcast_ref::<Exit>() {
                return ExitCode::from(*code);
            }
            eprintln!("satir: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
