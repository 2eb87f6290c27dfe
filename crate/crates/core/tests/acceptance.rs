//! Acceptance criteria. One line per criterion; exits non-zero on failure.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::Value;

use satir_core::closure::{run_closure, ClosureConfig, RuleSet, DEFAULT_RULES};
use satir_core::model::VariableName;
use satir_core::ontology::{default_token, vocab, Concept, ConceptId, Ontology};
use satir_core::oracle::{build_gates, compare, engine_match, generate_world, oracle_match, OracleConfig, PairKey, WorldParams};
use satir_core::projection::policy::{SaliencePolicy, SpecificityAllow};
use satir_core::projection::{check_gate_entailment, project_trial, trial_formula, ProjectionConfig};
use satir_core::retrieval::{retrieve, ObjectiveConfig, RetrievalOptions};
use satir_core::smt::{parse_trial_file, parse_trial_program, serialize_trial_program, AnnotationStatus, FactValue, PatientFactRecord, TagKind};
use satir_core::store::Store;
use satir_core::temporal::{exclusion_time_match, inclusion_time_match, TimeWindow, Timeframe};

const RECALL_WORLDS: u64 = 1000;
const RECALL_MAX: (usize, usize, usize) = (100, 200, 20);
const ENTAILMENT_FORMULAS: usize = 500;
const ENTAILMENT_MAX_ATOMS: usize = 12;
const CLOSURE_FACT_SETS: u64 = 1000;
const TEMPORAL_PAIRS: u64 = 100_000;
const PERF_TRIALS: usize = 3621;
const PERF_PATIENTS: usize = 9;
const PERF_MEDIAN_LIMIT: Duration = Duration::from_secs(5);
const NESTING_WORLDS: u64 = 200;

type Outcome = Result<String, String>;

fn objectives() -> [ObjectiveConfig; 3] {
    [ObjectiveConfig::treat_chief(), ObjectiveConfig::treat_any(), ObjectiveConfig::relevant_to_any()]
}

fn sampled_params(rng: &mut ChaCha8Rng) -> WorldParams {
    WorldParams {
        n_concepts: rng.gen_range(5..=RECALL_MAX.0),
        n_trials: rng.gen_range(1..=RECALL_MAX.1),
        n_patients: rng.gen_range(1..=RECALL_MAX.2),
        depth: rng.gen_range(0..=4),
        missingness_rate: rng.gen_range(0.0..0.3),
        ..WorldParams::default()
    }
}

fn full_recall() -> Outcome {
    let mut pairs = 0usize;
    let mut extra = 0usize;
    let mut largest = 0usize;
    for seed in 0..RECALL_WORLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut params = sampled_params(&mut rng);
        if seed < 10 {
            params = WorldParams { n_concepts: RECALL_MAX.0, n_trials: RECALL_MAX.1, n_patients: RECALL_MAX.2, ..params };
        }
        let w = generate_world(seed, &params).map_err(|e| format!("seed {seed}: {e}"))?;
        largest = largest.max(w.trials.len());
        let gates = build_gates(&w, &ClosureConfig::default()).map_err(|e| e.to_string())?;
        let obj = objectives()[seed as usize % 3].clone();
        let oracle = oracle_match(&w, &obj, &OracleConfig::default()).map_err(|e| e.to_string())?;
        let engine = engine_match(&w, &gates, &obj, &RetrievalOptions::default()).map_err(|e| e.to_string())?;
        let r = compare(seed, &obj.name, &oracle, &engine);
        if !r.missed.is_empty() {
            return Err(format!("seed {seed} ({}): missed {} pairs, first {:?}", obj.name, r.missed.len(), r.missed[0]));
        }
        pairs += r.oracle_count;
        extra += r.extra_count;
    }
    Ok(format!("{RECALL_WORLDS} worlds, {pairs} oracle pairs all retrieved, {extra} extra engine pairs, largest world {largest} programs"))
}

fn entailment_ontology() -> Ontology {
    let mut o = Ontology::new();
    for i in 0..8 {
        let id = format!("E{i}");
        o.add_concept(Concept { id: ConceptId::new(&id), token: default_token(&id), label: None }).expect("fresh");
    }
    for (c, p) in [(4, 0), (5, 1), (6, 4), (7, 2)] {
        o.add_isa(&ConceptId::new(format!("E{c}")), &ConceptId::new(format!("E{p}"))).expect("known");
    }
    o
}

struct FormulaGen<'a> {
    rng: &'a mut ChaCha8Rng,
    atoms: usize,
}

impl FormulaGen<'_> {
    fn atom(&mut self) -> String {
        self.atoms += 1;
        let c = format!("e{}", self.rng.gen_range(0..8));
        match self.rng.gen_range(0..10) {
            0 => format!("(>= patient_age_value_recorded_now_in_years {})", self.rng.gen_range(18..70)),
            1 => VariableName::new(vocab::TREATS, &c).render(),
            2 => format!("patient_meets_note_{}_now", self.rng.gen_range(0..3)),
            _ => {
                let rel = [vocab::HAS_FINDING_OF, vocab::HAS_DIAGNOSIS_OF, vocab::HAS_SYMPTOMS_OF][self.rng.gen_range(0..3)];
                let tf = ["now", "inthehistory", "inthepast6months"][self.rng.gen_range(0..3)];
                format!("{}_{tf}", VariableName::new(rel, &c).render())
            }
        }
    }

    fn formula(&mut self, depth: usize) -> String {
        if depth == 0 || self.atoms + 2 >= ENTAILMENT_MAX_ATOMS {
            return self.atom();
        }
        match self.rng.gen_range(0..9) {
            0 | 1 => self.atom(),
            2 => format!("(not {})", self.formula(depth - 1)),
            3 => format!("(and {} {})", self.formula(depth - 1), self.formula(depth - 1)),
            4 | 5 => format!("(or {} {})", self.formula(depth - 1), self.formula(depth - 1)),
            6 => format!("(=> {} {})", self.formula(depth - 1), self.formula(depth - 1)),
            7 => format!("(= {} {})", self.formula(depth - 1), self.formula(depth - 1)),
            _ => format!("(>= (+ (ite {} 1 0) (ite {} 1 0)) 1)", self.formula(depth - 1), self.formula(depth - 1)),
        }
    }
}

fn program_text(rng: &mut ChaCha8Rng, side: &str, i: usize) -> (String, usize) {
    let mut g = FormulaGen { rng, atoms: 0 };
    let mut asserts = Vec::new();
    while g.atoms < ENTAILMENT_MAX_ATOMS - 3 && asserts.len() < 4 {
        let f = g.formula(3);
        let label = ["PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE", "PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE", "OTHER_REQUIREMENTS"][g.rng.gen_range(0..3)];
        asserts.push(format!("(assert (! {f} :named REQ{}_COMPONENT0_{label}))", asserts.len()));
        if g.rng.gen_bool(0.4) {
            break;
        }
    }
    if g.rng.gen_bool(0.3) && g.atoms + 2 <= ENTAILMENT_MAX_ATOMS {
        let (q, p) = (g.atom(), g.atom());
        asserts.push(format!("(assert (! (=> {q} {p}) :named REQ0_AUXILIARY0))"));
    }
    if side == "inclusion" && g.atoms < ENTAILMENT_MAX_ATOMS {
        let t = g.atom();
        asserts.push(format!("(assert (! {t} :named TARGET0))"));
    }
    let mut symbols = BTreeSet::new();
    for a in &asserts {
        for tok in a.split(|c: char| c.is_whitespace() || c == '(' || c == ')') {
            if tok.starts_with("patient_") || tok.starts_with("trial_") {
                symbols.insert(tok.to_string());
            }
        }
    }
    let mut text = format!(";; satir-program trial=NCTE{i:05} subcohort=main side={side}\n");
    for s in symbols {
        let sort = if s.contains("_value_recorded") { "Real" } else { "Bool" };
        text.push_str(&format!("(declare-const {s} {sort})\n"));
    }
    for a in asserts {
        text.push_str(&a);
        text.push('\n');
    }
    (text, g.atoms)
}

fn gate_entailment() -> Outcome {
    let o = entailment_ontology();
    let mut policy = SaliencePolicy::default();
    policy.specificity_allow.push(SpecificityAllow {
        relation: satir_core::RelationId::new(vocab::TREATS),
        concept: ConceptId::new("E6"),
        ancestors: vec![ConceptId::new("E4"), ConceptId::new("E0")],
    });
    let policy = policy.compile(&o).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xe47a11);
    let mut clauses = 0usize;
    for i in 0..ENTAILMENT_FORMULAS {
        let side = if i % 3 == 2 { "exclusion" } else { "inclusion" };
        let (text, atoms) = program_text(&mut rng, side, i);
        if atoms > ENTAILMENT_MAX_ATOMS {
            return Err(format!("generator produced {atoms} atoms"));
        }
        let p = parse_trial_program(&text).map_err(|e| format!("formula {i}: {e}\n{text}"))?;
        let proj = project_trial(&p, &o, &policy, &ProjectionConfig::default()).map_err(|e| format!("formula {i}: {e}"))?;
        clauses += proj.gate.clauses.len();
        match check_gate_entailment(&trial_formula(&p), &proj.gate) {
            Ok(true) => {}
            Ok(false) => return Err(format!("formula {i} not entailed:\n{text}")),
            Err(e) => return Err(format!("formula {i}: {e}")),
        }
    }
    Ok(format!("{ENTAILMENT_FORMULAS} formulas, {clauses} gate clauses, all implied by their trial formula"))
}

fn corpus_round_trip() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus/NCT00362869/main");
    let mut summary = Vec::new();
    for side in ["inclusion", "exclusion"] {
        let path = dir.join(format!("NCT00362869_{side}_program.smt2"));
        let p = parse_trial_file(&path).map_err(|e| format!("{side}: {e}"))?;
        if p.trial_id != "NCT00362869" || p.side.as_str() != side {
            return Err(format!("{side}: identity {} {}", p.trial_id, p.side.as_str()));
        }
        let raw_named = std::fs::read_to_string(&path).map_err(|e| e.to_string())?.matches(":named").count();
        if p.assertions.len() != raw_named {
            return Err(format!("{side}: {} of {raw_named} tags classified", p.assertions.len()));
        }
        let components = p.assertions.iter().filter(|a| matches!(a.tag.kind, TagKind::Component { .. })).count();
        for d in &p.declarations {
            if let AnnotationStatus::Invalid(why) = &d.annotation_status {
                return Err(format!("{side}: {} annotation invalid: {why}", d.name));
            }
        }
        let annotated = p.declarations.iter().filter(|d| d.annotation_status == AnnotationStatus::Valid).count();
        let text = serialize_trial_program(&p);
        let back = parse_trial_program(&text).map_err(|e| format!("{side} reparse: {e}"))?;
        if back != p {
            return Err(format!("{side}: re-parsed program differs"));
        }
        if serialize_trial_program(&back) != text {
            return Err(format!("{side}: serialization not stable"));
        }
        summary.push(format!("{side} {} decls ({annotated} annotated), {} tags ({components} components)", p.declarations.len(), p.assertions.len()));
    }
    Ok(summary.join("; "))
}

/// Name-level rule fixpoint over rendered strings, driven by the raw rule JSON.
struct RegexRules {
    rules: Vec<(Regex, bool, Vec<(String, bool, bool)>)>,
}

const TIMEFRAME_RE: &str = r"now|inthehistory|inthefuture|inthepast\d+[a-z]+|inthefuture\d+[a-z]+|foradurationof\d+[a-z]+";

impl RegexRules {
    fn load() -> Self {
        let raw: Value = serde_json::from_str(DEFAULT_RULES).expect("rules json");
        let mut rules = Vec::new();
        for r in raw["rules"].as_array().expect("rules array") {
            let tmpl = r["match_template"].as_str().expect("template");
            let pattern = regex::escape(tmpl).replace(r"\{e\}", "(?P<e>.+?)").replace(r"\{t\}", &format!("(?P<t>{TIMEFRAME_RE})"));
            let re = Regex::new(&format!("^{pattern}(?P<q>(?:@@[^@]+)*)$")).expect("regex");
            let produce = r["produce"]
                .as_array()
                .expect("produce")
                .iter()
                .map(|p| (p["template"].as_str().expect("t").to_string(), p["value"].as_bool().expect("v"), p["preserve_qualifiers"].as_bool().unwrap_or(false)))
                .collect();
            rules.push((re, r["require_bool"].as_bool().expect("require_bool"), produce));
        }
        RegexRules { rules }
    }

    fn step(&self, name: &str, value: bool) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        for (re, want, produce) in &self.rules {
            if *want != value {
                continue;
            }
            let Some(m) = re.captures(name) else { continue };
            for (t, v, keep) in produce {
                let mut s = t.clone();
                if let Some(e) = m.name("e") {
                    s = s.replace("{e}", e.as_str());
                }
                if let Some(tf) = m.name("t") {
                    s = s.replace("{t}", tf.as_str());
                }
                if *keep {
                    s.push_str(m.name("q").map_or("", |q| q.as_str()));
                }
                out.push((s, *v));
            }
        }
        out
    }

    /// Unbounded fixpoint; windows travel with their source fact.
    fn fixpoint(&self, facts: &[PatientFactRecord]) -> BTreeSet<(String, bool, TimeWindow, TimeWindow)> {
        let mut known = BTreeSet::new();
        let mut todo = Vec::new();
        for f in facts {
            let FactValue::Bool(v) = f.value else { continue };
            let k = (f.name.render(), v, f.possible.clone(), f.certain.clone());
            if known.insert(k.clone()) {
                todo.push(k);
            }
        }
        while let Some((n, v, p, c)) = todo.pop() {
            for (n2, v2) in self.step(&n, v) {
                let k = (n2, v2, p.clone(), c.clone());
                if known.insert(k.clone()) {
                    todo.push(k);
                }
            }
        }
        known
    }
}

fn closure_set(facts: &[PatientFactRecord]) -> BTreeSet<(String, bool, TimeWindow, TimeWindow)> {
    facts
        .iter()
        .filter_map(|f| match f.value {
            FactValue::Bool(v) => Some((f.name.render(), v, f.possible.clone(), f.certain.clone())),
            FactValue::Number(_) => None,
        })
        .collect()
}

fn random_facts(rng: &mut ChaCha8Rng, tokens: &[String]) -> Vec<PatientFactRecord> {
    let rels = [
        vocab::HAS_SUSPICION_OF,
        vocab::HAS_FINDING_OF,
        vocab::HAS_DIAGNOSIS_OF,
        vocab::HAS_SYMPTOMS_OF,
        vocab::HAS_CLINICAL_SIGNS_OF,
        vocab::IS_UNDERGOING,
        vocab::HAS_UNDERGONE,
        vocab::IS_TAKING,
    ];
    let tfs = ["now", "inthehistory", "inthepast2weeks", "foradurationof3days"];
    (0..rng.gen_range(1..10))
        .map(|_| {
            let tf = Timeframe::parse(tfs.choose(rng).expect("tf"));
            let mut name = VariableName::new(rels.choose(rng).expect("rels"), tokens.choose(rng).expect("tokens")).with_timeframe(tf);
            if rng.gen_bool(0.2) {
                name = name.with_qualifier("severe");
            }
            let lo = -rng.gen_range(0..1000i64) as i128;
            let hi = rng.gen_range(0..100i64) as i128;
            let w = TimeWindow::closed(lo, hi).expect("ordered");
            let c = TimeWindow::closed(lo / 2, hi / 2).expect("ordered");
            PatientFactRecord { name, value: FactValue::Bool(rng.gen_bool(0.8)), certain: c, possible: w, source: "acceptance".into() }
        })
        .collect()
}

fn closure_correctness() -> Outcome {
    let oracle = RegexRules::load();
    let rules = RuleSet::default_rules();
    let empty = Ontology::new();
    let rules_only = ClosureConfig { concept_stage: false, causal_stage: false, max_passes: 64, ..ClosureConfig::default() };

    let suspicion = PatientFactRecord {
        name: satir_core::model::parse_variable_name("patient_has_suspicion_of_appendicitis_now").expect("canonical"),
        value: FactValue::Bool(true),
        certain: TimeWindow::point_now(),
        possible: TimeWindow::point_now(),
        source: "acceptance".into(),
    };
    let got = closure_set(&run_closure(std::slice::from_ref(&suspicion), &empty, &rules, &ClosureConfig::default()).records().cloned().collect::<Vec<_>>());
    let want = oracle.fixpoint(std::slice::from_ref(&suspicion));
    if got != want {
        return Err(format!("suspicion closure: got {} facts, rules give {}", got.len(), want.len()));
    }
    for rel in ["finding", "diagnosis", "symptoms"] {
        let n = format!("patient_has_{rel}_of_appendicitis_now");
        if !got.iter().any(|(m, v, _, _)| *m == n && *v) {
            return Err(format!("suspicion closure lacks {n}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xc105);
    let world = generate_world(17, &WorldParams { n_concepts: 40, n_trials: 0, n_patients: 0, ..WorldParams::default() }).map_err(|e| e.to_string())?;
    let tokens: Vec<String> = (0..40).map(|i| default_token(&format!("C{i}"))).collect();
    let tight = ClosureConfig { max_passes: 2, max_derived_per_pass: 7, max_hops_concept: 2, ..ClosureConfig::default() };
    let generous = ClosureConfig { max_passes: 64, ..ClosureConfig::default() };
    let mut fixpoints = 0;
    for i in 0..CLOSURE_FACT_SETS {
        let facts = random_facts(&mut rng, &tokens);
        let r = run_closure(&facts, &empty, &rules, &rules_only);
        if !r.report.fixpoint {
            return Err(format!("set {i}: rule closure hit the pass cap"));
        }
        let got: Vec<PatientFactRecord> = r.records().cloned().collect();
        if closure_set(&got) != oracle.fixpoint(&facts) {
            return Err(format!("set {i}: rule closure differs from the regex fixpoint"));
        }
        let default = run_closure(&facts, &world.ontology, &rules, &ClosureConfig::default());
        if default.report.passes > ClosureConfig::default().max_passes {
            return Err(format!("set {i}: exceeded the pass cap"));
        }
        let full = run_closure(&facts, &world.ontology, &rules, &generous);
        if full.report.fixpoint {
            fixpoints += 1;
            let once: Vec<PatientFactRecord> = full.records().cloned().collect();
            let twice = run_closure(&once, &world.ontology, &rules, &generous);
            let a: BTreeSet<_> = full.keys().into_iter().collect();
            let b: BTreeSet<_> = twice.keys().into_iter().collect();
            if a != b || twice.report.derived != 0 {
                return Err(format!("set {i}: closure not idempotent"));
            }
        }
        let capped = run_closure(&facts, &world.ontology, &rules, &tight);
        if capped.report.passes > tight.max_passes {
            return Err(format!("set {i}: capped closure exceeded the pass cap"));
        }
        let input: BTreeSet<_> = facts.iter().map(satir_core::closure::DedupKey::of).collect();
        let capped_keys: BTreeSet<_> = capped.keys().into_iter().collect();
        if !input.is_subset(&capped_keys) {
            return Err(format!("set {i}: capped closure lost input facts"));
        }
    }
    if fixpoints != CLOSURE_FACT_SETS {
        return Err(format!("only {fixpoints}/{CLOSURE_FACT_SETS} full closures reached a fixpoint"));
    }
    Ok(format!("suspicion derives {} facts; {CLOSURE_FACT_SETS} random sets match the regex fixpoint and are idempotent", got.len() - 1))
}

type Q = Ratio<i128>;

/// Point-witness interval oracle: membership is checked at every endpoint,
/// every midpoint between consecutive endpoints, and one point past each end.
fn witnesses(ws: &[&TimeWindow]) -> Vec<Q> {
    let mut ends: Vec<Q> = ws.iter().flat_map(|w| [w.lower, w.upper]).collect();
    ends.sort();
    ends.dedup();
    let mut pts = ends.clone();
    for p in ends.windows(2) {
        pts.push((p[0] + p[1]) / Q::from_integer(2));
    }
    pts.push(ends[0] - Q::from_integer(1));
    pts.push(ends[ends.len() - 1] + Q::from_integer(1));
    pts
}

fn member(w: &TimeWindow, x: &Q, lower_inc: bool, upper_inc: bool) -> bool {
    (if lower_inc { *x >= w.lower } else { *x > w.lower }) && (if upper_inc { *x <= w.upper } else { *x < w.upper })
}

fn oracle_overlap(a: &TimeWindow, b: &TimeWindow) -> bool {
    witnesses(&[a, b]).iter().any(|x| member(a, x, a.lower_inclusive, a.upper_inclusive) && member(b, x, b.lower_inclusive, b.upper_inclusive))
}

/// Non-strict: inner is a subset of outer. Strict: the closure of inner is a
/// subset of the interior of outer.
fn oracle_contains(outer: &TimeWindow, inner: &TimeWindow, strict: bool) -> bool {
    witnesses(&[outer, inner]).iter().all(|x| {
        let (ili, iui) = if strict { (true, true) } else { (inner.lower_inclusive, inner.upper_inclusive) };
        let (oli, oui) = if strict { (false, false) } else { (outer.lower_inclusive, outer.upper_inclusive) };
        !member(inner, x, ili, iui) || member(outer, x, oli, oui)
    })
}

fn random_window(rng: &mut ChaCha8Rng) -> TimeWindow {
    loop {
        let q = |rng: &mut ChaCha8Rng| Q::new(rng.gen_range(-40..40), rng.gen_range(1..4));
        let (a, b) = (q(rng), q(rng));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if let Ok(w) = TimeWindow::new(lo, hi, rng.gen_bool(0.5), rng.gen_bool(0.5)) {
            return w;
        }
    }
}

fn temporal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e3);
    let mut counts = [0usize; 3];
    for i in 0..TEMPORAL_PAIRS {
        let (a, b) = (random_window(&mut rng), random_window(&mut rng));
        let checks = [
            (inclusion_time_match(&a, &b), oracle_overlap(&a, &b), "overlap"),
            (exclusion_time_match(&a, &b, false), oracle_contains(&a, &b, false), "containment"),
            (exclusion_time_match(&a, &b, true), oracle_contains(&a, &b, true), "strict containment"),
        ];
        for (k, (got, want, what)) in checks.into_iter().enumerate() {
            if got != want {
                return Err(format!("pair {i}: {what} of {a} and {b}: engine {got}, oracle {want}"));
            }
            counts[k] += usize::from(got);
        }
    }
    Ok(format!("{TEMPORAL_PAIRS} pairs agree ({} overlap, {} contained, {} strictly contained)", counts[0], counts[1], counts[2]))
}

fn performance() -> Outcome {
    let params = WorldParams { n_concepts: 1500, n_trials: PERF_TRIALS, n_patients: PERF_PATIENTS, ..WorldParams::default() };
    let w = generate_world(3621, &params).map_err(|e| e.to_string())?;
    let gates = build_gates(&w, &ClosureConfig::default()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::build(&dir.path().join("perf.sqlite"), &gates.all(), &w.ontology).map_err(|e| e.to_string())?;
    let trials: BTreeSet<&str> = w.trials.iter().map(|p| p.trial_id.as_str()).collect();
    let o = Arc::new(w.ontology.clone());
    let obj = ObjectiveConfig::treat_any();
    let opts = RetrievalOptions { workers: 1, ..RetrievalOptions::default() };
    let mut times = Vec::new();
    let mut matched = 0;
    for (pid, _) in &w.patients {
        let t = Instant::now();
        matched += retrieve(&store, &o, &obj, &opts, Some(std::slice::from_ref(pid))).map_err(|e| e.to_string())?.len();
        times.push(t.elapsed());
    }
    times.sort();
    let median = times[times.len() / 2];
    let msg = format!("{} trials, {} patients, median {:.3}s per patient, {matched} matches", trials.len(), times.len(), median.as_secs_f64());
    if trials.len() < PERF_TRIALS || median > PERF_MEDIAN_LIMIT {
        Err(msg)
    } else {
        Ok(msg)
    }
}

fn objective_nesting() -> Outcome {
    let mut sizes = [0usize; 3];
    for seed in 0..NESTING_WORLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1);
        let w = generate_world(seed + 50_000, &sampled_params(&mut rng)).map_err(|e| e.to_string())?;
        let gates = build_gates(&w, &ClosureConfig::default()).map_err(|e| e.to_string())?;
        let mut engine: Vec<BTreeSet<PairKey>> = Vec::new();
        for obj in objectives() {
            engine.push(engine_match(&w, &gates, &obj, &RetrievalOptions::default()).map_err(|e| e.to_string())?);
        }
        for k in 0..2 {
            if !engine[k].is_subset(&engine[k + 1]) {
                let names = objectives();
                return Err(format!("seed {seed}: {} not inside {}", names[k].name, names[k + 1].name));
            }
        }
        for k in 0..3 {
            sizes[k] += engine[k].len();
        }
    }
    Ok(format!("{NESTING_WORLDS} worlds, totals treat-chief {} <= treat-any {} <= relevant-to-any {}", sizes[0], sizes[1], sizes[2]))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("full-recall", full_recall),
        ("gate-entailment", gate_entailment),
        ("corpus-round-trip", corpus_round_trip),
        ("closure-correctness", closure_correctness),
        ("temporal-semantics", temporal),
        ("performance", performance),
        ("objective-nesting", objective_nesting),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
