use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn satir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satir")).args(args).env_remove("SATIR_STORE").env("RUST_LOG", "error").output().expect("binary runs")
}

fn example(p: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/example").join(p).display().to_string()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest_example(store: &Path) -> Output {
    satir(&[
        "ingest",
        "--trials",
        &example("trials"),
        "--patients",
        &example("patients"),
        "--ontology",
        &example("ontology.jsonl"),
        "--extend-ontology",
        "--policy",
        &example("policy.json"),
        "--store",
        path_str(store),
    ])
}

#[test]
fn example_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.sqlite");
    let out = ingest_example(&store);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["trial_programs"], 2);
    assert_eq!(report["patients"], 1);
    assert_eq!(report["counts"]["ecnf"], 3);

    let q = satir(&["query", "--store", path_str(&store), "--objective", "treat-chief"]);
    assert!(q.status.success());
    let hits = lines(&q);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0]["trial_id"], "NCT00362869");
    assert_eq!(hits[0]["patient_id"], "P-HBV");

    let ko = satir(&["query", "--store", path_str(&store), "--knockouts"]);
    assert!(ko.status.success());
    assert!(lines(&ko).is_empty());

    let ex = satir(&["query", "--store", path_str(&store), "--knockouts", "--explain", "--trial", "NCT00362869"]);
    let ex = lines(&ex);
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0]["knocked_out"], true);
}

#[test]
fn store_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("env.sqlite");
    assert!(ingest_example(&store).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_satir")).args(["query", "--format", "table"]).env("SATIR_STORE", &store).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("patient"));
    assert!(text.contains("NCT00362869"));
}

#[test]
fn empty_ingest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("t")).unwrap();
    std::fs::create_dir_all(dir.path().join("p")).unwrap();
    let out = satir(&["ingest", "--trials", path_str(&dir.path().join("t")), "--patients", path_str(&dir.path().join("p")), "--store", path_str(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn generated(dir: &Path, seed: &str, trials: &str) -> PathBuf {
    let corpus = dir.join("corpus");
    let out = satir(&["generate", "--seed", seed, "--trials", trials, "--patients", "5", "--concepts", "40", "--out", path_str(&corpus)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    corpus
}

#[test]
fn one_malformed_file_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generated(dir.path(), "4", "6");
    let programs = std::fs::read_dir(corpus.join("trials")).unwrap().count();
    std::fs::write(corpus.join("trials/NCT0000000_main_inclusion.smt2"), "(assert (and").unwrap();
    let store = dir.path().join("s.sqlite");
    let out = satir(&["build", path_str(&corpus), "--store", path_str(&store)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["trial_programs"].as_u64().unwrap() as usize, programs);
    assert_eq!(r["errors"].as_array().unwrap().len(), 1);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(satir(&["query", "--objective", "treat-everything", "--store", "/nonexistent"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.sqlite");
    assert!(ingest_example(&store).status.success());
    assert_eq!(satir(&["query", "--store", path_str(&store), "--objective", "treat-everything"]).status.code(), Some(64));
    assert_eq!(satir(&["query", "--no-such-flag"]).status.code(), Some(64));
    assert_eq!(satir(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(satir(&["--help"]).status.code(), Some(0));
}

#[test]
fn ontology_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.sqlite");
    assert!(ingest_example(&store).status.success());
    let out = satir(&["query", "--store", path_str(&store), "--ontology", &example("ontology.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ontology"));
}

#[test]
fn objectives_nest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generated(dir.path(), "12", "60");
    let store = dir.path().join("s.sqlite");
    assert!(satir(&["build", path_str(&corpus), "--store", path_str(&store)]).status.success());
    let sets: Vec<BTreeSet<String>> = ["treat-chief", "treat-any", "relevant-to-any"]
        .iter()
        .map(|o| lines(&satir(&["query", "--store", path_str(&store), "--objective", o, "--workers", "2"])).iter().map(|v| format!("{}/{}/{}", v["trial_id"], v["subcohort"], v["patient_id"])).collect())
        .collect();
    assert!(sets[0].is_subset(&sets[1]));
    assert!(sets[1].is_subset(&sets[2]));
    assert!(!sets[2].is_empty());
}

#[test]
fn verify_reports_full_recall() {
    let out = satir(&["verify", "--seeds", "3", "--trials", "30", "--patients", "5", "--concepts", "30", "--objective", "relevant-to-any"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = stdout_json(&out);
    assert_eq!(r["missed_pairs"], 0);
    assert_eq!(r["recall"], 1.0);
}

#[test]
fn bench_repetitions_do_not_change_results() {
    let run = |reps: &str| stdout_json(&satir(&["bench", "--trials", "80", "--patients", "2", "--concepts", "50", "--repetitions", reps, "--naive"]));
    let one = run("1");
    let five = run("5");
    assert_eq!(one["matches"], five["matches"]);
    assert_eq!(five["results_identical_across_repetitions"], true);
    assert!(five["median_seconds_per_patient"].as_f64().unwrap() >= 0.0);
    assert_eq!(one["naive_baseline"]["matches"], one["matches"]);
}

#[test]
fn closure_prints_derived_facts() {
    let out = satir(&["closure", &example("patients/P-HBV.json"), "--ontology", &example("ontology.jsonl")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let names: BTreeSet<&str> = v["facts"].as_array().unwrap().iter().map(|f| f["entity_variable_name"].as_str().unwrap()).collect();
    assert!(names.contains("patient_has_finding_of_chronic_disease"));
    assert!(names.contains("patient_has_finding_of_type_b_viral_hepatitis"));
    assert!(v["report"]["fixpoint"].as_bool().unwrap());
}
