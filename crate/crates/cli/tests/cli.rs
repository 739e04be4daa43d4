use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_arbiter-itc");

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    root().join("crates/core/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ARBITER_ITC_SEED").output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn assert_schema(schema: &str, path: &Path) {
    let def = load(&root().join("schemas").join(format!("{schema}.schema.json")));
    let compiled = jsonschema::JSONSchema::compile(&def).expect("valid schema");
    let doc = load(path);
    let msgs: Vec<String> = match compiled.validate(&doc) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{} does not match {schema}: {msgs:?}", path.display());
}

#[test]
fn reproduce_default_run_prints_the_worked_example() {
    let o = run(&["reproduce-paper"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for needle in ["A vs B 0.4249", "B vs A 0.4018", "1.2993", "A vs B, IPD shared:           0.0000", "2/3", "1/3"] {
        assert!(s.contains(needle), "missing {needle:?} in\n{s}");
    }
    assert!(s.contains("checks passed: 13/13"));
}

#[test]
fn reproduce_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reproduce-paper", "--json", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["all_pass"], Value::Bool(true));
    assert!((v["classic_a"]["estimate"].as_f64().unwrap() - 0.42).abs() < 0.005);
    assert!((v["classic_b"]["estimate"].as_f64().unwrap() - 0.40).abs() < 0.005);
    assert!(v["arbitrated"].as_f64().unwrap().abs() < 1e-10);
    assert_eq!(load(&dir.path().join("reproduce-report.json")), v);
}

fn copy_fixtures(dir: &Path) {
    for f in ["example_ac.csv", "example_bc.csv", "example_ac_agd.json", "example_bc_agd.json"] {
        std::fs::copy(fixture(f), dir.join(f)).unwrap();
    }
}

#[test]
fn reproduce_from_copied_fixtures_passes() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixtures(dir.path());
    let o = run(&["reproduce-paper", "--fixtures", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn reproduce_tampered_outcome_fails() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixtures(dir.path());
    let path = dir.path().join("example_ac.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // flip one outcome in the first data row
    let fields: Vec<&str> = lines[1].split(',').collect();
    let flipped = if fields[2] == "0" { "1" } else { "0" };
    lines[1] = format!("{},{},{},{}", fields[0], fields[1], flipped, fields[3..].join(","));
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = run(&["reproduce-paper", "--fixtures", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("MISMATCH"));
}

#[test]
fn reproduce_missing_fixture_fails() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixtures(dir.path());
    std::fs::remove_file(dir.path().join("example_bc_agd.json")).unwrap();
    let o = run(&["reproduce-paper", "--fixtures", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn maic_classic_sponsor_a() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "maic",
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--agd",
        p(&fixture("example_bc_agd.json")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("A vs B: 0.42"));
    assert_schema("maic-report", &dir.path().join("maic-report.json"));
    assert_schema("maic-weights", &dir.path().join("maic-weights.json"));
    let w = load(&dir.path().join("maic-weights.json"));
    assert_eq!(w["weights"].as_array().unwrap().len(), 1200);
    let report = load(&dir.path().join("maic-report.json"));
    let bal = &report["balance"][0];
    assert!((bal["weighted"].as_f64().unwrap() - bal["target"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn maic_same_trial_is_usage_error() {
    let o = run(&["maic", "--ipd", p(&fixture("example_ac.csv")), "--agd", p(&fixture("example_ac_agd.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn maic_out_of_range_target_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut agd = load(&fixture("example_bc_agd.json"));
    agd["covariate_means"][0] = Value::from(1.5);
    let path = dir.path().join("agd.json");
    std::fs::write(&path, agd.to_string()).unwrap();
    let o = run(&["maic", "--ipd", p(&fixture("example_ac.csv")), "--agd", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn maic_target_outside_hull_fails() {
    // every AC subject shares one value, so a different target is unreachable
    let dir = tempfile::tempdir().unwrap();
    let ipd = dir.path().join("ac.csv");
    let text = std::fs::read_to_string(fixture("example_ac.csv")).unwrap();
    let rows: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { l.to_string() } else { format!("{},0", l.rsplit_once(',').unwrap().0) })
        .collect();
    std::fs::write(&ipd, rows.join("\n") + "\n").unwrap();
    let o = run(&["maic", "--ipd", p(&ipd), "--agd", p(&fixture("example_bc_agd.json"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

fn arbitrate(args: &[&str]) -> Output {
    let mut all = vec!["arbitrate"];
    all.extend_from_slice(args);
    let o = run(&all);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn protocol1_walkthrough() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let cfg = fixture("protocol1_config.json");
    let cfg = p(&cfg);
    arbitrate(&[
        "--role",
        "arbitrator-weights",
        "--config",
        cfg,
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--out",
        out,
    ]);
    let wa = dir.path().join("weights-package-sponsorA.json");
    let wb = dir.path().join("weights-package-sponsorB.json");
    assert_schema("weights-package", &wa);
    assert_schema("weights-package", &wb);
    arbitrate(&["--role", "sponsor-run", "--config", cfg, "--ipd", p(&fixture("example_ac.csv")), "--weights", p(&wa), "--out", out]);
    arbitrate(&["--role", "sponsor-run", "--config", cfg, "--ipd", p(&fixture("example_bc.csv")), "--weights", p(&wb), "--out", out]);
    let ra = dir.path().join("results-package-sponsorA.json");
    let rb = dir.path().join("results-package-sponsorB.json");
    assert_schema("results-package", &ra);
    assert_schema("results-package", &rb);
    let o = arbitrate(&["--role", "arbitrator-combine", "--config", cfg, "--results", p(&ra), "--results", p(&rb), "--out", out]);
    assert!(stdout(&o).contains("0.0000"));
    let combined = dir.path().join("arbitrated-result.json");
    assert_schema("arbitrated-result", &combined);
    assert!(load(&combined)["estimate"]["point"].as_f64().unwrap().abs() < 1e-10);
}

#[test]
fn protocol1_order_free_ipd_inference() {
    // files carry their arms, so passing BC first still routes correctly
    let dir = tempfile::tempdir().unwrap();
    arbitrate(&[
        "--role",
        "arbitrator-weights",
        "--config",
        p(&fixture("protocol1_config.json")),
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--out",
        p(dir.path()),
    ]);
    let wa = load(&dir.path().join("weights-package-sponsorA.json"));
    assert!(wa["subject_ids"][0].as_str().unwrap().starts_with("AC"));
}

#[test]
fn protocol2_walkthrough_matches_protocol1() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let cfg = fixture("protocol2_config.json");
    let cfg = p(&cfg);
    arbitrate(&[
        "--role",
        "sponsor-selfservice",
        "--config",
        cfg,
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--agd",
        p(&fixture("example_bc_agd.json")),
        "--out",
        out,
    ]);
    arbitrate(&[
        "--role",
        "sponsor-selfservice",
        "--config",
        cfg,
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--agd",
        p(&fixture("example_ac_agd.json")),
        "--out",
        out,
    ]);
    let ra = dir.path().join("results-package-sponsorA.json");
    let rb = dir.path().join("results-package-sponsorB.json");
    assert_schema("results-package", &ra);
    assert!(load(&ra)["covariate_matrix_hash"].is_string());
    let o = arbitrate(&["--role", "arbitrator-combine", "--config", cfg, "--results", p(&ra), "--results", p(&rb), "--out", out]);
    assert!(stdout(&o).contains("0.0000"));
    assert!(load(&dir.path().join("arbitrated-result.json"))["estimate"]["point"].as_f64().unwrap().abs() < 1e-10);
}

#[test]
fn wrong_recipient_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("protocol1_config.json");
    arbitrate(&[
        "--role",
        "arbitrator-weights",
        "--config",
        p(&cfg),
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--out",
        p(dir.path()),
    ]);
    let o = run(&[
        "arbitrate",
        "--role",
        "sponsor-run",
        "--config",
        p(&cfg),
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--weights",
        p(&dir.path().join("weights-package-sponsorA.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn combine_rejects_foreign_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let cfg = fixture("protocol1_config.json");
    arbitrate(&[
        "--role",
        "arbitrator-weights",
        "--config",
        p(&cfg),
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--ipd",
        p(&fixture("example_bc.csv")),
        "--out",
        out,
    ]);
    for (t, s) in [("ac", "A"), ("bc", "B")] {
        arbitrate(&[
            "--role",
            "sponsor-run",
            "--config",
            p(&cfg),
            "--ipd",
            p(&fixture(&format!("example_{t}.csv"))),
            "--weights",
            p(&dir.path().join(format!("weights-package-sponsor{s}.json"))),
            "--out",
            out,
        ]);
    }
    let o = run(&[
        "arbitrate",
        "--role",
        "arbitrator-combine",
        "--config",
        p(&fixture("protocol2_config.json")),
        "--results",
        p(&dir.path().join("results-package-sponsorA.json")),
        "--results",
        p(&dir.path().join("results-package-sponsorB.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_flag_conflicting_with_config_is_usage_error() {
    let o = run(&[
        "arbitrate",
        "--role",
        "sponsor-selfservice",
        "--config",
        p(&fixture("protocol2_config.json")),
        "--seed",
        "7",
        "--ipd",
        p(&fixture("example_ac.csv")),
        "--agd",
        p(&fixture("example_bc_agd.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seedless_protocol2_takes_seed_from_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(&fixture("protocol2_config.json"));
    cfg.as_object_mut().unwrap().remove("seed");
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let (ac, bc_agd) = (fixture("example_ac.csv"), fixture("example_bc_agd.json"));
    let args = [
        "arbitrate",
        "--role",
        "sponsor-selfservice",
        "--config",
        p(&path),
        "--ipd",
        p(&ac),
        "--agd",
        p(&bc_agd),
        "--json",
    ];
    assert_eq!(run(&args).status.code(), Some(2), "no seed anywhere");

    let seed_of = |o: &Output| {
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v["covgen_model"]["generator"]["seed"].as_u64().unwrap()
    };
    let env = Command::new(BIN).args(args).env("ARBITER_ITC_SEED", "11").output().unwrap();
    assert_eq!(seed_of(&env), 11);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--seed", "12"]);
    let both = Command::new(BIN).args(&with_flag).env("ARBITER_ITC_SEED", "11").output().unwrap();
    assert_eq!(seed_of(&both), 12);
}

#[test]
fn simulate_paradox_flips_sign() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        "--scenario",
        p(&fixture("paradox_scenario.json")),
        "--replicates",
        "200",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("study-report.json");
    assert_schema("study-report", &report);
    let v = load(&report);
    assert!(v["sign_flip_rate"].as_f64().unwrap() >= 0.9);
    assert_eq!(v["all_methods_agree"], Value::Bool(false));
    let text = std::fs::read_to_string(dir.path().join("study-report.txt")).unwrap();
    assert_eq!(text, stdout(&o));
}

#[test]
fn simulate_no_modification_agrees() {
    let o = run(&["simulate", "--scenario", p(&fixture("no_modification_scenario.json")), "--replicates", "100", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["all_methods_agree"], Value::Bool(true));
}

#[test]
fn simulate_zero_replicates_is_usage_error() {
    let o = run(&["simulate", "--scenario", p(&fixture("paradox_scenario.json")), "--replicates", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_bad_env_seed_is_usage_error() {
    let o = Command::new(BIN)
        .args(["simulate", "--scenario", p(&fixture("paradox_scenario.json")), "--replicates", "3"])
        .env("ARBITER_ITC_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let scenario = fixture("paradox_scenario.json");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "simulate",
            "--scenario",
            p(&scenario),
            "--replicates",
            "60",
            "--seed",
            "99",
            "--threads",
            threads,
            "--out",
            p(dir.path()),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["study-report.json", "study-report.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn input_fixtures_match_their_schemas() {
    assert_schema("arbitration-config", &fixture("protocol1_config.json"));
    assert_schema("arbitration-config", &fixture("protocol2_config.json"));
    assert_schema("agd-summary", &fixture("example_ac_agd.json"));
    assert_schema("agd-summary", &fixture("example_bc_agd.json"));
    assert_schema("scenario", &fixture("paradox_scenario.json"));
    assert_schema("scenario", &fixture("no_modification_scenario.json"));
}
