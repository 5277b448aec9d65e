use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spare-lab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 6] = ["--set", "train.epochs=2", "--set", "train.block_epochs=1", "--set", "train.hidden=[8]"];

#[test]
fn gen_data_is_versioned_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--count", "12", "--extras", "1", "--seed", "4", "--out", "a.jsonl"]);
    ok(p, &["gen-data", "--count", "12", "--extras", "1", "--seed", "4", "--out", "b.jsonl"]);
    let a = std::fs::read_to_string(p.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("b.jsonl")).unwrap());
    assert_eq!(a.lines().next().unwrap(), r#"{"format":"spare-experiences","version":1}"#);
    assert_eq!(a.lines().count(), 13);
}

#[test]
fn single_and_baseline_models_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--count", "40", "--seed", "2", "--out", "d.jsonl"]);
    let mut single = vec!["train-single", "--data", "d.jsonl", "--max-refs", "1", "--seed", "3", "--out", "s1.json"];
    single.extend(TINY);
    ok(p, &single);
    single[8] = "s2.json";
    ok(p, &single);
    let s1 = std::fs::read(p.join("s1.json")).unwrap();
    assert_eq!(s1, std::fs::read(p.join("s2.json")).unwrap());
    assert!(ok(p, &["eval", "--model", "s1.json", "--data", "d.jsonl"]).contains("single model, 40 samples"));

    let mut base = vec!["train-baseline", "--data", "d.jsonl", "--ordering", "none", "--out", "b.json"];
    base.extend(TINY);
    ok(p, &base);
    let line = ok(p, &["eval", "--model", "b.json", "--data", "d.jsonl", "--scope", "all-objects"]);
    assert!(line.starts_with("baseline model"), "{line}");
}

#[test]
fn em_writes_model_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--count", "40", "--mix", "2:0.5,3:0.5", "--out", "m.jsonl"]);
    ok(
        p,
        &[
            "train-em", "--data", "m.jsonl", "--K", "2", "--kappa", "2", "--iters", "1", "--label-init", "0.7",
            "--out", "e.json", "--trace", "t.csv", "--set", "greedy.max_refs=1", "--set", "greedy.train.epochs=2",
            "--set", "greedy.train.block_epochs=1", "--set", "greedy.train.hidden=[8]",
        ],
    );
    let trace = std::fs::read_to_string(p.join("t.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("# spare-em-trace v1"));
    assert_eq!(lines.next(), Some("iteration,rule,top_weights,stack_height,membership"));
    // two iterations (init plus one), two rules, two heights
    assert_eq!(lines.count(), 8);
    assert!(ok(p, &["eval", "--model", "e.json", "--data", "m.jsonl", "--scope", "all-objects"]).starts_with("mixture"));
    assert!(!lab(p, &["eval", "--model", "e.json", "--data", "m.jsonl"]).status.success());
}

#[test]
fn check_exit_code_follows_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut csv = String::from("# spare-metrics v1; log-likelihoods are per-sample means of summed per-cell log-densities\n");
    csv.push_str("experiment,seed,variable,x,model,metric,value\n");
    for seed in 0..3 {
        for (ordering, v) in [("random", 1.0), ("sorted-by-pose", 2.0), ("oracle-stack", 3.0)] {
            csv.push_str(&format!("ordering-study,{seed},extras,2,baseline-{ordering},test_ll_stack,{v}\n"));
        }
    }
    std::fs::write(p.join("good.csv"), &csv).unwrap();
    let out = ok(p, &["experiment", "check", "ordering-study", "--metrics", "good.csv"]);
    assert!(out.starts_with("criterion 6 [ordering-study] PASS"), "{out}");

    std::fs::write(p.join("bad.csv"), csv.replace("oracle-stack,test_ll_stack,3", "oracle-stack,test_ll_stack,0")).unwrap();
    let out = lab(p, &["experiment", "check", "ordering-study", "--metrics", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn defaults_print_as_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = ok(p, &["experiment", "defaults", "init-tables"]);
    assert!(text.contains("experiment = \"init-tables\""));
    std::fs::write(p.join("c.toml"), text).unwrap();
    // a config for another experiment is refused before any work starts
    assert!(!lab(p, &["experiment", "run", "ref-ablation", "--config", "c.toml"]).status.success());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(!lab(p, &["experiment", "run", "fig-9"]).status.success());
    assert!(!lab(p, &["eval", "--model", "missing.json", "--data", "missing.jsonl"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_spare-lab"))
        .args(["experiment", "defaults", "ref-ablation"])
        .env("SPARE_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SPARE_LAB_THREADS"));
}
