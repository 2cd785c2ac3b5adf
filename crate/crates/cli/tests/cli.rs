//! End-to-end runs of the `peneo` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peneo_core::corpus::fixtures::entity_level_form;
use peneo_core::corpus::{load_dataset, save_dataset};

const TINY: &str = "c_e = 16\nlayers = 1\nheads = 2\nepochs = 2\nmax_tokens = 40\nsynth_docs = 8\n";

fn peneo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peneo")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny config plus an 8-document synthetic corpus.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let synth = dir.join("synth");
    ok(&peneo(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&synth)]));
    (cfg, synth.join("corpus.json"))
}

#[test]
fn train_and_eval_are_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let m = t.path().join(format!("model-{run}"));
        ok(&peneo(&["train", "--config", s(&cfg), "--train", s(&corpus), "--val", s(&corpus), "--seed", "3", "--out", s(&m)]));
        let e = t.path().join(format!("eval-{run}"));
        ok(&peneo(&["eval", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--seed", "3", "--out", s(&e)]));
        ckpts.push(fs::read(m.join("model.ckpt")).unwrap());
        reports.push((fs::read(e.join("report.json")).unwrap(), fs::read(e.join("substitution.json")).unwrap()));
        let log: serde_json::Value = serde_json::from_slice(&fs::read(m.join("train_log.json")).unwrap()).unwrap();
        assert_eq!(log.as_array().unwrap().len(), 2);
    }
    assert_eq!(ckpts[0], ckpts[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn report_does_not_depend_on_thread_count() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let m = t.path().join("model");
    ok(&peneo(&["train", "--config", s(&cfg), "--train", s(&corpus), "--set", "epochs=1", "--out", s(&m)]));
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let e = t.path().join(format!("eval-{threads}"));
        ok(&peneo(&["eval", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--threads", threads, "--out", s(&e)]));
        reports.push(fs::read(e.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn manifest_records_the_run() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let m = t.path().join("model");
    ok(&peneo(&["train", "--config", s(&cfg), "--train", s(&corpus), "--seed", "11", "--set", "epochs=1", "--out", s(&m)]));
    let man: serde_json::Value = serde_json::from_slice(&fs::read(m.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["command"], "train");
    assert_eq!(man["seed"], 11);
    assert_eq!(man["config"]["epochs"], 1);
    assert_eq!(man["config"]["c_e"], 16);
    assert_eq!(man["pipeline"], "peneo");
    assert!(man["inputs"]["train_data"].as_str().unwrap().len() == 64);
    assert!(man["versions"]["peneo_core"].is_string());
    // the resolved config re-runs the same training
    let again = t.path().join("again.cfg");
    fs::write(&again, man["config_text"].as_str().unwrap()).unwrap();
    let m2 = t.path().join("model2");
    ok(&peneo(&["train", "--config", s(&again), "--out", s(&m2)]));
    assert_eq!(fs::read(m.join("model.ckpt")).unwrap(), fs::read(m2.join("model.ckpt")).unwrap());
}

#[test]
fn empty_training_set_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty.json");
    fs::write(&empty, "{\"documents\": []}").unwrap();
    let out = peneo(&["train", "--train", s(&empty), "--set", "epochs=1", "--out", s(&t.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty training set"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let out = peneo(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = peneo(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\ncolour = blue\n").unwrap();
    let out = peneo(&["synth", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown config key `colour`"));

    fs::write(&cfg, "epochs = lots\n").unwrap();
    let out = peneo(&["synth", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`epochs`"));

    let out = peneo(&["train", "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1), "missing training data");
    let out = peneo(&["synth", "--set", "synth_multi_line_frac=2", "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1), "invalid synthetic spec");

    assert_eq!(peneo(&["--help"]).status.code(), Some(0));
    assert_eq!(peneo(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_or_corrupt_inputs_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let out = peneo(&["train", "--train", s(&t.path().join("nope.json")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let model = t.path().join("model");
    fs::create_dir_all(&model).unwrap();
    fs::write(model.join("model.ckpt"), b"garbage").unwrap();
    let (_, corpus) = setup(t.path());
    let out = peneo(&["eval", "--model", s(&model), "--data", s(&corpus), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gold_matrices_score_one() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let e = t.path().join("gold");
    ok(&peneo(&["eval", "--config", s(&cfg), "--gold", "--data", s(&corpus), "--out", s(&e)]));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(e.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["aggregate"]["pair_f1"], 1.0);
    assert_eq!(r["aggregate"]["num_docs"], 8);
}

#[test]
fn parse_writes_one_entry_per_document() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let m = t.path().join("model");
    ok(&peneo(&["train", "--config", s(&cfg), "--train", s(&corpus), "--set", "epochs=1", "--out", s(&m)]));
    let p = t.path().join("parse");
    ok(&peneo(&["parse", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--out", s(&p)]));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(p.join("pairs.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 8);
    assert!(v[0]["doc_id"].as_str().unwrap().starts_with("synth-5-"));
}

#[test]
fn baseline_train_parse_and_perturb() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, corpus) = setup(t.path());
    let m = t.path().join("serre");
    ok(&peneo(&["train", "--config", s(&cfg), "--pipeline", "serre", "--train", s(&corpus), "--out", s(&m)]));
    assert_eq!(fs::read_to_string(m.join("pipeline")).unwrap().trim(), "serre");

    let p = t.path().join("parse");
    ok(&peneo(&["parse", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--out", s(&p)]));
    assert!(p.join("ser.json").exists());

    // linking the model's own exported entities reproduces its end-to-end report
    let e1 = t.path().join("e1");
    let e2 = t.path().join("e2");
    ok(&peneo(&["eval", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--out", s(&e1)]));
    ok(&peneo(&["eval", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--ser", s(&p.join("ser.json")), "--out", s(&e2)]));
    let agg = |d: &Path| -> serde_json::Value {
        serde_json::from_slice::<serde_json::Value>(&fs::read(d.join("report.json")).unwrap()).unwrap()["aggregate"].clone()
    };
    assert_eq!(agg(&e1), agg(&e2));

    let q = t.path().join("perturb");
    ok(&peneo(&["perturb", "--config", s(&cfg), "--model", s(&m), "--data", s(&corpus), "--set", "perturb_seeds=1", "--out", s(&q)]));
    let csv = fs::read_to_string(q.join("perturb.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0], "error_type,p,precision,recall,f1,eligible,perturbed");
    for kind in ["FN", "FP", "CE", "EF"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(&format!("{kind},"))).count(), 6);
    }

    let out = peneo(&["perturb", "--model", s(&m), "--pipeline", "peneo", "--data", s(&corpus), "--out", s(&q)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn relabel_writes_lines_and_review_sidecar() {
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("entities.json");
    save_dataset(&input, &[entity_level_form()]).unwrap();
    let o = t.path().join("relabel");
    ok(&peneo(&["relabel", "--data", s(&input), "--out", s(&o)]));
    let back = load_dataset(&o.join("lines.json")).unwrap();
    assert_eq!(back.skipped, 0);
    assert_eq!(back.documents.len(), 1);
    assert!(back.documents[0].lines.len() > entity_level_form().lines.len());
    let review: serde_json::Value = serde_json::from_slice(&fs::read(o.join("lines.review.json")).unwrap()).unwrap();
    assert!(review.is_array());
}

#[test]
fn gradcheck_passes_for_both_pipelines() {
    let t = tempfile::tempdir().unwrap();
    for pipeline in ["peneo", "serre"] {
        let o = t.path().join(pipeline);
        let out = peneo(&["gradcheck", "--pipeline", pipeline, "--out", s(&o)]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
        let r: serde_json::Value = serde_json::from_slice(&fs::read(o.join("gradcheck.json")).unwrap()).unwrap();
        assert!(r["max_rel_error"].as_f64().unwrap() < 1e-3);
    }
}
