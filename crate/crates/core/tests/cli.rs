use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn confaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confaudit"))
        .args(args)
        .current_dir(dir)
        .env_remove("CONFAUDIT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = confaudit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn predictor_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("predictor_"))
        .collect();
    names.sort();
    names
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn calibrate_writes_one_file_per_method_and_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--preset", "shift", "--n", "300", "--k", "5", "--out", "data.csv"]);
    let args = ["calibrate", "--input", "data.csv", "--methods", "aps,gaps", "--alphas", "0.1", "--out-dir", "a"];
    ok(d, &args);
    assert_eq!(predictor_files(&d.join("a")), vec!["predictor_aps_0.1.json", "predictor_gaps_0.1.json"]);

    let mut again = args;
    again[args.len() - 1] = "b";
    ok(d, &again);
    for name in predictor_files(&d.join("a")) {
        let a = read_json(&d.join("a").join(&name));
        let b = read_json(&d.join("b").join(&name));
        // the echoed output directory is the only difference
        assert_eq!(a["predictor"], b["predictor"]);
    }
    ok(d, &args);
    let first = fs::read(d.join("a/predictor_gaps_0.1.json")).unwrap();
    ok(d, &args);
    assert_eq!(first, fs::read(d.join("a/predictor_gaps_0.1.json")).unwrap());

    let file = read_json(&d.join("a/predictor_gaps_0.1.json"));
    assert_eq!(file["config"]["command"], "calibrate");
    assert_eq!(file["predictor"]["method"], "gaps");
    assert!(file["predictor"]["group_quantiles"]["hard"].is_number());
    assert!(file["toolkit_version"].is_string());
}

#[test]
fn small_group_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = serde_json::json!({
        "k": 3,
        "seed": 1,
        "groups": [
            {"name": "big", "n_records": 400, "class_prevalence": [0.5, 0.3, 0.2], "difficulty": 1.5},
            {"name": "tiny", "n_records": 8, "class_prevalence": [0.5, 0.3, 0.2], "difficulty": 1.5}
        ]
    });
    fs::write(d.join("gen.json"), config.to_string()).unwrap();
    ok(d, &["simulate", "--config", "gen.json", "--out", "data.jsonl"]);
    let out = ok(d, &["calibrate", "--input", "data.jsonl", "--methods", "gaps", "--alphas", "0.1"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning") && stderr.contains("tiny"), "{stderr}");
    let file = read_json(&d.join("predictor_gaps_0.1.json"));
    assert_eq!(file["predictor"]["group_quantiles"]["tiny"], "inf");
    assert!(file["predictor"]["warnings"][0].as_str().unwrap().contains("tiny"));
}

#[test]
fn full_grid_audit_has_25_entries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "1400", "--mc-samples", "4", "--seed", "3", "--out", "data.jsonl"]);
    ok(d, &["calibrate", "--input", "data.jsonl", "--seed", "3", "--out-dir", "run"]);
    assert_eq!(predictor_files(&d.join("run")).len(), 25);
    ok(d, &[
        "audit", "--predictors", "run", "--test", "run/test_split.jsonl", "--critical", "2", "--svg", "--out-dir", "run",
    ]);
    let report = read_json(&d.join("run/audit_report.json"));
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 25);
    assert_eq!(report["config"]["command"], "audit");
    for e in entries {
        let groups = e["groups"].as_object().unwrap();
        assert_eq!(groups.len(), 7);
        assert!(e["coverage_disparity"].as_f64().unwrap() >= 0.0);
        let overall = &e["overall"];
        let cov = overall["coverage"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&cov));
        let n = overall["count"].as_u64().unwrap();
        assert_eq!(overall["rule_in_count"].as_u64().unwrap() + overall["rule_out_count"].as_u64().unwrap(), n);
    }
    let csv = fs::read_to_string(d.join("run/audit_report.csv")).unwrap();
    assert!(csv.starts_with("# toolkit_version"));
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        "method,alpha,group,coverage,set_size,rule_in,rule_out,spearman_softmax,spearman_entropy,coverage_disparity,set_size_disparity"
    );
    // 25 entries x (7 groups + the all row)
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 25 * 8);
    assert!(d.join("run/scatter_gaps_0.1_entropy.svg").exists());
    assert!(d.join("run/test_split.jsonl.config.json").exists());
}

#[test]
fn single_group_reports_null_disparity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("id,group,label,p0,p1,p2\n");
    for i in 0..60 {
        let top = 0.4 + 0.01 * i as f64;
        let rest = 1.0 - top;
        csv.push_str(&format!("r{i},only,{},{top},{},{}\n", i % 3, rest * 0.6, rest * 0.4));
    }
    fs::write(d.join("one.csv"), csv).unwrap();
    ok(d, &["calibrate", "--input", "one.csv", "--methods", "aps,gaps", "--alphas", "0.2"]);
    ok(d, &["audit", "--predictors", ".", "--test", "test_split.jsonl"]);
    let report = read_json(&d.join("audit_report.json"));
    for e in report["entries"].as_array().unwrap() {
        assert!(e["coverage_disparity"].is_null());
        assert!(e["set_size_disparity"].is_null());
        assert!(e["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("disparity undefined")));
    }
    // identical quantiles for APS and GAPS on one group
    let aps = read_json(&d.join("predictor_aps_0.2.json"));
    let gaps = read_json(&d.join("predictor_gaps_0.2.json"));
    assert_eq!(aps["predictor"]["quantile"], gaps["predictor"]["group_quantiles"]["only"]);
}

#[test]
fn compare_checks_methods() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--preset", "shift", "--n", "200", "--k", "4", "--out", "data.csv"]);
    ok(d, &["calibrate", "--input", "data.csv", "--methods", "aps,gaps", "--alphas", "0.1,0.2"]);

    let out = confaudit(d, &["compare", "--predictors", ".", "--test", "test_split.jsonl", "--methods", "raps,graps"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("available: aps, gaps"), "{stderr}");

    let out = confaudit(d, &["compare", "--predictors", ".", "--test", "test_split.jsonl", "--methods", "aps"]);
    assert_eq!(out.status.code(), Some(1));

    let out = ok(d, &["compare", "--predictors", ".", "--test", "test_split.jsonl", "--methods", "aps,gaps"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 5);
    let csv = fs::read_to_string(d.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4 * 4);
    ok(d, &["compare", "--predictors", ".", "--test", "test_split.jsonl", "--methods", "aps,gaps"]);
    assert_eq!(csv, fs::read_to_string(d.join("compare.csv")).unwrap());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}

#[test]
fn compare_on_shifted_data_favours_group_methods() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut per_alpha: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
    for seed in 0..5 {
        let s = seed.to_string();
        let run = format!("run{seed}");
        ok(d, &["simulate", "--preset", "shift", "--n", "1200", "--seed", &s, "--out", "data.csv"]);
        ok(d, &["calibrate", "--input", "data.csv", "--methods", "aps,gaps", "--randomized", "--seed", &s, "--out-dir", &run]);
        let test = format!("{run}/test_split.jsonl");
        ok(d, &["compare", "--predictors", &run, "--test", &test, "--methods", "aps,gaps", "--out-dir", &run]);
        let text = fs::read_to_string(d.join(&run).join("compare.csv")).unwrap();
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        for row in reader.records() {
            let row = row.unwrap();
            if &row[2] != "all" {
                continue;
            }
            let disp: f64 = row[9].parse().unwrap();
            let entry = per_alpha.entry(row[1].to_string()).or_default();
            match &row[0] {
                "aps" => entry.0.push(disp),
                "gaps" => entry.1.push(disp),
                other => panic!("unexpected method {other}"),
            }
        }
    }
    assert_eq!(per_alpha.len(), 5);
    for (alpha, (aps, gaps)) in per_alpha {
        assert!(median(gaps.clone()) <= median(aps.clone()), "alpha {alpha}: {gaps:?} vs {aps:?}");
    }
}

#[test]
fn predict_emits_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--preset", "shift", "--n", "100", "--k", "4", "--scale", "logit", "--out", "logits.jsonl"]);
    ok(d, &["calibrate", "--input", "logits.jsonl", "--scale", "logit", "--methods", "gaps", "--alphas", "0.2"]);
    let predictor = read_json(&d.join("predictor_gaps_0.2.json"));
    assert_eq!(predictor["predictor"]["temperature"]["scope"], "global");
    assert_eq!(predictor["predictor"]["input_scale"], "logit");

    ok(d, &["predict", "--predictor", "predictor_gaps_0.2.json", "--input", "test_split.jsonl"]);
    let text = fs::read_to_string(d.join("predictions_gaps_0.2.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 150);
    for l in &lines {
        let set = l["set"].as_array().unwrap();
        assert_eq!(set.len() as u64, l["set_size"].as_u64().unwrap());
        assert!(!set.is_empty());
        assert_eq!(l["method"], "gaps");
        assert_eq!(l["alpha"], 0.2);
        assert_eq!(l["group_used"], l["group"]);
    }
    assert!(d.join("predictions_gaps_0.2.jsonl.config.json").exists());
}

#[test]
fn unseen_group_uses_policy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--preset", "shift", "--n", "100", "--k", "3", "--out", "data.csv"]);
    ok(d, &["calibrate", "--input", "data.csv", "--methods", "gaps", "--alphas", "0.1"]);
    fs::write(d.join("new.csv"), "id,group,label,p0,p1,p2\nx,7,0,0.5,0.3,0.2\n").unwrap();
    let out = ok(d, &["predict", "--predictor", "predictor_gaps_0.1.json", "--input", "new.csv", "--out", "p.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"7\""));
    let line: Value = serde_json::from_str(fs::read_to_string(d.join("p.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["unseen_group_policy"], "fallback-aggregate");

    ok(d, &[
        "predict", "--predictor", "predictor_gaps_0.1.json", "--input", "new.csv", "--policy", "full-set", "--out", "q.jsonl",
    ]);
    let line: Value = serde_json::from_str(fs::read_to_string(d.join("q.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["set_size"], 3);
}

#[test]
fn exit_codes_and_output_dir_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(confaudit(d, &["--help"]).status.code(), Some(0));
    assert_eq!(confaudit(d, &["calibrate"]).status.code(), Some(1));
    assert_eq!(confaudit(d, &["calibrate", "--input", "x.csv", "--alphas", "1.2"]).status.code(), Some(1));
    assert_eq!(confaudit(d, &["calibrate", "--input", "missing.csv"]).status.code(), Some(2));
    fs::write(d.join("bad.csv"), "id,group,label,p0,p1\na,1,0,0.9,0.4\n").unwrap();
    let out = confaudit(d, &["calibrate", "--input", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = Command::new(env!("CARGO_BIN_EXE_confaudit"))
        .args(["simulate", "--preset", "shift", "--n", "20", "--k", "3", "--out", "t.csv"])
        .current_dir(d)
        .env("CONFAUDIT_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = fs::read_to_string(d.join("from_env/t.csv")).unwrap();
    assert!(text.lines().next().unwrap().starts_with("# toolkit_version"));
    assert!(text.contains("\"out_dir\":\"from_env\""));
}
