use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pecl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pecl")).args(args).output().expect("spawn pecl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_manifest_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = pecl(&["train", "--preset", "micro", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing.join("manifest.jsonl"))), "{}", stderr(&o));
}

#[test]
fn unknown_flag_values_are_usage_errors() {
    for args in [
        &["eval", "--checkpoint", "x", "--fusion", "median"][..],
        &["train", "--protocol", "fold9"],
        &["params", "--placement", "sideways"],
        &["frobnicate"],
    ] {
        assert_eq!(pecl(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn gradcheck_passes_and_lists_every_trainable_parameter() {
    let o = pecl(&["gradcheck", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() < 1e-4);
    let listed: Vec<&str> = v["report"]["params"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    let cfg: pecl_core::ModelConfig = serde_json::from_value(v["experiment"]["model"].clone()).unwrap();
    let model = pecl_core::PeclModel::<f64>::build(&cfg, 0).unwrap();
    let trainable: Vec<&str> = model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.as_str()).collect();
    assert_eq!(listed, trainable);
    assert_eq!(v["seed"], 0);
}

#[test]
fn corrupted_gradient_fails_with_exit_3() {
    let o = pecl(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn params_text_and_json_agree() {
    let j = pecl(&["params", "--format", "json"]);
    let t = stdout(&pecl(&["params"]));
    let v: Value = serde_json::from_str(&stdout(&j)).unwrap();
    let r = &v["report"];
    for g in r["groups"].as_array().unwrap() {
        let line = t.lines().find(|l| l.split_whitespace().next() == g["group"].as_str()).unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1], g["trainable"].to_string());
        assert_eq!(cols[2], g["frozen"].to_string());
    }
    assert!(t.contains(&format!("trainable {} of {}", r["trainable"], r["total"])));
    assert!(t.contains(&format!("{} adapter modules", r["adapter_modules"])));
    let echoed = t.lines().find_map(|l| l.strip_prefix("config ")).unwrap();
    assert_eq!(serde_json::from_str::<Value>(echoed).unwrap(), v["experiment"]);
}

#[test]
fn adapter_kind_changes_only_the_adapter_group() {
    let get = |kind: &str| -> Value {
        serde_json::from_str(&stdout(&pecl(&["params", "--format", "json", "--adapter", kind]))).unwrap()
    };
    let (none, ut) = (get("none"), get("ut"));
    for (a, b) in none["report"]["groups"].as_array().unwrap().iter().zip(ut["report"]["groups"].as_array().unwrap()) {
        if a["group"] == "adapter" {
            assert_eq!(a["trainable"], 0);
            assert!(b["trainable"].as_u64().unwrap() > 0);
        } else if a["group"] != "adapter_norm" {
            // Adapter norms exist only alongside parallel adapters.
            assert_eq!(a, b);
        }
    }
}

#[test]
fn split_is_deterministic_and_accepts_a_bare_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ref");
    assert_eq!(pecl(&["synth", "--reference-manifest", "--out", s(&data)]).status.code(), Some(0));
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = pecl(&["split", "--data", s(&data), "--protocol", "duration", "--seed", "4", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        files.push((std::fs::read(out.join("splits.json")).unwrap(), json(&out.join("split_report.json"))));
    }
    assert_eq!(files[0].0, files[1].0);
    let report = &files[0].1;
    assert_eq!(report["n_records"], 1675);
    assert_eq!(report["seed"], 4);
    let splits: Value = serde_json::from_slice(&files[0].0).unwrap();
    assert!(splits.get("short").is_some() && splits.get("long").is_some());
}

#[test]
fn kappa_of_identical_annotators_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let table = serde_json::json!({
        "annotator": "a",
        "items": {
            "c1": {"smile": 1, "frown": 0, "pitch_rise": 1},
            "c2": {"smile": 0, "frown": 1, "pitch_rise": 0},
            "c3": {"smile": 1, "frown": 1, "pitch_rise": 0}
        }
    });
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, table.to_string()).unwrap();
    let mut tb = table.clone();
    tb["annotator"] = "b".into();
    std::fs::write(&b, tb.to_string()).unwrap();
    let o = pecl(&["kappa", s(&a), s(&b), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["report"]["overall"], 1.0);
}

/// synth → train → eval on the micro preset.
#[test]
fn pipeline_synth_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = pecl(&["synth", "--preset", "micro", "--clips", "90", "--seed", "3", "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = pecl(&["train", "--preset", "micro", "--data", s(&data), "--epochs", "2", "--seed", "3", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fold = run.join("fold1");
    for f in ["checkpoint.json", "train_log.jsonl", "metrics.json"] {
        assert!(fold.join(f).is_file(), "{f}");
    }
    let metrics = json(&fold.join("metrics.json"));
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["experiment"]["model"]["optim"]["epochs"], 2);
    let log = std::fs::read_to_string(fold.join("train_log.jsonl")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["metrics"], metrics["metrics"]);

    let ckpt = fold.join("checkpoint.json");
    let o = pecl(&["eval", "--checkpoint", s(&ckpt), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(eval, metrics);

    let o = pecl(&["eval", "--checkpoint", s(&ckpt), "--fusion", "score", "--score-weight", "1", "--format", "json"]);
    let eval: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(eval["metrics"]["fused"], eval["metrics"]["visual"]);

    let o = pecl(&["eval", "--checkpoint", s(&ckpt), "--fusion", "concat"]);
    assert_eq!(o.status.code(), Some(2));

    let o = pecl(&["eval", "--checkpoint", s(&ckpt), "--layers", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("checkpoint:") && err.contains("requested:"), "{err}");
}
