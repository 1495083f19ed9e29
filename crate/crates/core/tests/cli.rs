use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fulm_core::container;
use serde_json::{json, Value};

fn fulm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fulm"))
        .args(args)
        .env_remove("FULM_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fulm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fulm(args).status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

struct Pipeline {
    _dir: tempfile::TempDir,
    dir: PathBuf,
}

fn task_spec() -> Value {
    json!({
        "domains": [{"name": "A", "classes": [0, 1, 2, 3]}, {"name": "B", "classes": [4, 5, 6, 7]}],
        "train_per_class": 40, "eval_per_class": 10, "seed": 9
    })
}

fn pipeline() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let spec = write(&dir, "spec.json", &task_spec());
    let pre = write(&dir, "pre.json", &json!({"epochs": 2}));
    let out = ok(&["gen-data", "--spec", &spec, "--pretrain", &pre, "--seed", "4", "--out", &p(&dir, "task.json"), "--base-out", &p(&dir, "base.fulm")]);
    assert!(out.contains("effective seed: task 4 pretrain 4"), "{out}");
    let ga = write(&dir, "ga.json", &json!({"objective": {"kind": "ga"}, "epochs": 2, "learning_rate": 0.02}));
    for (i, shard) in ["0/2", "1/2"].iter().enumerate() {
        ok(&[
            "train-adapter", "--data", &p(&dir, "task.json"), "--base", &p(&dir, "base.fulm"), "--domain", "A",
            "--config", &ga, "--shard", shard, "--client-id", &format!("c{i}"), "--seed", &i.to_string(),
            "--out", &p(&dir, &format!("a{i}.fulm")),
        ]);
    }
    Pipeline { _dir: tmp, dir }
}

#[test]
fn pipeline_commands() {
    let Pipeline { dir, .. } = &pipeline();
    let a0 = p(dir, "a0.fulm");
    let a1 = p(dir, "a1.fulm");

    let saved = container::load_delta(&a0).unwrap();
    let summary: Value = serde_json::from_str(&ok(&["inspect", "--json", &a0])).unwrap();
    let names: Vec<&str> = summary["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, saved.entries.keys().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(summary["kind"], "delta");
    assert_eq!(summary["metadata"]["client_id"], "c0");
    assert!((summary["norm"].as_f64().unwrap() - saved.l2_norm().unwrap()).abs() < 1e-9);
    let text = ok(&["inspect", &a0]);
    assert!(text.contains("delta container") && text.contains("w1 lora"), "{text}");
    let before = std::fs::read(&a0).unwrap();
    assert_eq!(ok(&["inspect", "--json", &a0]), serde_json::to_string_pretty(&summary).unwrap() + "\n");
    assert_eq!(std::fs::read(&a0).unwrap(), before);

    let base: Value = serde_json::from_str(&ok(&["inspect", "--json", &p(dir, "base.fulm")])).unwrap();
    assert_eq!(base["kind"], "params");

    let csv = ok(&["similarity", &a0, &a1, "--xi", "0.1", "--json", &p(dir, "sim.json")]);
    assert_eq!(csv.lines().count(), 3);
    let sim: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("sim.json")).unwrap()).unwrap();
    assert!(sim["clustering"]["clusters"].is_array());

    for strategy in ["avg", "sum", "ties", "hier"] {
        let out = p(dir, &format!("m_{strategy}.fulm"));
        ok(&["merge", &a0, &a1, "--strategy", strategy, "--out", &out, "--report", &p(dir, "r.json")]);
        container::load_delta(&out).unwrap();
    }
    let sum = container::load_delta(p(dir, "m_sum.fulm")).unwrap();
    let direct = fulm_core::merge_sum(&[saved, container::load_delta(&a1).unwrap()]).unwrap();
    assert_eq!(fulm_core::flatten(&sum).unwrap(), fulm_core::flatten(&direct).unwrap());

    let a = container::load_delta(&a0).unwrap();
    let zero = fulm_core::linear_combine(&[a.clone(), a], &[1.0, -1.0]).unwrap();
    container::save_delta(dir.join("zero.fulm"), &zero).unwrap();
    let z: Value = serde_json::from_str(&ok(&["inspect", "--json", &p(dir, "zero.fulm")])).unwrap();
    assert_eq!(z["norm"].as_f64(), Some(0.0));
}

fn simulation_spec(epochs: usize, train_per_class: usize) -> Value {
    json!({
        "task": {
            "domains": [{"name": "A", "classes": [0, 1, 2, 3]}, {"name": "B", "classes": [4, 5, 6, 7]}],
            "train_per_class": train_per_class, "eval_per_class": 10
        },
        "pretrain": {"epochs": 2},
        "clients": [
            {"id": "a1", "adapters": [{"domain": "A", "train": {"objective": {"kind": "ga"}, "epochs": epochs}, "select": {"kind": "shard", "index": 0, "parts": 2}}]},
            {"id": "a2", "adapters": [{"domain": "A", "train": {"objective": {"kind": "ga"}, "epochs": epochs}, "select": {"kind": "shard", "index": 1, "parts": 2}}]},
            {"id": "b", "adapters": [{"domain": "B", "train": {"objective": {"kind": "rmu", "c": 5.0}, "epochs": epochs}}]}
        ],
        "server_retention": {"domain": "B", "train": {"objective": {"kind": "retain"}, "epochs": 1}}
    })
}

#[test]
fn simulate_is_transport_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = write(dir, "sim.json", &simulation_spec(2, 30));
    let mut digests = Vec::new();
    for transport in ["inproc", "tcp"] {
        let model = p(dir, &format!("{transport}.fulm"));
        let report = p(dir, &format!("{transport}.json"));
        let out = ok(&["simulate", "--clients", &spec, "--transport", transport, "--seed", "2", "--out-model", &model, "--report", &report]);
        assert!(out.contains("effective seed: task 2 pretrain 2 lora-init 2"), "{out}");
        let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["clients"], json!(["a1", "a2", "b"]));
        digests.push((std::fs::read(&model).unwrap(), r));
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn eval_lists_and_writes_reports() {
    let list = ok(&["eval", "--list"]);
    assert_eq!(list.lines().collect::<Vec<_>>(), fulm_core::eval::EXPERIMENTS);
    let tmp = tempfile::tempdir().unwrap();
    let json_path = p(tmp.path(), "r.json");
    let csv = ok(&["eval", "--experiment", "tab8-forget-size", "--seeds", "0,1", "--json", &json_path]);
    assert!(csv.starts_with("effective seeds: [0, 1]\ngroup,variant,seed,"), "{csv}");
    let report = fulm_core::eval::run_experiment("tab8-forget-size", &[0, 1]).unwrap();
    assert_eq!(csv.split_once('\n').unwrap().1, report.to_csv());
    assert_eq!(std::fs::read_to_string(json_path).unwrap(), report.to_json().unwrap() + "\n");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["merge", "--strategy", "bogus", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["eval", "--experiment", "tab99", "--seeds", "0"]), 1);

    std::fs::write(dir.join("junk.fulm"), b"XXXXnot a container at all").unwrap();
    assert_eq!(code(&["inspect", &p(dir, "junk.fulm")]), 2);
    assert_eq!(code(&["inspect", &p(dir, "missing.fulm")]), 2);

    let Pipeline { dir: pdir, .. } = &pipeline();
    let hot = write(pdir, "hot.json", &json!({"objective": {"kind": "ga"}, "epochs": 3, "learning_rate": 1e30}));
    let args = [
        "train-adapter", "--data", &p(pdir, "task.json"), "--base", &p(pdir, "base.fulm"), "--domain", "A",
        "--config", &hot, "--out", &p(pdir, "hot.fulm"),
    ];
    assert_eq!(code(&args), 4);
    assert!(!pdir.join("hot.fulm").exists());
    assert_eq!(code(&["merge", &p(pdir, "a0.fulm"), &p(pdir, "base.fulm"), "--strategy", "sum", "--out", &p(pdir, "m.fulm")]), 2);

    // Clients train far longer than the one-second upload timeout.
    let mut slow = simulation_spec(3000, 200);
    slow["clients"] = json!([{"id": "a1", "adapters": [{"domain": "A", "train": {"objective": {"kind": "rmu", "c": 5.0}, "epochs": 3000}}]}]);
    let slow = write(dir, "slow.json", &slow);
    let out = fulm(&["simulate", "--clients", &slow, "--timeout", "1", "--out-model", &p(dir, "m.fulm"), "--report", &p(dir, "r.json")]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{stderr}");
    assert!(stderr.contains("timed out") && stderr.contains("missing uploads from [\"a1\"]"), "{stderr}");
    assert!(!dir.join("m.fulm").exists());
}
