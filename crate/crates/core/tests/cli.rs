use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otdg::cli::ExperimentConfig;
use otdg::dg::Model;
use serde_json::{json, Value};
use tempfile::TempDir;

fn otdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otdg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn tiny(method: &str) -> Value {
    json!({
        "train": {
            "method": method, "epochs": 2, "batch_size": 16, "sinkhorn_iters": 10,
            "barycenter_iters": 5, "optimizer": "adam", "lr": 0.01, "hidden": 8, "feature_dim": 3
        },
        "dataset": {"rotated": {"angles": [0, 30, 60, 90], "n_per_domain": 40}}
    })
}

fn run_ok(args: &[&str]) -> Output {
    let out = otdg(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn schema() -> Value {
    serde_json::from_str(&read(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/schema/config.schema.json"
    )))
    .unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn schema_lists_every_key_with_the_shipped_defaults() {
    let s = schema();
    let d = serde_json::to_value(ExperimentConfig::default()).unwrap();
    assert_eq!(keys(&s["properties"]), keys(&d));
    for section in ["train", "bounds", "ot"] {
        let props = &s["$defs"][section]["properties"];
        assert_eq!(keys(props), keys(&d[section]), "{section}");
        for (k, v) in d[section].as_object().unwrap() {
            if let Some(def) = props[k].get("default") {
                let (a, b) = (def.as_f64(), v.as_f64());
                match (a, b) {
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() <= 1e-15 * b.abs(), "{section}.{k}")
                    }
                    _ => assert_eq!(def, v, "{section}.{k}"),
                }
            }
        }
    }
    let rot = &s["$defs"]["dataset"]["properties"]["rotated"]["properties"];
    assert_eq!(keys(rot), keys(&d["dataset"]["rotated"]));
}

#[test]
fn train_writes_three_artifacts_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny("wbae"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--serial",
        ]);
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["metrics_seed0.csv", "model_seed0.bin", "report_seed0.json"]
    );
    for n in ["metrics_seed0.csv", "model_seed0.bin"] {
        assert!(
            std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap(),
            "{n}"
        );
    }
    let strip_out = |p: PathBuf| {
        let mut v: Value = serde_json::from_str(&read(p)).unwrap();
        v["config"]["out"] = Value::Null;
        v
    };
    assert_eq!(
        strip_out(a.join("report_seed0.json")),
        strip_out(b.join("report_seed0.json"))
    );
    let metrics = read(a.join("metrics_seed0.csv"));
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,L_c,L_wb,L_r,val_acc"));
    assert_eq!(lines.count(), 2);

    let report: Value = serde_json::from_str(&read(a.join("report_seed0.json"))).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["command"], "train");
    assert_eq!(report["config"]["seeds"], json!([0]));
    assert_eq!(report["config"]["train"]["parallel"], false);
    assert_eq!(report["config"]["train"]["beta"], 0.001);
    assert_eq!(report["result"]["unseen_domain"], "rot90");
    let model = Model::read_from(std::fs::File::open(a.join("model_seed0.bin")).unwrap()).unwrap();
    assert_eq!(model.arch.feature_dim, 3);
}

#[test]
fn wbmi_metrics_name_the_mi_column() {
    let dir = TempDir::new().unwrap();
    let mut c = tiny("wbmi");
    c["unseen"] = json!("rot0");
    let cfg = write_config(dir.path(), "cfg.json", &c);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(read(dir.path().join("metrics_seed3.csv")).starts_with("epoch,L_c,L_wb,L_i,val_acc\n"));
}

#[test]
fn off_grid_weights_warn_but_run() {
    let dir = TempDir::new().unwrap();
    let mut c = tiny("wbae");
    c["train"]["alpha"] = json!(0.3);
    c["train"]["epochs"] = json!(1);
    let cfg = write_config(dir.path(), "cfg.json", &c);
    let out = run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: alpha"));
    let report: Value = serde_json::from_str(&read(dir.path().join("report_seed0.json"))).unwrap();
    assert_eq!(report["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_configs_exit_one_naming_the_field() {
    let dir = TempDir::new().unwrap();
    for (cfg, field) in [
        (json!({"train": {"alpah": 1}}), "alpah"),
        (json!({"train": {"lr": -1}}), "lr"),
        (
            json!({"unseen": "nowhere", "train": {"epochs": 1}}),
            "unseen",
        ),
        (
            json!({"dataset": {"rotated": {"angles": [0]}}}),
            "dataset.rotated.angles",
        ),
    ] {
        let p = write_config(dir.path(), "bad.json", &cfg);
        let out = otdg(&[
            "train",
            "--config",
            p.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(1));
        assert!(
            String::from_utf8_lossy(&out.stderr).contains(field),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let p = dir.path().join("broken.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(
        otdg(&["loo", "--config", p.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(otdg(&["train", "--config"]).status.code(), Some(1));
}

#[test]
fn loo_table_has_a_column_per_domain_plus_average() {
    let dir = TempDir::new().unwrap();
    let mut c = tiny("erm");
    c["methods"] = json!(["erm", "wbae"]);
    let cfg = write_config(dir.path(), "cfg.json", &c);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        run_ok(&[
            "loo",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "1,2,3",
            "--out",
            out.to_str().unwrap(),
            "--serial",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let table = read(a.join("loo_table.csv"));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "method,rot0,rot30,rot60,rot90,Avg");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("erm,") && rows[2].starts_with("wbae,"));
    let runs = read(a.join("loo_runs.csv"));
    assert_eq!(runs.lines().count(), 1 + 2 * 4 * 3);
    let report: Value = serde_json::from_str(&read(a.join("loo_report.json"))).unwrap();
    assert_eq!(
        report["result"][0]["rows"][4][1]["runs"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
    for f in ["loo_table.csv", "loo_runs.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn ablate_emits_the_five_variants() {
    let dir = TempDir::new().unwrap();
    let mut c = tiny("wbae");
    c["unseen"] = json!("rot90");
    c["train"]["epochs"] = json!(1);
    let cfg = write_config(dir.path(), "cfg.json", &c);
    run_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1,2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let table = read(dir.path().join("ablation_table.csv"));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(
        rows[0],
        "unseen,wbae_no_wb,wbae_no_r=wbmi_no_i,wbmi_no_wb,wbae,wbmi"
    );
    assert!(rows[1].starts_with("rot90,"));
    assert_eq!(rows[1].split(',').count(), 6);
}

#[test]
fn bounds_pass_and_exit_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &json!({"bounds": {"cases": 10, "n_mc": 2000, "regime_cases": 20}}),
    );
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        run_ok(&[
            "bounds",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--serial",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let summary = read(a.join("bounds_summary.csv"));
    assert!(summary.starts_with("name,cases,min_slack,min_margin,monte_carlo,failures,passed\n"));
    assert!(
        summary.lines().skip(1).all(|l| l.ends_with(",0,true")),
        "{summary}"
    );
    assert_eq!(summary, read(b.join("bounds_summary.csv")));
    let report: Value = serde_json::from_str(&read(a.join("bounds_report.json"))).unwrap();
    assert_eq!(report["result"]["all_passed"], true);
}

fn cloud_file(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    name.to_string()
}

#[test]
fn ot_sinkhorn_on_identical_files_is_zero() {
    let dir = TempDir::new().unwrap();
    let a = cloud_file(
        dir.path(),
        "a.csv",
        "x1,x2,weight\n0,0,1\n0.5,0.3,1\n-0.2,0.4,2\n",
    );
    let cfg = write_config(dir.path(), "cfg.json", &json!({"ot": {"inputs": [a, a]}}));
    run_ok(&[
        "ot",
        "sinkhorn",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let r: Value = serde_json::from_str(&read(dir.path().join("ot_report.json"))).unwrap();
    assert!(r["result"]["divergence"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(r["result"]["converged"], true);
}

#[test]
fn ot_barycenter_of_two_diracs_is_their_midpoint() {
    let dir = TempDir::new().unwrap();
    let a = cloud_file(dir.path(), "a.csv", "x1,x2,weight\n0,0,1\n");
    let b = cloud_file(dir.path(), "b.csv", "x1,x2,weight\n2,4,1\n");
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &json!({"ot": {"mode": "barycenter", "inputs": [a, b]}}),
    );
    run_ok(&[
        "ot",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let plot = read(dir.path().join("barycenter_plot.csv"));
    let rows: Vec<&str> = plot.lines().collect();
    assert_eq!(rows[0], "x,y,weight");
    assert_eq!(rows.len(), 2);
    let v: Vec<f64> = rows[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert!(
        (v[0] - 1.0).abs() < 1e-6 && (v[1] - 2.0).abs() < 1e-6 && v[2] == 1.0,
        "{v:?}"
    );
}

#[test]
fn ot_barycenter_of_one_cloud_reproduces_it() {
    let dir = TempDir::new().unwrap();
    let text = "x1,x2,weight\n0,0,1\n1,0,1\n0,1,1\n2,2,1\n-1,1,1\n";
    let a = cloud_file(dir.path(), "a.csv", text);
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &json!({"ot": {"mode": "barycenter", "inputs": [a], "epsilon": 0.01}}),
    );
    run_ok(&[
        "ot",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let r: Value = serde_json::from_str(&read(dir.path().join("ot_report.json"))).unwrap();
    assert!(
        r["result"]["divergence_to_inputs"][0].as_f64().unwrap() < 1e-3,
        "{r}"
    );
    let support = otdg::cli::load_point_cloud(&dir.path().join("barycenter_support.csv")).unwrap();
    assert_eq!(support.len(), 5);
}

#[test]
fn malformed_clouds_exit_one() {
    let dir = TempDir::new().unwrap();
    let a = cloud_file(dir.path(), "a.csv", "x1,x2,weight\n0,0,1\n");
    let bad = cloud_file(dir.path(), "bad.csv", "x1,x2,weight\n0,zero,1\n");
    let cfg = write_config(dir.path(), "cfg.json", &json!({"ot": {"inputs": [a, bad]}}));
    let out = otdg(&[
        "ot",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let cfg = write_config(dir.path(), "one.json", &json!({"ot": {"inputs": [a]}}));
    assert_eq!(
        otdg(&["ot", "sinkhorn", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn unconverged_sinkhorn_exits_two() {
    let dir = TempDir::new().unwrap();
    let a = cloud_file(dir.path(), "a.csv", "x1,weight\n0,1\n5,1\n9,1\n");
    let b = cloud_file(dir.path(), "b.csv", "x1,weight\n1,3\n7,1\n");
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &json!({"ot": {"inputs": [a, b], "epsilon": 0.01, "max_iter": 1, "eps_scaling": false, "tol": 1e-14}}),
    );
    let out = otdg(&[
        "ot",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn csv_datasets_resolve_relative_to_the_config() {
    let dir = TempDir::new().unwrap();
    let ds =
        otdg::data::generate_rotated(otdg::data::Base::TwoMoons, &[0.0, 45.0], 30, 0.1, 2).unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    otdg::data::save_csv(&ds, dir.path().join("data/moons.csv")).unwrap();
    let mut c = tiny("erm");
    c["dataset"] = json!({"csv": {"path": "data/moons.csv"}});
    c["out"] = json!("results");
    let cfg = write_config(dir.path(), "cfg.json", &c);
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(dir.path().join("results/metrics_seed0.csv").exists());
}
