use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mdgm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdgm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MDGM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn toy_config(dir: &Path, extra_model: &str) -> std::path::PathBuf {
    let body = format!(
        r#"{{
  "dataset": {{"kind": "sbm", "seed": 1, "params": {{"nodes_per_class": 12, "num_classes": 3,
    "p_intra": 0.1, "p_inter": 0.1, "feature_dim": 5, "sigma_sep": 1.0, "sigma_noise": 0.5}}}},
  "model": {{"preset": "gcn_ddgm", "signature": "EH", "dim": 2, "k": 3{extra_model}}},
  "optimizer": {{"epochs": 4}},
  "seeds": 2,
  "outputs": {{"dir": "out", "snapshot_every": 2}}
}}"#
    );
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn train_writes_report_curves_snapshots_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), "");
    let out = mdgm(&["train", "-c", "run.json", "--jobs", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("out");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    assert!(report["summary"]["acc_test"]["mean"].is_number());
    let curves = fs::read_to_string(root.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,epoch,task_loss,graph_loss,acc_train,acc_val,acc_test,homophily_0,alpha_0_0,alpha_0_1,temperature_0"
    );
    assert_eq!(lines.count(), 8);
    for seed in 0..2 {
        assert!(root.join(format!("checkpoints/seed{seed}.json")).is_file());
        for epoch in [1, 2, 4] {
            let stem = root.join(format!("snapshots/seed{seed}_layer0_epoch{epoch}"));
            let snap: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
            assert_eq!(snap["epoch"], epoch);
            assert!(fs::read_to_string(stem.with_extension("dot")).unwrap().starts_with("graph latent {"));
        }
    }
}

#[test]
fn out_dir_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), "");
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mdgm"))
        .args(["train", "-c", "run.json"])
        .current_dir(dir.path())
        .env("MDGM_OUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("report.json").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn misspelled_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), r#", "signatrue": "E""#);
    let out = mdgm(&["train", "-c", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("signatrue"));
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), "");
    let out = mdgm(&["latent-graph", "-c", "run.json", "--checkpoint", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    fs::write(
        dir.path().join("tsv.json"),
        r#"{"dataset": {"kind": "tsv", "nodes_file": "absent.tsv", "edges_file": "absent_edges.tsv"}}"#,
    )
    .unwrap();
    assert_eq!(mdgm(&["train", "-c", "tsv.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn latent_graph_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), "");
    assert!(mdgm(&["train", "-c", "run.json"], dir.path()).status.success());
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let out = mdgm(
            &["latent-graph", "-c", "run.json", "--checkpoint", "out/checkpoints/seed1.json", "--epoch-tag", "best"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let h: f64 = text.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&h));
        bodies.push(fs::read(dir.path().join("out/latent_graph_best.json")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
    assert!(dir.path().join("out/latent_graph_best.dot").is_file());
}

#[test]
fn verify_exit_code_counts_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mdgm(&["verify", "--suite", "geometry"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 12);

    let mutated = mdgm(&["verify", "--suite", "geometry", "--no-clip"], dir.path());
    assert!(mutated.status.code().unwrap() > 0);
    assert!(String::from_utf8_lossy(&mutated.stdout).contains("FAIL"));

    assert_eq!(mdgm(&["verify", "--suite", "bogus"], dir.path()).status.code(), Some(1));
}
